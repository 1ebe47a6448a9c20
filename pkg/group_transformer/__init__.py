"""Social group detection with spatio-temporal transformers over person relation graphs."""

__version__ = "0.1.0"
