"""Core functionality for group-transformer."""
