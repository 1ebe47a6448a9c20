"""Parameter containers for the layers the model is assembled from.

Each layer owns named ``Tensor`` parameters (names are the checkpoint
entry names) and is callable on tensors. Weights use Kaiming-style
uniform initialization with bound sqrt(6 / fan_in); biases start at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Literal

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor, parameter


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Linear:
    """y = x @ W + b over the last axis; W is stored as [Din, Dout]."""

    W: Tensor
    b: Tensor

    @classmethod
    def create(cls, name: str, din: int, dout: int, rng: np.random.Generator) -> "Linear":
        return cls(
            W=parameter(kaiming_uniform(rng, (din, dout), din), f"{name}.W"),
            b=parameter(np.zeros(dout), f"{name}.b"),
        )

    @property
    def in_features(self) -> int:
        return self.W.shape[0]

    @property
    def out_features(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return T.linear(x, self.W, self.b)
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, x.shape[-1]))
        return T.reshape(T.linear(flat, self.W, self.b), (*lead, self.out_features))

    def parameters(self) -> Dict[str, Tensor]:
        return {self.W.name: self.W, self.b.name: self.b}


@dataclass
class Conv1d:
    """Width-3 'same' convolution, kernel [Cout, Cin, 3]."""

    W: Tensor
    b: Tensor

    @classmethod
    def create(cls, name: str, cin: int, cout: int, rng: np.random.Generator) -> "Conv1d":
        return cls(
            W=parameter(kaiming_uniform(rng, (cout, cin, 3), cin * 3), f"{name}.W"),
            b=parameter(np.zeros(cout), f"{name}.b"),
        )

    @property
    def in_channels(self) -> int:
        return self.W.shape[1]

    @property
    def out_channels(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d_same(x, self.W, self.b)

    def parameters(self) -> Dict[str, Tensor]:
        return {self.W.name: self.W, self.b.name: self.b}


@dataclass
class BatchNorm:
    """Batchnorm over [N, C, T] with its running statistics as buffers."""

    name: str
    g: Tensor
    b: Tensor
    state: BatchNormState

    @classmethod
    def create(cls, name: str, channels: int) -> "BatchNorm":
        return cls(
            name=name,
            g=parameter(np.ones(channels), f"{name}.g"),
            b=parameter(np.zeros(channels), f"{name}.b"),
            state=BatchNormState(channels),
        )

    def __call__(self, x: Tensor, mode: Literal["train", "eval"]) -> Tensor:
        return T.batchnorm1d(x, self.g, self.b, mode, self.state)

    def parameters(self) -> Dict[str, Tensor]:
        return {self.g.name: self.g, self.b.name: self.b}

    def buffers(self) -> Dict[str, np.ndarray]:
        if not self.state.initialized:
            return {}
        return {f"{self.name}.rm": self.state.running_mean, f"{self.name}.rv": self.state.running_var}

    def load_buffers(self, running_mean: np.ndarray, running_var: np.ndarray) -> None:
        self.state.running_mean = np.asarray(running_mean, dtype=np.float64).copy()
        self.state.running_var = np.asarray(running_var, dtype=np.float64).copy()


@dataclass
class LayerNorm:
    g: Tensor
    b: Tensor
    eps: float = field(default=1e-5)

    @classmethod
    def create(cls, name: str, width: int) -> "LayerNorm":
        return cls(g=parameter(np.ones(width), f"{name}.g"), b=parameter(np.zeros(width), f"{name}.b"))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b, self.eps)

    def parameters(self) -> Dict[str, Tensor]:
        return {self.g.name: self.g, self.b.name: self.b}
