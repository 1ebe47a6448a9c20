"""Dense tensors with a reverse-mode differentiation tape.

Only the operations the group model needs are provided. Every operation
records its parents and a backward rule on the output tensor; ``Tape``
orders the recorded graph topologically and pushes gradients from a scalar
loss back to the leaf tensors that require them.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import DimensionError, GradientError, ValidationFailure

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording operations (inference, numeric probes)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    values = data.data if isinstance(data, Tensor) else data
    return Tensor(np.array(values, dtype=DTYPE), requires_grad=True, name=name)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Topologically ordered view of the operations that produced ``root``.

    Parents always precede the operations that consume them; ``backward``
    walks the order in reverse and visits every node exactly once.
    """

    def __init__(self, root: Tensor) -> None:
        self.root = root
        self.nodes: List[Tensor] = self._order(root)

    @staticmethod
    def _order(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited: set[int] = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self) -> None:
        grads = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring it."""
    if loss.size != 1:
        raise GradientError(
            f"backward needs a scalar loss, got shape {loss.shape}",
            details={"shape": list(loss.shape)},
        )
    if not loss.requires_grad:
        raise GradientError("loss was not produced on a tape (no input requires grad)")
    Tape(loss).backward()


# -- elementwise arithmetic -------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _result(-x.data, (x,), lambda g: (-g,))


def absolute(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


# -- reductions and layout --------------------------------------------------


def sum(x: ArrayLike, axis: Union[int, Tuple[int, ...], None] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), rule)


def mean(x: ArrayLike, axis: Union[int, Tuple[int, ...], None] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    total = sum(x, axis=axis, keepdims=keepdims)
    count = x.size // max(total.size, 1)
    return mul(total, 1.0 / count)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: ArrayLike, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat", (), (), "nothing to concatenate")
    reference = parts[0].shape
    for part in parts[1:]:
        if part.ndim != len(reference) or any(
            a != b for i, (a, b) in enumerate(zip(part.shape, reference)) if i != axis % len(reference)
        ):
            raise DimensionError("concat", reference, part.shape, f"axis {axis}")
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def take(x: ArrayLike, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    index = np.asarray(indices, dtype=np.int64)

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros(np.moveaxis(x.data, axis, 0).shape, dtype=DTYPE)
        np.add.at(grad, index, np.moveaxis(g, axis, 0))
        return (np.moveaxis(grad, 0, axis),)

    return _result(np.take(x.data, index, axis=axis), (x,), rule)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    return _result(
        np.matmul(a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
            _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape),
        ),
    )


# -- activations --------------------------------------------------------------


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x: ArrayLike) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    x = as_tensor(x)
    return _result(-np.logaddexp(0.0, -x.data), (x,), lambda g: (g * expit(-x.data),))


def pointwise(x: ArrayLike, fn: Literal["relu", "sigmoid"]) -> Tensor:
    if fn == "relu":
        return relu(x)
    if fn == "sigmoid":
        return sigmoid(x)
    raise ValidationFailure(f"unknown pointwise function {fn!r}", code="unknown_function")


def softmax_lastdim(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax_lastdim", x.shape, (), "last dimension must be non-empty")
    shifted = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = shifted / shifted.sum(axis=-1, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


# -- layers -------------------------------------------------------------------


def linear(x: ArrayLike, W: ArrayLike, b: ArrayLike) -> Tensor:
    """Affine map of a [B, Din] batch: x @ W + b with W shaped [Din, Dout]."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError("linear", x.shape, W.shape)
    if b.shape != (W.shape[1],):
        raise DimensionError("linear", W.shape, b.shape, "bias length must equal output width")
    return _result(
        x.data @ W.data + b.data,
        (x, W, b),
        lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def conv1d_same(x: ArrayLike, K: ArrayLike, b: ArrayLike) -> Tensor:
    """Zero-padded width-3 convolution over [N, Cin, T] preserving T."""
    x, K, b = as_tensor(x), as_tensor(K), as_tensor(b)
    if K.ndim != 3 or K.shape[2] != 3:
        raise DimensionError("conv1d_same", x.shape, K.shape, "kernel size must be 3")
    if x.ndim != 3 or x.shape[1] != K.shape[1]:
        raise DimensionError("conv1d_same", x.shape, K.shape, "input channels differ from kernel")
    if b.shape != (K.shape[0],):
        raise DimensionError("conv1d_same", K.shape, b.shape, "bias length must equal output channels")
    n, cin, t = x.shape
    cout = K.shape[0]
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1)))
    # cols[n, t, c, k] = padded[n, c, t + k]
    cols = np.stack([padded[:, :, k : k + t] for k in range(3)], axis=-1)
    cols = cols.transpose(0, 2, 1, 3).reshape(n * t, cin * 3)
    kernel = K.data.reshape(cout, cin * 3)
    out = (cols @ kernel.T).reshape(n, t, cout).transpose(0, 2, 1) + b.data[None, :, None]

    def rule(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_rows = g.transpose(0, 2, 1).reshape(n * t, cout)
        grad_k = (g_rows.T @ cols).reshape(K.shape)
        grad_cols = (g_rows @ kernel).reshape(n, t, cin, 3)
        grad_padded = np.zeros_like(padded)
        for k in range(3):
            grad_padded[:, :, k : k + t] += grad_cols[..., k].transpose(0, 2, 1)
        return grad_padded[:, :, 1:-1], grad_k, g.sum(axis=(0, 2))

    return _result(out, (x, K, b), rule)


@dataclass
class BatchNormState:
    """Running statistics of one batchnorm layer (uninitialized until trained)."""

    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None and self.running_var is not None

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        if not self.initialized:
            self.running_mean = np.zeros(self.channels, dtype=DTYPE)
            self.running_var = np.ones(self.channels, dtype=DTYPE)
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
        self.running_var = (1.0 - m) * self.running_var + m * batch_var_unbiased


def batchnorm1d(
    x: ArrayLike,
    gamma: ArrayLike,
    beta: ArrayLike,
    mode: Literal["train", "eval"],
    state: BatchNormState,
) -> Tensor:
    """Per-channel normalization of [N, C, T] over the (N, T) axes."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError("batchnorm1d", x.shape, gamma.shape)
    eps = state.eps
    g_b = gamma.data[None, :, None]
    if mode == "train":
        count = x.shape[0] * x.shape[2]
        if count < 2:
            raise DimensionError("batchnorm1d", x.shape, (), "train mode needs N*T >= 2 per channel")
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        state.update(mu, var * count / (count - 1))
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.data - mu[None, :, None]) * inv_std[None, :, None]

        def rule(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
            g_hat = g * g_b
            grad_x = (inv_std[None, :, None] / count) * (
                count * g_hat
                - g_hat.sum(axis=(0, 2), keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=(0, 2), keepdims=True)
            )
            return grad_x, (g * x_hat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    elif mode == "eval":
        if not state.initialized:
            raise ValidationFailure(
                "batchnorm1d in eval mode before any training step: running statistics are uninitialized",
                code="batchnorm_uninitialized",
            )
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        x_hat = (x.data - state.running_mean[None, :, None]) * inv_std[None, :, None]

        def rule(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
            return g * g_b * inv_std[None, :, None], (g * x_hat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    else:
        raise ValidationFailure(f"unknown batchnorm mode {mode!r}", code="unknown_mode")
    return _result(g_b * x_hat + beta.data[None, :, None], (x, gamma, beta), rule)


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError("layer_norm", x.shape, gamma.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    x_hat = (x.data - mu) * inv_std
    lead = tuple(range(x.ndim - 1))

    def rule(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_hat = g * gamma.data
        grad_x = (inv_std / width) * (
            width * g_hat - g_hat.sum(axis=-1, keepdims=True) - x_hat * (g_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        return grad_x, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return _result(x_hat * gamma.data + beta.data, (x, gamma, beta), rule)


def cosine_similarity(F: ArrayLike, eps: float = 1e-12, min_norm: float = 1e-12) -> Tensor:
    """Pairwise row cosine similarity: [..., T, D] -> [..., T, T].

    s_ij = <f_i, f_j> / (|f_i| |f_j| + eps); rows whose norm is below
    ``min_norm`` get similarity 0 with everything, including themselves.
    """
    F = as_tensor(F)
    if F.ndim < 2:
        raise DimensionError("cosine_similarity", F.shape, (), "needs at least [T, D]")
    norms = np.sqrt((F.data * F.data).sum(axis=-1))
    valid = norms >= min_norm
    mask = valid[..., :, None] & valid[..., None, :]
    inner = np.matmul(F.data, np.swapaxes(F.data, -1, -2))
    denom = norms[..., :, None] * norms[..., None, :] + eps
    sim = np.where(mask, inner / denom, 0.0)
    safe_norms = np.where(valid, norms, 1.0)

    def rule(g: np.ndarray) -> Tuple[np.ndarray]:
        h = (g + np.swapaxes(g, -1, -2)) * mask
        direct = np.matmul(h / denom, F.data)
        coef = (h * inner * norms[..., None, :] / (denom * denom)).sum(axis=-1)
        return (direct - F.data * (coef / safe_norms)[..., None],)

    return _result(sim, (F,), rule)
