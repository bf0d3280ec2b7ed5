"""Minimal differentiable numpy kernel.

A tiny tape-based reverse-mode engine over float64 arrays, restricted to the
handful of ops the encoders and heads need. Fractional strides in ``conv1d``
are realised by linear interpolation of the input read positions.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Parameter",
    "conv1d",
    "conv1d_backward",
    "conv1d_output_length",
    "conv",
    "linear",
    "silu",
    "embedding",
    "add",
    "mean_time",
    "crop_time",
    "matmul_const",
    "reshape",
    "transpose",
    "mse_loss",
    "sq_dist",
    "sum_all",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"SFIMOS01"


class Tensor:
    """Array value with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients to every upstream tensor that requires them."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


class Parameter(Tensor):
    """Trainable leaf tensor carrying Adam moments."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (), _backward=backward if req else None)


# ---------------------------------------------------------------------------
# convolution with (possibly fractional) stride


def conv1d_output_length(length: int, kernel_size: int, stride: float) -> int:
    if kernel_size > length:
        raise ValueError(f"kernel of length {kernel_size} longer than input of length {length}")
    return int(np.floor((length - kernel_size) / stride + 1e-9)) + 1


def _read_plan(length: int, kernel_size: int, stride: float):
    """Read positions ``t*stride + k`` as (i0, i1, w0, w1) arrays of shape (K, T_out).

    Returns ``None`` for the interpolation part when every position is integral.
    """
    n_out = conv1d_output_length(length, kernel_size, stride)
    if abs(stride - round(stride)) < 1e-12:
        return n_out, int(round(stride)), None
    pos = np.arange(kernel_size)[:, None] + np.arange(n_out)[None, :] * stride
    i0 = np.floor(pos + 1e-9).astype(np.int64)
    frac = pos - i0
    frac[np.abs(frac) < 1e-9] = 0.0
    # frac == 0 at the final sample would read past the end; its weight is zero
    i1 = np.minimum(i0 + 1, length - 1)
    return n_out, None, (i0, i1, 1.0 - frac, frac)


def _im2col(x: np.ndarray, kernel_size: int, plan) -> np.ndarray:
    """Columns of shape (C_in * K, T_out), channel-major."""
    n_out, step, interp = plan
    if interp is None:
        view = sliding_window_view(x, kernel_size, axis=1)[:, : step * (n_out - 1) + 1 : step]
        cols = view.transpose(0, 2, 1)
    else:
        i0, i1, w0, w1 = interp
        cols = x[:, i0] * w0 + x[:, i1] * w1
    return np.ascontiguousarray(cols).reshape(x.shape[0] * kernel_size, n_out)


def conv1d(x: np.ndarray, kernel: np.ndarray, stride: float = 1) -> np.ndarray:
    """Cross-correlate ``x`` (C_in, T) with ``kernel`` (C_out, C_in, K).

    Output frame ``t`` reads input positions ``t*stride + k``; non-integer
    positions are linearly interpolated between neighbouring samples.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if stride <= 0:
        raise ValueError("stride must be positive")
    if x.ndim != 2 or kernel.ndim != 3 or kernel.shape[1] != x.shape[0]:
        raise ValueError(f"shape mismatch: input {x.shape}, kernel {kernel.shape}")
    K = kernel.shape[2]
    cols = _im2col(x, K, _read_plan(x.shape[1], K, stride))
    return kernel.reshape(kernel.shape[0], -1) @ cols


def _kernel_grad(grad_out, x, kernel_shape, plan):
    return (grad_out @ _im2col(x, kernel_shape[2], plan).T).reshape(kernel_shape)


def conv1d_backward(grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray, stride: float = 1):
    """Gradients of :func:`conv1d` with respect to input and kernel."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    c_in, length = x.shape
    K = kernel.shape[2]
    plan = _read_plan(length, K, stride)
    n_out, step, interp = plan
    if grad_out.shape != (kernel.shape[0], n_out):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match conv output")
    grad_kernel = _kernel_grad(grad_out, x, kernel.shape, plan)
    grad_cols = (kernel.reshape(kernel.shape[0], -1).T @ grad_out).reshape(c_in, K, n_out)
    if interp is None:
        grad_x = np.zeros_like(x)
        for k in range(K):
            grad_x[:, k : k + step * (n_out - 1) + 1 : step] += grad_cols[:, k]
        return grad_x, grad_kernel
    i0, i1, w0, w1 = interp
    offs = (np.arange(c_in) * length)[:, None, None]
    idx = np.concatenate([(i0 + offs).ravel(), (i1 + offs).ravel()])
    vals = np.concatenate([(grad_cols * w0).ravel(), (grad_cols * w1).ravel()])
    grad_x = np.bincount(idx, weights=vals, minlength=c_in * length).reshape(c_in, length)
    return grad_x, grad_kernel


def conv(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: float = 1) -> Tensor:
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    out = conv1d(x.data, kernel.data, stride)
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        if x.requires_grad:
            gx, gk = conv1d_backward(g, x.data, kernel.data, stride)
        else:
            gx = None
            gk = _kernel_grad(g, x.data, kernel.shape, _read_plan(x.shape[1], kernel.shape[2], stride))
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=1))
        return grads

    return _node(out, parents, backward)


# ---------------------------------------------------------------------------
# dense ops


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (..., in)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ weight.data, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _node(out, parents, backward)


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = x.data * sig

    def backward(g):
        return [g * (sig + x.data * sig * (1.0 - sig))]

    return _node(out, (x,), backward)


def embedding(table: Tensor, index) -> Tensor:
    """Row lookup; ``index`` may be an int or an integer array."""
    table = _as_tensor(table)
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu" or np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise IndexError(f"embedding id {index} out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return [full]

    return _node(table.data[idx].copy(), (table,), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)])


def mean_time(x: Tensor) -> Tensor:
    """Average a (C, T) map over frames."""
    x = _as_tensor(x)
    n = x.shape[1]
    return _node(x.data.mean(axis=1), (x,), lambda g: [np.repeat(g[:, None], n, axis=1) / n])


def crop_time(x: Tensor, length: int) -> Tensor:
    x = _as_tensor(x)
    if length == x.shape[1]:
        return x

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, :length] = g
        return [full]

    return _node(x.data[:, :length], (x,), backward)


def matmul_const(matrix: np.ndarray, x: Tensor) -> Tensor:
    """Left-multiply by a constant matrix along the first axis of ``x``."""
    x = _as_tensor(x)
    return _node(matrix @ x.data, (x,), lambda g: [matrix.T @ g])


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: [g.reshape(x.shape)])


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    inverse = np.argsort(axes)
    return _node(x.data.transpose(axes), (x,), lambda g: [g.transpose(inverse)])


def sum_all(terms: Iterable[Tensor]) -> Tensor:
    terms = [_as_tensor(t) for t in terms]
    total = sum(float(t.data.sum()) for t in terms)
    return _node(np.array(total), tuple(terms), lambda g: [np.full(t.shape, float(g)) for t in terms])


def sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Squared L2 distance summed over all elements."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    return _node(np.array((diff * diff).sum()), (a, b), lambda g: [2 * g * diff, -2 * g * diff])


def mse_loss(pred: Tensor, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _node(np.array((diff * diff).mean()), (pred, target), lambda g: [2 * g * diff / n, -2 * g * diff / n])


# ---------------------------------------------------------------------------
# optimisation and checkpoints


def adam_step(params: Iterable[Parameter], lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place, then clear gradients."""
    for p in params:
        g = p.grad
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1 - beta2) * g * g
        m_hat = p.adam_m / (1 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1 - beta2 ** p.step_count)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays in the SFIMOS01 flat binary layout.

    Each record: u32 name length, utf-8 name, u32 rank, u64 dims, then the
    values as little-endian float64 in row-major order.
    """
    chunks = [CHECKPOINT_MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an SFIMOS01 checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint") from exc
    return out
