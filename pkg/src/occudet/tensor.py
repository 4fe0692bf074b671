"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op computes its forward result eagerly with numpy and,
when a Tape is active and an input requires gradients, records a backward
closure on that tape. Tape.backward replays the closures in exact reverse
execution order, accumulating into the .grad buffers of the participating
tensors. Leaves reached along several paths sum their contributions.

Rank is capped at 4 (batch, channel, and two spatial-like axes), which covers
every shape the occupancy model needs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tsum",
    "tmean",
    "log",
    "sqrt",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "log_softmax",
    "matmul",
    "permute",
    "reshape",
    "conv2d",
    "batch_norm",
    "global_avg_pool",
    "global_max_pool",
    "linear",
]

_MAX_RANK = 4

_active_tape: "Tape | None" = None


class Tape:
    """Ordered record of the differentiable ops of one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward(loss)`` (or ``loss.backward()``). A tape can be replayed only
    once; running backward a second time raises, so stale gradients cannot be
    produced by accident. Re-run the forward pass to differentiate again.

    A tape is single-threaded: one forward/backward pass belongs to one
    thread, and tapes do not nest. Forward passes run outside any tape are
    pure reads and may run concurrently.
    """

    def __init__(self):
        self._ops = []
        self._consumed = False

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def _record(self, fn):
        self._ops.append(fn)

    def backward(self, loss: "Tensor") -> None:
        """Populate .grad of every requires_grad tensor reachable from loss."""
        if loss.data.size != 1:
            raise ValueError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        if loss._tape is not self:
            raise RuntimeError("loss was not recorded on this tape")
        if self._consumed:
            raise RuntimeError(
                "tape already replayed; run a fresh forward pass before "
                "calling backward again"
            )
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._ops):
            fn()


class Tensor:
    """Dense rank-<=4 float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > _MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of {_MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise RuntimeError("tensor was not produced by a recorded forward pass")
        self._tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracing(*tensors) -> bool:
    if _active_tape is None:
        return False
    return any(t.requires_grad for t in tensors)


def _record(out: Tensor, fn) -> None:
    out.requires_grad = True
    out._tape = _active_tape
    _active_tape._record(fn)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # own buffer: g may alias an upstream gradient
        t.grad = np.array(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g over the axes numpy broadcast when producing it from `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcastable"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    if _tracing(a, b):
        def bwd():
            if out.grad is None:
                return
            _accumulate(a, _unbroadcast(out.grad, a.shape))
            _accumulate(b, _unbroadcast(out.grad, b.shape))
        _record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    if _tracing(a, b):
        def bwd():
            if out.grad is None:
                return
            _accumulate(a, _unbroadcast(out.grad, a.shape))
            _accumulate(b, _unbroadcast(-out.grad, b.shape))
        _record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)
    if _tracing(a, b):
        a_data, b_data = a.data, b.data
        def bwd():
            if out.grad is None:
                return
            _accumulate(a, _unbroadcast(out.grad * b_data, a.shape))
            _accumulate(b, _unbroadcast(out.grad * a_data, b.shape))
        _record(out, bwd)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data)
    if _tracing(a, b):
        a_data, b_data = a.data, b.data
        def bwd():
            if out.grad is None:
                return
            _accumulate(a, _unbroadcast(out.grad / b_data, a.shape))
            _accumulate(b, _unbroadcast(-out.grad * a_data / (b_data * b_data), b.shape))
        _record(out, bwd)
    return out


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)
    if _tracing(x):
        def bwd():
            if out.grad is None:
                return
            _accumulate(x, -out.grad)
        _record(out, bwd)
    return out


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a rank-0 tensor."""
    out = Tensor(x.data.sum())
    if _tracing(x):
        def bwd():
            if out.grad is None:
                return
            _accumulate(x, np.full(x.shape, float(out.grad)))
        _record(out, bwd)
    return out


def tmean(x: Tensor) -> Tensor:
    """Mean of all entries, as a rank-0 tensor."""
    n = x.data.size
    out = Tensor(x.data.sum() / n)
    if _tracing(x):
        def bwd():
            if out.grad is None:
                return
            _accumulate(x, np.full(x.shape, float(out.grad) / n))
        _record(out, bwd)
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    if _tracing(x):
        x_data = x.data
        def bwd():
            if out.grad is None:
                return
            _accumulate(x, out.grad / x_data)
        _record(out, bwd)
    return out


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.data))
    if _tracing(x):
        def bwd():
            if out.grad is None:
                return
            _accumulate(x, out.grad / (2.0 * out.data))
        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if _tracing(x):
        mask = x.data > 0.0
        def bwd():
            if out.grad is None:
                return
            _accumulate(x, out.grad * mask)
        _record(out, bwd)
    return out


def sigmoid_deriv_from_output(y: np.ndarray) -> np.ndarray:
    """d sigmoid / dx expressed through the already-computed output."""
    return y * (1.0 - y)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflowing exp
    z = x.data
    out_data = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                        np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = Tensor(out_data)
    if _tracing(x):
        def bwd():
            if out.grad is None:
                return
            _accumulate(x, out.grad * sigmoid_deriv_from_output(out.data))
        _record(out, bwd)
    return out


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))
    if _tracing(x):
        def bwd():
            if out.grad is None:
                return
            _accumulate(x, out.grad * (1.0 - out.data * out.data))
        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# softmax family (always over the last axis)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    if _tracing(x):
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            _accumulate(x, out.data * (g - (g * out.data).sum(axis=-1, keepdims=True)))
        _record(out, bwd)
    return out


def log_softmax(x: Tensor) -> Tensor:
    """log(softmax(x)) over the last axis without forming the ratio."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse)
    if _tracing(x):
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            soft = np.exp(out.data)
            _accumulate(x, g - soft * g.sum(axis=-1, keepdims=True))
        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product. Leading batch axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.ndim != b.ndim:
        raise ValueError(f"matmul rank mismatch: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    if _tracing(a, b):
        a_data, b_data = a.data, b.data
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            _accumulate(a, g @ b_data.swapaxes(-1, -2))
            _accumulate(b, a_data.swapaxes(-1, -2) @ g)
        _record(out, bwd)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of rows: x[N, Din] @ weight[Din, Dout] (+ bias[Dout])."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear extent mismatch: {x.shape} @ {weight.shape}")
    out_data = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
        out_data = out_data + bias.data
    out = Tensor(out_data)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    if _tracing(*inputs):
        x_data, w_data = x.data, weight.data
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            _accumulate(x, g @ w_data.T)
            _accumulate(weight, x_data.T @ g)
            if bias is not None:
                _accumulate(bias, g.sum(axis=0))
        _record(out, bwd)
    return out


def permute(x: Tensor, axes) -> Tensor:
    """Reorder axes: output axis i carries input axis axes[i]."""
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"invalid permutation {axes} for rank-{x.ndim} tensor")
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    if _tracing(x):
        inverse = np.argsort(axes)
        def bwd():
            if out.grad is None:
                return
            _accumulate(x, out.grad.transpose(inverse))
        _record(out, bwd)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape))
    if _tracing(x):
        def bwd():
            if out.grad is None:
                return
            _accumulate(x, out.grad.reshape(x.shape))
        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# convolution


def _conv_cols(padded: np.ndarray, kf: int, kt: int, sf: int, st: int):
    """Gather sliding kernel windows into a (N, Fo*To, Cin*kf*kt) matrix."""
    n, cin, fp, tp = padded.shape
    fo = (fp - kf) // sf + 1
    to = (tp - kt) // st + 1
    win = np.lib.stride_tricks.sliding_window_view(padded, (kf, kt), axis=(2, 3))
    win = win[:, :, ::sf, ::st]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, fo * to, cin * kf * kt)
    return np.ascontiguousarray(cols), fo, to


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride=(1, 1),
    padding=(0, 0),
) -> Tensor:
    """Strided zero-padded 2D cross-correlation over the trailing two axes.

    x is (N, Cin, F, T); kernel is (Cout, Cin, kF, kT). The output spatial
    extents follow floor((X + 2p - k) / s) + 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(
            f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, cin, f, t = x.shape
    cout, kcin, kf, kt = kernel.shape
    if cin != kcin:
        raise ValueError(
            f"conv2d channel mismatch: input has Cin={cin} but kernel expects Cin={kcin}"
        )
    sf, st = stride
    pf, pt = padding
    if f + 2 * pf < kf or t + 2 * pt < kt:
        raise ValueError(
            f"conv2d input {f}x{t} with padding ({pf},{pt}) is smaller than "
            f"the {kf}x{kt} kernel"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")

    padded = np.pad(x.data, ((0, 0), (0, 0), (pf, pf), (pt, pt)))
    cols, fo, to = _conv_cols(padded, kf, kt, sf, st)
    w2d = kernel.data.reshape(cout, cin * kf * kt)
    out_data = (cols @ w2d.T).transpose(0, 2, 1).reshape(n, cout, fo, to)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    out = Tensor(out_data)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    if _tracing(*inputs):
        padded_shape = padded.shape
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            g2 = g.transpose(0, 2, 3, 1).reshape(n * fo * to, cout)
            _accumulate(kernel, (g2.T @ cols.reshape(n * fo * to, -1)).reshape(kernel.shape))
            if bias is not None:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dcols = (g2 @ w2d).reshape(n, fo, to, cin, kf, kt)
                dpad = np.zeros(padded_shape)
                for i in range(kf):
                    for j in range(kt):
                        dpad[:, :, i:i + sf * fo:sf, j:j + st * to:st] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                _accumulate(x, dpad[:, :, pf:pf + f, pt:pt + t])
        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    """Per-channel normalization of a (N, C, F, T) tensor.

    Train mode normalizes with biased batch statistics and, unless
    update_running is False, folds them into the running buffers (the running
    variance uses the unbiased estimate). Eval mode normalizes with the
    running buffers, which start at mean 0 / var 1, so an eval pass before
    any training step is well defined.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects a rank-4 input, got {x.shape}")
    n, c, f, t = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batch_norm parameter shapes {gamma.shape}/{beta.shape} != ({c},)"
        )
    axes = (0, 2, 3)
    m = n * f * t

    if train:
        if m < 2:
            raise ValueError(
                f"batch_norm train mode needs >= 2 values per channel, got {m}"
            )
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            running_mean[...] = (1.0 - momentum) * running_mean + momentum * mean
            running_var[...] = (1.0 - momentum) * running_var + momentum * (var * m / (m - 1))
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None])

    if _tracing(x, gamma, beta):
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            _accumulate(gamma, (g * x_hat).sum(axis=axes))
            _accumulate(beta, g.sum(axes))
            if x.requires_grad:
                gx = g * gamma.data[None, :, None, None]
                if train:
                    # gradient through the batch statistics
                    mean_g = gx.mean(axis=axes, keepdims=True)
                    mean_gx = (gx * x_hat).mean(axis=axes, keepdims=True)
                    dx = inv_std[None, :, None, None] * (gx - mean_g - x_hat * mean_gx)
                else:
                    dx = gx * inv_std[None, :, None, None]
                _accumulate(x, dx)
        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# pooling


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the trailing (F, T) axes: (N, C, F, T) -> (N, C)."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects a rank-4 input, got {x.shape}")
    n, c, f, t = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    if _tracing(x):
        def bwd():
            if out.grad is None:
                return
            _accumulate(x, np.broadcast_to(out.grad[:, :, None, None] / (f * t), x.shape))
        _record(out, bwd)
    return out


def global_max_pool(x: Tensor) -> Tensor:
    """Max over the trailing (F, T) axes: (N, C, F, T) -> (N, C).

    The gradient routes to the first maximal entry in row-major order, which
    keeps repeated runs deterministic when values tie.
    """
    if x.ndim != 4:
        raise ValueError(f"global_max_pool expects a rank-4 input, got {x.shape}")
    n, c, f, t = x.shape
    flat = x.data.reshape(n, c, f * t)
    idx = flat.argmax(axis=2)
    out = Tensor(np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0])
    if _tracing(x):
        def bwd():
            if out.grad is None:
                return
            dflat = np.zeros((n, c, f * t))
            np.put_along_axis(dflat, idx[:, :, None], out.grad[:, :, None], axis=2)
            _accumulate(x, dflat.reshape(x.shape))
        _record(out, bwd)
    return out
