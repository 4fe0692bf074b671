"""Model blocks for the occupancy classifier.

The network is a stack of three conv/batchnorm/ReLU blocks, a parallel
attention stage (channel gates, feature-axis attention, time-axis attention),
and a spectral-normalized linear head over globally max-pooled features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS_SPECTRAL = 1e-12


class ParamStore:
    """Named trainable tensors plus non-trainable buffers.

    Every parameter is registered exactly once; duplicate names are rejected.
    Buffers hold state that training mutates outside the tape (batchnorm
    running statistics, the power-iteration vector).
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} registered twice")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._buffers:
            raise ValueError(f"buffer {name!r} registered twice")
        arr = np.asarray(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    @property
    def params(self) -> dict[str, Tensor]:
        return self._params

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return self._buffers

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict:
        return {
            "params": {k: t.data.copy() for k, t in self._params.items()},
            "buffers": {k: v.copy() for k, v in self._buffers.items()},
        }

    def restore(self, snap: dict) -> None:
        for k, arr in snap["params"].items():
            self._params[k].data[...] = arr
        for k, arr in snap["buffers"].items():
            self._buffers[k][...] = arr


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    def __init__(self, store, name, cin, cout, kernel, stride=(1, 1),
                 padding=(0, 0), bias=True, rng=None):
        kf, kt = kernel
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.weight = store.add_param(
            f"{name}.weight", _uniform_fan_in(rng, (cout, cin, kf, kt), cin * kf * kt))
        self.bias = store.add_param(f"{name}.bias", np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d:
    def __init__(self, store, name, channels, momentum=0.1, eps=1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = store.add_param(f"{name}.gamma", np.ones(channels))
        self.beta = store.add_param(f"{name}.beta", np.zeros(channels))
        self.running_mean = store.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = store.add_buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, train, self.momentum, self.eps,
                            update_running=update_stats)


class Linear:
    def __init__(self, store, name, din, dout, bias=True, rng=None):
        self.weight = store.add_param(f"{name}.weight", _uniform_fan_in(rng, (din, dout), din))
        self.bias = store.add_param(f"{name}.bias", np.zeros(dout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


@dataclass(frozen=True)
class ConvBlockSpec:
    filters: int
    kernel: tuple[int, int]
    padding: tuple[int, int]
    stride: tuple[int, int]

    def output_extents(self, f: int, t: int) -> tuple[int, int]:
        kf, kt = self.kernel
        pf, pt = self.padding
        sf, st = self.stride
        return (f + 2 * pf - kf) // sf + 1, (t + 2 * pt - kt) // st + 1


@dataclass(frozen=True)
class FcnConfig:
    """Conv hyperparameters of the three feature-extractor blocks."""

    blocks: tuple[ConvBlockSpec, ...] = (
        ConvBlockSpec(128, (8, 8), (3, 3), (4, 4)),
        ConvBlockSpec(256, (5, 5), (2, 2), (2, 2)),
        ConvBlockSpec(128, (3, 3), (1, 1), (1, 1)),
    )

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].filters


@dataclass(frozen=True)
class PaConfig:
    """Channel bottleneck ratios of the attention stage."""

    reduction_ratio: int = 16
    query_divisor: int = 8
    value_divisor: int = 2

    def validate(self, channels: int) -> None:
        for label, d in (("reduction ratio", self.reduction_ratio),
                         ("query divisor", self.query_divisor),
                         ("value divisor", self.value_divisor)):
            if channels % d != 0:
                raise ValueError(
                    f"channel count {channels} not divisible by {label} {d}")


class FcnExtractor:
    """Three chained conv -> batchnorm -> ReLU blocks."""

    def __init__(self, store, config: FcnConfig, in_channels=1, rng=None):
        self.config = config
        self.convs = []
        self.norms = []
        cin = in_channels
        for i, spec in enumerate(config.blocks, start=1):
            self.convs.append(Conv2d(store, f"fcn.b{i}.conv", cin, spec.filters,
                                     spec.kernel, spec.stride, spec.padding, rng=rng))
            self.norms.append(BatchNorm2d(store, f"fcn.b{i}.bn", spec.filters))
            cin = spec.filters

    def __call__(self, x: Tensor, train: bool, update_stats=True, trace=None) -> Tensor:
        h = x
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms), start=1):
            h = T.relu(norm(conv(h), train, update_stats))
            if trace is not None:
                trace[f"fcn.b{i}"] = h.data
        return h

    def output_extents(self, f: int, t: int) -> list[tuple[int, int]]:
        """Spatial extents after each block, from the closed-form arithmetic."""
        extents = []
        for spec in self.config.blocks:
            f, t = spec.output_extents(f, t)
            extents.append((f, t))
        return extents


class SqueezeExcite:
    """Per-channel sigmoid gates from globally averaged channel statistics."""

    def __init__(self, store, name, channels, reduction, rng=None):
        self.reduce = Linear(store, f"{name}.w1", channels, channels // reduction,
                             bias=False, rng=rng)
        self.expand = Linear(store, f"{name}.w2", channels // reduction, channels,
                             bias=False, rng=rng)

    def gates(self, h: Tensor) -> Tensor:
        squeezed = T.global_avg_pool(h)
        return T.sigmoid(self.expand(T.relu(self.reduce(squeezed))))

    def __call__(self, h: Tensor, trace=None) -> Tensor:
        g = self.gates(h)
        if trace is not None:
            trace["se.gates"] = g.data
        n, c = g.shape
        return T.reshape(g, (n, c, 1, 1))


class AxisAttention:
    """Self-attention over one spatial axis of a (N, C, F, T) feature map.

    axis="feature" attends across the F rows independently per time step;
    axis="time" attends across the T columns independently per feature row.
    Query/key/value come from channel-reducing 1x1 convolutions, the attended
    values are projected back to C channels, and a learnable gain (initially
    zero) scales the whole branch.
    """

    _PERMS = {
        # (query, key, value, back): axis orders applied before/after matmul
        "feature": ((0, 3, 2, 1), (0, 3, 1, 2), (0, 3, 2, 1), (0, 3, 2, 1)),
        "time": ((0, 2, 3, 1), (0, 2, 1, 3), (0, 2, 3, 1), (0, 3, 1, 2)),
    }

    def __init__(self, store, name, channels, config: PaConfig, axis, rng=None):
        if axis not in self._PERMS:
            raise ValueError(f"unknown attention axis {axis!r}")
        self.axis = axis
        self.name = name
        c1 = channels // config.query_divisor
        c2 = channels // config.value_divisor
        self.query = Conv2d(store, f"{name}.query", channels, c1, (1, 1), bias=False, rng=rng)
        self.key = Conv2d(store, f"{name}.key", channels, c1, (1, 1), bias=False, rng=rng)
        self.value = Conv2d(store, f"{name}.value", channels, c2, (1, 1), bias=False, rng=rng)
        self.out = Conv2d(store, f"{name}.out", c2, channels, (1, 1), bias=False, rng=rng)
        self.gain = store.add_param(f"{name}.gain", np.zeros(()))

    def __call__(self, h: Tensor, trace=None) -> Tensor:
        perm_q, perm_k, perm_v, perm_back = self._PERMS[self.axis]
        q = T.permute(self.query(h), perm_q)
        k = T.permute(self.key(h), perm_k)
        v = T.permute(self.value(h), perm_v)
        weights = T.softmax(T.matmul(T.tanh(q), T.tanh(k)))
        attended = T.matmul(weights, v)
        projected = self.out(T.permute(attended, perm_back))
        if trace is not None:
            trace[f"{self.name}.weights"] = weights.data
        return T.mul(self.gain, projected)

    def attention_weights(self, h: np.ndarray) -> np.ndarray:
        """Attention maps for a raw feature array, outside any tape."""
        trace: dict = {}
        self(Tensor(h), trace=trace)
        return trace[f"{self.name}.weights"]


class ParallelAttention:
    """Combine channel gates with both axis-attention branches.

    The two attention branches are added to the identity path and the sum is
    scaled by the per-channel gates. With both gains at zero this reduces to
    gating alone.
    """

    def __init__(self, store, channels, config: PaConfig, rng=None):
        config.validate(channels)
        self.se = SqueezeExcite(store, "pa.se", channels, config.reduction_ratio, rng=rng)
        self.feature_attn = AxisAttention(store, "pa.va", channels, config, "feature", rng=rng)
        self.time_attn = AxisAttention(store, "pa.ta", channels, config, "time", rng=rng)

    def __call__(self, h: Tensor, trace=None) -> Tensor:
        gates = self.se(h, trace=trace)
        o_time = self.time_attn(h, trace=trace)
        o_feat = self.feature_attn(h, trace=trace)
        return T.mul(T.add(T.add(h, o_time), o_feat), gates)


def spectral_normalize(weight: np.ndarray, u: np.ndarray, iters: int = 1,
                       eps: float = EPS_SPECTRAL):
    """Scale a matrix by its power-iteration estimate of the top singular value.

    Returns (weight / sigma, updated u, sigma). One iteration maps
    v <- normalize(W^T u), u <- normalize(W v), sigma = u^T W v. Degenerate
    norms are guarded by eps.
    """
    w = np.asarray(weight, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64).copy()
    if np.linalg.norm(u) <= eps:
        raise ValueError("power-iteration vector u must be non-zero")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    sigma = eps
    for _ in range(iters):
        v = w.T @ u
        v = v / (np.linalg.norm(v) + eps)
        wv = w @ v
        sigma = np.linalg.norm(wv)
        u = wv / (sigma + eps)
    return w / (sigma + eps), u, float(sigma)


class SpectralLinear:
    """Linear head whose weight is divided by its estimated top singular value.

    The singular value estimate reuses the persisted power-iteration vector:
    sigma = ||W normalize(W^T u)||, differentiated with u held constant. A
    training forward refreshes u once; eval passes leave it untouched.
    """

    def __init__(self, store, name, din, dout, rng=None):
        self.weight = store.add_param(f"{name}.weight", _uniform_fan_in(rng, (din, dout), din))
        self.bias = store.add_param(f"{name}.bias", np.zeros(dout))
        u = rng.normal(size=din)
        self.u = store.add_buffer(f"{name}.u", u / np.linalg.norm(u))

    def normalized_weight(self, update_u: bool) -> Tensor:
        din, dout = self.weight.shape
        u_const = Tensor(self.u.copy())
        v_raw = T.matmul(T.reshape(u_const, (1, din)), self.weight)
        v = T.div(v_raw, T.sqrt(T.tsum(T.mul(v_raw, v_raw))) + EPS_SPECTRAL)
        wv = T.matmul(self.weight, T.reshape(v, (dout, 1)))
        sigma = T.sqrt(T.tsum(T.mul(wv, wv)))
        if update_u:
            flat = wv.data.ravel()
            self.u[...] = flat / (np.linalg.norm(flat) + EPS_SPECTRAL)
        return T.div(self.weight, sigma + EPS_SPECTRAL)

    def __call__(self, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        w_sn = self.normalized_weight(update_u=train and update_stats)
        return T.linear(x, w_sn, self.bias)


class OccupancyNet:
    """Feature extractor, parallel attention, and spectral-normalized head."""

    MODEL_ID = "occudet"

    def __init__(self, fcn_config: FcnConfig | None = None,
                 pa_config: PaConfig | None = None,
                 in_channels: int = 1, n_classes: int = 2, seed: int = 0):
        self.fcn_config = fcn_config or FcnConfig()
        self.pa_config = pa_config or PaConfig()
        self.n_classes = n_classes
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        self.extractor = FcnExtractor(self.store, self.fcn_config, in_channels, rng=rng)
        channels = self.fcn_config.out_channels
        self.attention = ParallelAttention(self.store, channels, self.pa_config, rng=rng)
        self.head = SpectralLinear(self.store, "head.fc", channels, n_classes, rng=rng)

    def features(self, x, train: bool = False, update_stats: bool | None = None,
                 trace=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if update_stats is None:
            update_stats = train
        return self.extractor(x, train, update_stats, trace=trace)

    def classify(self, attended: Tensor, train: bool = False,
                 update_stats: bool | None = None, trace=None) -> Tensor:
        """Probabilities from an attended feature map."""
        if update_stats is None:
            update_stats = train
        logits = self.head(T.global_max_pool(attended), train, update_stats)
        if trace is not None:
            trace["logits"] = logits.data
        return T.softmax(logits)

    def logits(self, x, train: bool = False, update_stats: bool | None = None,
               trace=None) -> Tensor:
        if update_stats is None:
            update_stats = train
        h = self.features(x, train, update_stats, trace=trace)
        m = self.attention(h, trace=trace)
        if trace is not None:
            trace["attended"] = m.data
        return self.head(T.global_max_pool(m), train, update_stats)

    def forward(self, x, train: bool = False, update_stats: bool | None = None,
                trace=None) -> Tensor:
        logits = self.logits(x, train, update_stats, trace=trace)
        if trace is not None:
            trace["logits"] = logits.data
        return T.softmax(logits)

    __call__ = forward

    def shape_chain(self, n: int, f: int = 3, t: int = 60) -> list[tuple]:
        """Expected shapes from input through the head, by conv arithmetic."""
        shapes = [(n, 1, f, t)]
        ef, et = f, t
        for spec in self.fcn_config.blocks:
            ef, et = spec.output_extents(ef, et)
            shapes.append((n, spec.filters, ef, et))
        shapes.append((n, self.n_classes))
        return shapes
