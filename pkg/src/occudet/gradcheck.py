"""Finite-difference verification of the analytic gradients.

Central differences (h=1e-4, double precision) are compared against the
tape's gradients, per parameter. Errors are relative with a small-denominator
floor: coordinates whose gradients are below the floor are effectively held
to an absolute bar of tol * floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import OccupancyNet
from .tensor import Tape, Tensor
from .train import nll_loss_from_logits, one_hot

DEFAULT_H = 1e-4
DEFAULT_TOL = 1e-4
_DENOM_FLOOR = 1e-3


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), _DENOM_FLOOR)
    return abs(analytic - numeric) / denom


def central_difference(f, arr: np.ndarray, index, h: float = DEFAULT_H) -> float:
    """Symmetric difference quotient of f along one coordinate of arr."""
    original = arr[index]
    arr[index] = original + h
    hi = f()
    arr[index] = original - h
    lo = f()
    arr[index] = original
    return (hi - lo) / (2.0 * h)


def numeric_gradient(f, arr: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """Full finite-difference gradient of f with respect to arr."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        grad[it.multi_index] = central_difference(f, arr, it.multi_index, h)
        it.iternext()
    return grad


def parameter_block(name: str) -> str:
    """Map a parameter name onto its architectural block."""
    if name.endswith(".gain"):
        return "gain"
    if name.startswith("fcn."):
        return "fcn"
    for key, block in (("pa.se.", "se"), ("pa.va.", "va"), ("pa.ta.", "ta")):
        if name.startswith(key):
            return block
    if name.startswith("head."):
        return "head"
    return "other"


@dataclass
class ParamCheck:
    name: str
    block: str
    checked: int
    max_rel_err: float
    passed: bool


def check_model_gradients(seed: int = 0, batch_size: int = 2,
                          coords_per_param: int = 8, h: float = DEFAULT_H,
                          tol: float = DEFAULT_TOL,
                          net: OccupancyNet | None = None) -> list[ParamCheck]:
    """End-to-end gradient check of every registered parameter.

    Runs the training-mode forward with stateful updates suppressed, so the
    loss is a fixed differentiable function of the parameters. The attention
    gains are moved off their zero init beforehand; otherwise the gradients
    through the attention convolutions would vanish identically and the check
    would not exercise those paths.
    """
    rng = np.random.default_rng(seed)
    if net is None:
        net = OccupancyNet(seed=seed)
        for name in ("pa.va.gain", "pa.ta.gain"):
            net.store.params[name].data[...] = rng.uniform(0.3, 0.7)

    x = rng.uniform(0.0, 1.0, size=(batch_size, 1, 3, 60))
    labels = np.arange(batch_size) % net.n_classes
    targets = one_hot(labels, net.n_classes)

    def loss_value() -> float:
        logits = net.logits(Tensor(x), train=True, update_stats=False)
        return nll_loss_from_logits(logits, targets).item()

    net.store.zero_grad()
    with Tape():
        logits = net.logits(Tensor(x), train=True, update_stats=False)
        loss = nll_loss_from_logits(logits, targets)
    loss.backward()

    reports = []
    for name, param in net.store.params.items():
        analytic = param.grad
        size = param.data.size
        if size <= coords_per_param:
            flat_coords = np.arange(size)
        else:
            flat_coords = rng.choice(size, size=coords_per_param, replace=False)
        worst = 0.0
        flat_view = param.data.reshape(-1)
        flat_grad = analytic.reshape(-1)
        for c in flat_coords:
            numeric = central_difference(loss_value, flat_view, int(c), h)
            worst = max(worst, relative_error(float(flat_grad[c]), numeric))
        reports.append(ParamCheck(name, parameter_block(name),
                                  len(flat_coords), worst, worst < tol))
    return reports


def block_summary(reports: list[ParamCheck]) -> dict[str, float]:
    """Worst relative error per architectural block."""
    worst: dict[str, float] = {}
    for r in reports:
        worst[r.block] = max(worst.get(r.block, 0.0), r.max_rel_err)
    return worst


def format_report(reports: list[ParamCheck], tol: float = DEFAULT_TOL) -> str:
    lines = []
    name_w = max(len(r.name) for r in reports)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<{name_w}}  block={r.block:<5}"
                     f"  coords={r.checked:<3d}  max_rel_err={r.max_rel_err:.3e}")
    lines.append("")
    for block, err in sorted(block_summary(reports).items()):
        status = "PASS" if err < tol else "FAIL"
        lines.append(f"{status}  [{block}]  max_rel_err={err:.3e}")
    return "\n".join(lines)
