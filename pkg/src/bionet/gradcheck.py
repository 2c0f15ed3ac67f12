"""Central finite-difference gradient checking.

The scalar probed is ``sum(R * f(...))`` for a fixed random ``R`` (or ``f``
itself when it already returns a scalar), accumulated in float64 so the
difference quotient is not swamped by float32 rounding of the reduction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ops import _apply
from .tensor import Tape, Tensor, backward, register_kernel

__all__ = [
    "numeric_grads",
    "analytic_grads",
    "relative_error",
    "check_gradients",
    "GradReport",
    "gradient_report",
]


def _probe(out: Tensor, weights: np.ndarray | None) -> float:
    data = out.data.astype(np.float64)
    if weights is None:
        return float(data.sum())
    return float((data * weights).sum())


def _pattern(fn: Callable[[], Tensor]) -> tuple[Tensor, list[np.ndarray]]:
    """Run ``fn`` and collect its piecewise-linear switches: ReLU signs and
    max-pool argmax routing."""
    with Tape() as tape:
        out = fn()
    switches = []
    for node in tape.nodes:
        if node.kind == "relu":
            switches.append(node.inputs[0].data > 0)
        elif node.kind == "maxpool2d":
            switches.append(node.saved["indices"])
    return out, switches


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grads(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    weights: np.ndarray | None = None,
    step: float = 1e-3,
    skip_kinks: bool = False,
) -> list[np.ndarray]:
    """Central differences of the probe w.r.t. every element of ``tensors``.

    With ``skip_kinks`` a coordinate whose +/- step flips any ReLU sign or
    max-pool route is returned as NaN: the function is not differentiable
    on that interval, so the quotient does not estimate the derivative.
    """
    base = _pattern(fn)[1] if skip_kinks else None

    def evaluate() -> tuple[float, bool]:
        if not skip_kinks:
            return _probe(fn(), weights), True
        out, switches = _pattern(fn)
        return _probe(out, weights), _same(switches, base)

    grads = []
    for t in tensors:
        g = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi = orig + np.float32(step)
            lo = orig - np.float32(step)
            flat[i] = hi
            plus, ok_hi = evaluate()
            flat[i] = lo
            minus, ok_lo = evaluate()
            flat[i] = orig
            # divide by the representable float32 step, not the nominal one
            gflat[i] = (plus - minus) / (float(hi) - float(lo)) if ok_hi and ok_lo else np.nan
        grads.append(g)
    return grads


def analytic_grads(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    weights: np.ndarray | None = None,
) -> list[np.ndarray]:
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn()
        if out.data.ndim:
            w = np.ones(out.shape) if weights is None else weights
            out = _apply("probe", (out, Tensor._wrap(w.astype(np.float64), False)), _probe_fwd)[0]
    backward(tape, out)
    return [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]


def _probe_fwd(x, w):
    return np.asarray((x.astype(np.float64) * w).sum()), {}


def _probe_bwd(node, g):
    x, w = (t.data for t in node.inputs)
    return (w * g).astype(x.dtype), None


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish.

    NaN entries of ``numeric`` (skipped kinks) are left out of both norms.
    """
    keep = ~np.isnan(numeric)
    a, n = analytic[keep], numeric[keep]
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


@dataclass
class GradReport:
    """Outcome of one gradient check.

    ``per_tensor`` holds each tensor's norm-wise relative error; ``overall``
    is the same measure over all checked coordinates at once, so tensors
    with vanishing gradients weigh in by their absolute error only.
    """

    per_tensor: list[float]
    overall: float
    checked: int
    skipped: int

    @property
    def max_error(self) -> float:
        return max(self.per_tensor, default=0.0)


def gradient_report(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-3,
    seed: int = 20_771,
    skip_kinks: bool = False,
) -> GradReport:
    """Compare analytic and central-difference gradients of ``fn``."""
    out = fn()
    weights = None
    if out.data.ndim:
        weights = np.random.default_rng(seed).standard_normal(out.shape)
    ana = analytic_grads(fn, tensors, weights)
    num = numeric_grads(fn, tensors, weights, step, skip_kinks)
    a_all = np.concatenate([a.reshape(-1) for a in ana])
    n_all = np.concatenate([n.reshape(-1) for n in num])
    skipped = int(np.isnan(n_all).sum())
    return GradReport(
        per_tensor=[relative_error(a, n) for a, n in zip(ana, num)],
        overall=relative_error(a_all, n_all),
        checked=n_all.size - skipped,
        skipped=skipped,
    )


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-3,
    seed: int = 20_771,
) -> float:
    """Max over ``tensors`` of the relative error between analytic and numeric gradients."""
    return gradient_report(fn, tensors, step, seed).max_error


register_kernel("probe", _probe_fwd, _probe_bwd)
