"""Segmentation and reconstruction metrics: DICE, IoU, Rand F-score, PSNR."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeError

METRICS = ("dice", "iou", "psnr", "rand_f")
PSNR_INF = math.inf


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(pred, gt) -> float:
    """``2|A & B| / (|A| + |B|)``; 1.0 when both masks are empty."""
    a, b = _binary_pair(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2 * int(np.logical_and(a, b).sum()) / total


def iou(pred, gt) -> float:
    """``|A & B| / |A | B|``; 1.0 when both masks are empty."""
    a, b = _binary_pair(pred, gt)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def psnr(pred, gt, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"image shapes differ: {p.shape} vs {g.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    err = float(np.mean((p - g) ** 2))
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / err)


_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def label_components(mask) -> np.ndarray:
    """4-connected component labels; background stays 0."""
    m = np.asarray(mask).astype(bool)
    labels, _ = ndimage.label(m, _FOUR_CONNECTED if m.ndim == 2 else None)
    return labels


def _pairs(counts: np.ndarray) -> int:
    counts = counts.astype(np.int64)
    return int((counts * (counts - 1) // 2).sum())


def rand_f_score(pred, gt) -> float:
    """Pair-counting Rand F-score between component labelings.

    Both masks are split into 4-connected components. Only pixels in the
    ground-truth foreground are scored; a pixel that is background in the
    prediction belongs to no predicted segment. Over unordered pixel pairs,
    precision is the fraction of pairs sharing a predicted segment that also
    share a ground-truth segment, recall the converse, and the score their
    harmonic mean. An empty pair set counts as perfect on that side.
    """
    a, b = _binary_pair(pred, gt)
    if not b.any():
        raise DataError("rand_f_score needs a non-empty ground-truth foreground")
    lp = label_components(a)[b]
    lg = label_components(b)[b]
    # pred background pixels are singletons: drop them from the pred-side counts
    fg = lp > 0
    # contingency of (pred label, gt label) through one combined code
    joint = np.bincount(lp[fg] * (int(lg.max()) + 1) + lg[fg])
    both = _pairs(joint)
    in_pred = _pairs(np.bincount(lp[fg]))
    in_gt = _pairs(np.bincount(lg))
    return _f_from_pairs(both, in_pred, in_gt)


def _f_from_pairs(both: int, in_pred: int, in_gt: int) -> float:
    if in_pred == 0 and in_gt == 0:
        return 1.0
    if in_pred == 0 or in_gt == 0:
        # one side vacuous (precision or recall = 1), the other has no agreeing pairs
        return 0.0
    # 2PR / (P + R) with P = both/in_pred, R = both/in_gt
    return 2 * both / (in_pred + in_gt)


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Per-sample values and their arithmetic means for each requested metric."""

    ids: list[str] = field(default_factory=list)
    values: dict[str, list[float]] = field(default_factory=dict)

    def add(self, sample_id: str, scores: dict[str, float]) -> None:
        self.ids.append(sample_id)
        for name, v in scores.items():
            self.values.setdefault(name, []).append(float(v))

    @property
    def means(self) -> dict[str, float]:
        return {name: float(np.mean(v)) for name, v in self.values.items()}

    def __getitem__(self, metric: str) -> float:
        return self.means[metric]

    def to_lines(self) -> str:
        """Line-delimited text: one ``id<TAB>metric<TAB>value`` line per sample, then means."""
        out = []
        for i, sid in enumerate(self.ids):
            for name, vals in self.values.items():
                out.append(f"{sid}\t{name}\t{vals[i]!r}")
        for name, v in self.means.items():
            out.append(f"mean\t{name}\t{v!r}")
        return "\n".join(out) + ("\n" if out else "")

    def to_kv(self) -> str:
        """``key = value`` file with the means and sample count."""
        lines = [f"samples = {len(self.ids)}"]
        lines += [f"{name} = {v!r}" for name, v in self.means.items()]
        return "\n".join(lines) + "\n"


def score(name: str, pred, gt) -> float:
    if name == "dice":
        return dice(pred, gt)
    if name == "iou":
        return iou(pred, gt)
    if name == "rand_f":
        return rand_f_score(pred, gt)
    if name == "psnr":
        return psnr(pred, gt)
    raise KeyError(f"unknown metric {name!r}; choose from {METRICS}")
