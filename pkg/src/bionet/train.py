"""Adam training loop with reciprocal learning-rate decay, evaluation and prediction."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint, metrics, ops
from .augment import AugmentConfig, augment
from .data import Manifest, Sample
from .errors import ConfigError, DataError, DivergenceError, StateError
from .graph import BioNet
from .seeding import substream
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

LOSSES = ("cross_entropy", "mse")


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.01
    decay: float = 3e-5
    batch_size: int = 2
    epochs: int = 300
    seed: int = 0
    loss: str = "cross_entropy"
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be positive (got {self.initial_lr})")
        if self.decay < 0:
            raise ConfigError(f"decay must be >= 0 (got {self.decay})")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0 (got {self.epochs})")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES} (got {self.loss!r})")
        return self


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for the update taken after ``step`` previous updates."""
    return cfg.initial_lr / (1.0 + cfg.decay * step)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every tensor in ``params``, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise StateError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise StateError(f"Adam moments for {name} have shape {m.shape}, parameter has {p.shape}")
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(np.float32)


# --------------------------------------------------------------------------
# batching and prediction


def _samples(data: Manifest | Sequence[Sample]) -> list[Sample]:
    return data.load_samples() if isinstance(data, Manifest) else list(data)


def _stack(batch: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in batch]), np.stack([s.target for s in batch])


def foreground_probability(logits: np.ndarray) -> np.ndarray:
    """``(N, H, W)`` foreground probability from segmentation logits."""
    z = logits.astype(np.float64)
    if z.shape[1] == 1:
        return 1.0 / (1.0 + np.exp(-z[:, 0]))
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return (1.0 - p[:, 0] / p.sum(axis=1))


def logits_to_mask(logits: np.ndarray) -> np.ndarray:
    """Binary foreground mask: probability > 0.5 (argmax for more than 2 classes)."""
    if logits.shape[1] > 2:
        return (logits.argmax(axis=1) > 0).astype(np.int64)
    return (foreground_probability(logits) > 0.5).astype(np.int64)


def predict(net: BioNet, images: np.ndarray, batch_size: int = 2) -> np.ndarray:
    """Eval-phase network outputs for ``(N, C, H, W)`` images."""
    outs = []
    for i in range(0, len(images), batch_size):
        y, _ = net.forward(Tensor(images[i:i + batch_size]), phase="eval")
        outs.append(y.data)
    return np.concatenate(outs) if outs else np.zeros((0,))


def _check_task(net: BioNet, loss: str) -> None:
    head = net.config.head
    if (loss == "cross_entropy") != (head == "segmentation"):
        raise ConfigError(f"loss {loss!r} does not match a {head!r} head")


def _loss(y: Tensor, target: np.ndarray, kind: str) -> Tensor:
    if kind == "cross_entropy":
        return ops.softmax_cross_entropy(y, target)
    return ops.mse(y, Tensor(target))


# --------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    metrics: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_text(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)


def _conv_registry(net: BioNet) -> dict[str, tuple[int, ...]]:
    return {name: p.shape for name, p in net.parameters().items()}


def train(
    net: BioNet,
    data: Manifest | Sequence[Sample],
    cfg: TrainConfig,
    aug: AugmentConfig | None = None,
    out_dir: str | os.PathLike | None = None,
) -> TrainLog:
    """Optimize ``net`` on ``data``; deterministic for a fixed ``cfg.seed``.

    With ``out_dir`` set, ``train_log.jsonl`` receives one record per epoch
    and ``checkpoint.ckpt`` the final weights (plus ``epochNNNN.ckpt`` every
    ``cfg.checkpoint_every`` epochs).
    """
    cfg.validate()
    _check_task(net, cfg.loss)
    samples = _samples(data)
    if not samples:
        raise DataError("cannot train on an empty dataset")
    order_rng = substream(cfg.seed, "data")
    aug_rng = substream(cfg.seed, "augment")
    params = net.parameters()
    registry = _conv_registry(net)
    state = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w", encoding="utf-8")
    history = TrainLog()
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = order_rng.permutation(len(samples))
            losses, dices = [], []
            lr = lr_at(state.step, cfg)
            for start in range(0, len(order), cfg.batch_size):
                batch = [samples[j] for j in order[start:start + cfg.batch_size]]
                if aug is not None:
                    batch = [augment(s, aug, aug_rng) for s in batch]
                x, target = _stack(batch)
                y, tape = net.forward(Tensor(x), phase="train")
                with tape:
                    loss = _loss(y, target, cfg.loss)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(epoch, state.step + 1, value)
                net.zero_grad()
                backward(tape, loss)
                lr = lr_at(state.step, cfg)
                adam_step(params, {n: p.grad for n, p in params.items()}, state, lr)
                losses.append(value)
                if cfg.loss == "cross_entropy":
                    pred = logits_to_mask(y.data)
                    dices.extend(metrics.dice(p, t) for p, t in zip(pred, target))
            if _conv_registry(net) != registry:
                raise StateError("parameter registry changed during training")
            scores = {"dice": float(np.mean(dices))} if dices else {}
            rec = EpochRecord(epoch, state.step, lr, float(np.mean(losses)), scores)
            history.records.append(rec)
            log.debug("epoch %d loss %.5f %s", epoch, rec.loss, scores)
            if log_fh is not None:
                log_fh.write(rec.to_json() + "\n")
                log_fh.flush()
                if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                    checkpoint.save(net, out / f"epoch{epoch:04d}.ckpt")
        if out is not None:
            checkpoint.save(net, out / "checkpoint.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    return history


def evaluate(
    net: BioNet,
    data: Manifest | Sequence[Sample],
    metric_names: Sequence[str] = ("dice", "iou"),
    batch_size: int = 2,
) -> metrics.MetricReport:
    """Eval-phase metrics per sample plus their means."""
    report = metrics.MetricReport()
    if not metric_names:
        return report
    for name in metric_names:
        if name not in metrics.METRICS:
            raise ConfigError(f"unknown metric {name!r}; choose from {metrics.METRICS}")
    samples = _samples(data)
    seg = net.config.head == "segmentation"
    if not seg and set(metric_names) - {"psnr"}:
        raise ConfigError("regression heads support only the psnr metric")
    for i in range(0, len(samples), batch_size):
        batch = samples[i:i + batch_size]
        x, target = _stack(batch)
        y = predict(net, x, batch_size)
        masks = logits_to_mask(y) if seg else None
        cont = foreground_probability(y) if seg else np.clip(y, 0.0, 1.0)
        for j, s in enumerate(batch):
            scores = {}
            for name in metric_names:
                if name == "psnr":
                    scores[name] = metrics.psnr(cont[j], target[j])
                else:
                    scores[name] = metrics.score(name, masks[j], target[j])
            report.add(s.id, scores)
    return report
