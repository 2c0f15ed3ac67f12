"""O-shaped recurrent encoder-decoder network.

Layout for depth ``l`` (level 1 is the full-resolution level)::

    first stage (3 CONV, once)
      for i in 1..t:
        encoder k = 1..l : fuse(f_dec[k] from i-1, x_in) -> CONV x cpb -> f_enc[k] -> maxpool
        middle           : CONV x 2 at the deepest width
        decoder k = l..1 : UP -> fuse(f_enc[k], up) -> CONV x cpb -> f_dec[k]
        x_in of level 1 for i+1 := f_dec[1]
    last stage (3 CONV on f_dec[1], or on all t f_dec[1] stacked with INT) -> 1x1 head

Convolution weights are shared by every iteration; each recursed CONV owns
one batch-norm parameter set per iteration. At ``i = 1`` the backward inputs
are zero tensors of the planned widths.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .ops import RunningStats
from .seeding import substream
from .tensor import Tape, Tensor, current_tape

FUSIONS = ("concat", "add")
HEADS = ("segmentation", "regression")
ORDERS = ("conv_relu_bn", "conv_bn_relu")
FIRST_STAGE_CONVS = 3
LAST_STAGE_CONVS = 3
MIDDLE_CONVS = 2


@dataclass(frozen=True)
class BioNetConfig:
    """Declarative description of one network.

    ``w`` counts backward-connected levels from the deepest one; ``None``
    means every level (``w = l``).
    """

    t: int = 3
    mult: float = 1.0
    w: int | None = None
    int_stack: bool = False
    l: int = 4
    fusion: str = "concat"
    base_channels: int = 32
    in_channels: int = 3
    out_channels: int = 1
    convs_per_block: int = 2
    head: str = "segmentation"
    block_order: str = "conv_relu_bn"

    @property
    def backward_levels(self) -> int:
        return self.l if self.w is None else self.w

    def validate(self) -> "BioNetConfig":
        def need(cond: bool, name: str, msg: str) -> None:
            if not cond:
                raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})")

        need(isinstance(self.t, int) and self.t >= 1, "t", "recurrence count must be an integer >= 1")
        need(isinstance(self.l, int) and self.l >= 1, "l", "encoding depth must be an integer >= 1")
        need(self.mult > 0, "mult", "channel multiplier must be positive")
        if self.w is not None:
            need(isinstance(self.w, int) and 0 <= self.w <= self.l, "w", f"must satisfy 0 <= w <= l={self.l}")
        need(self.fusion in FUSIONS, "fusion", f"must be one of {FUSIONS}")
        need(self.head in HEADS, "head", f"must be one of {HEADS}")
        need(self.block_order in ORDERS, "block_order", f"must be one of {ORDERS}")
        need(self.base_channels >= 1, "base_channels", "must be a positive integer")
        need(self.in_channels >= 1, "in_channels", "must be a positive integer")
        need(self.out_channels >= 1, "out_channels", "must be a positive integer")
        need(self.convs_per_block >= 1, "convs_per_block", "must be a positive integer")
        return self

    def replace(self, **changes) -> "BioNetConfig":
        return BioNetConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


def _width(mult: float, base: int, exponent: int) -> int:
    return max(1, int(math.floor(mult * base * 2**exponent + 0.5)))


@dataclass(frozen=True)
class ChannelPlan:
    """Channel widths of every level (index 0 is level 1).

    Encoder level k maps ``enc_in[k] (+ back[k])`` to ``enc[k]``; decoder level
    k upsamples to ``up[k]``, fuses with ``enc[k]`` and maps to ``dec[k]``,
    which equals ``enc_in[k]`` so decoded features can re-enter the encoder.
    """

    first: int
    enc_in: tuple[int, ...]
    back: tuple[int, ...]
    enc: tuple[int, ...]
    middle: int
    up: tuple[int, ...]
    dec: tuple[int, ...]
    last_in: int
    fusion: str

    @property
    def depth(self) -> int:
        return len(self.enc)

    def connected(self, k: int) -> bool:
        return self.back[k] > 0

    def enc_conv_in(self, k: int) -> int:
        if self.fusion == "concat":
            return self.back[k] + self.enc_in[k]
        return self.enc_in[k]

    def dec_conv_in(self, k: int) -> int:
        if self.fusion == "concat":
            return self.enc[k] + self.up[k]
        return self.up[k]


def plan_channels(cfg: BioNetConfig) -> ChannelPlan:
    cfg.validate()
    first = _width(cfg.mult, cfg.base_channels, 0)
    enc = tuple(_width(cfg.mult, cfg.base_channels, k + 1) for k in range(cfg.l))
    enc_in = (first,) + enc[:-1]
    dec = enc_in
    w = cfg.backward_levels
    back = tuple(dec[k] if k >= cfg.l - w else 0 for k in range(cfg.l))
    up = dec if cfg.fusion == "concat" else enc
    last_in = first * cfg.t if cfg.int_stack else first
    plan = ChannelPlan(first, enc_in, back, enc, enc[-1], up, dec, last_in, cfg.fusion)
    _check_plan(plan)
    return plan


def _check_plan(plan: ChannelPlan) -> None:
    l = plan.depth
    if plan.dec[0] != plan.first:
        raise ConfigError(f"top decoder width {plan.dec[0]} cannot re-enter the encoder ({plan.first})")
    for k in range(l):
        below = plan.middle if k == l - 1 else plan.dec[k + 1]
        if below < 1 or plan.up[k] < 1:
            raise ConfigError(f"level {k + 1}: empty channel width")
        if plan.fusion == "add":
            if plan.up[k] != plan.enc[k]:
                raise ConfigError(f"fusion=add: level {k + 1} decoder width {plan.up[k]} != encoder {plan.enc[k]}")
            if plan.connected(k) and plan.back[k] != plan.enc_in[k]:
                raise ConfigError(f"fusion=add: level {k + 1} backward width {plan.back[k]} != {plan.enc_in[k]}")


# --------------------------------------------------------------------------
# blocks


@dataclass(eq=False)
class Conv:
    weight: Tensor
    bias: Tensor
    transposed: bool = False

    @property
    def params(self) -> int:
        return self.weight.size + self.bias.size

    def __call__(self, x: Tensor) -> Tensor:
        if self.transposed:
            return ops.conv_transpose2d(x, self.weight, self.bias, stride=2)
        return ops.conv2d(x, self.weight, self.bias, stride=1, pad=self.weight.shape[2] // 2)


@dataclass(eq=False)
class Norm:
    gamma: Tensor
    beta: Tensor
    running: RunningStats
    momentum: float = ops.BN_MOMENTUM

    @property
    def params(self) -> int:
        return self.gamma.size + self.beta.size

    def __call__(self, x: Tensor, phase: str) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running, phase, momentum=self.momentum)


@dataclass(eq=False)
class ConvUnit:
    """CONV block: convolution, non-linearity and batch-norm (order configurable)."""

    name: str
    conv: Conv
    norms: list[Norm]
    order: str = "conv_relu_bn"

    @property
    def in_channels(self) -> int:
        return self.conv.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv.weight.shape[0]

    def norm_for(self, iteration: int) -> Norm:
        return self.norms[iteration if len(self.norms) > 1 else 0]

    def __call__(self, x: Tensor, iteration: int, phase: str) -> Tensor:
        y = self.conv(x)
        norm = self.norm_for(iteration)
        if self.order == "conv_relu_bn":
            return norm(ops.relu(y), phase)
        return ops.relu(norm(y, phase))


@dataclass(eq=False)
class EncoderLevel:
    level: int
    units: list[ConvUnit]
    connected: bool


@dataclass(eq=False)
class DecoderLevel:
    level: int
    up: Conv
    units: list[ConvUnit]


class _Init:
    """Glorot-uniform weights, zero biases, unit/zero norm parameters."""

    def __init__(self, seed: int):
        self.rng = substream(seed, "init")

    def conv(self, cin: int, cout: int, k: int, transposed: bool = False) -> Conv:
        fan_in, fan_out = cin * k * k, cout * k * k
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        w = self.rng.uniform(-limit, limit, size=shape).astype(np.float32)
        return Conv(Tensor(w, requires_grad=True), Tensor.zeros(cout, requires_grad=True), transposed)

    @staticmethod
    def norm(c: int) -> Norm:
        return Norm(
            Tensor(np.ones(c, np.float32), requires_grad=True),
            Tensor.zeros(c, requires_grad=True),
            RunningStats.fresh(c),
        )


# --------------------------------------------------------------------------
# network


class BioNet:
    """Built network. Use :func:`build` to construct one from a config."""

    def __init__(self, config: BioNetConfig, seed: int = 0):
        self.config = config.validate()
        self.seed = seed
        self.plan = plan_channels(config)
        init = _Init(seed)
        cfg, plan = config, self.plan

        def unit(name: str, cin: int, cout: int, recursed: bool) -> ConvUnit:
            norms = [init.norm(cout) for _ in range(cfg.t if recursed else 1)]
            return ConvUnit(name, init.conv(cin, cout, 3), norms, cfg.block_order)

        self.first = [
            unit(f"first.conv{j}", cfg.in_channels if j == 0 else plan.first, plan.first, False)
            for j in range(FIRST_STAGE_CONVS)
        ]
        self.encoders: list[EncoderLevel] = []
        for k in range(cfg.l):
            units = [
                unit(f"enc{k + 1}.conv{j}", plan.enc_conv_in(k) if j == 0 else plan.enc[k], plan.enc[k], True)
                for j in range(cfg.convs_per_block)
            ]
            self.encoders.append(EncoderLevel(k + 1, units, plan.connected(k)))
        self.middle = [
            unit(f"mid.conv{j}", plan.enc[-1] if j == 0 else plan.middle, plan.middle, True)
            for j in range(MIDDLE_CONVS)
        ]
        self.decoders: list[DecoderLevel] = [None] * cfg.l  # type: ignore[list-item]
        for k in reversed(range(cfg.l)):
            below = plan.middle if k == cfg.l - 1 else plan.dec[k + 1]
            up = init.conv(below, plan.up[k], 2, transposed=True)
            units = [
                unit(f"dec{k + 1}.conv{j}", plan.dec_conv_in(k) if j == 0 else plan.dec[k], plan.dec[k], True)
                for j in range(cfg.convs_per_block)
            ]
            self.decoders[k] = DecoderLevel(k + 1, up, units)
        self.last = [
            unit(f"last.conv{j}", plan.last_in if j == 0 else plan.first, plan.first, False)
            for j in range(LAST_STAGE_CONVS)
        ]
        self.head = init.conv(plan.first, cfg.out_channels, 1)

    # -- registry -----------------------------------------------------------

    def units(self) -> Iterator[tuple[ConvUnit, bool]]:
        """All CONV units in execution order with their "recursed" flag."""
        for u in self.first:
            yield u, False
        for enc in self.encoders:
            for u in enc.units:
                yield u, True
        for u in self.middle:
            yield u, True
        for dec in reversed(self.decoders):
            for u in dec.units:
                yield u, True
        for u in self.last:
            yield u, False

    def named_convs(self) -> Iterator[tuple[str, Conv]]:
        for u in self.first:
            yield u.name, u.conv
        for enc in self.encoders:
            for u in enc.units:
                yield u.name, u.conv
        for u in self.middle:
            yield u.name, u.conv
        for dec in reversed(self.decoders):
            yield f"dec{dec.level}.up", dec.up
            for u in dec.units:
                yield u.name, u.conv
        for u in self.last:
            yield u.name, u.conv
        yield "head", self.head

    def named_norms(self) -> Iterator[tuple[str, Norm, bool]]:
        for u, recursed in self.units():
            if recursed:
                for i, n in enumerate(u.norms, start=1):
                    yield f"{u.name}.norm{i}", n, True
            else:
                yield f"{u.name}.norm", u.norms[0], False

    def parameters(self) -> dict[str, Tensor]:
        """Every trainable tensor exactly once, in a deterministic order."""
        out: dict[str, Tensor] = {}
        for name, conv in self.named_convs():
            out[f"{name}.weight"] = conv.weight
            out[f"{name}.bias"] = conv.bias
        for name, norm, _ in self.named_norms():
            out[f"{name}.gamma"] = norm.gamma
            out[f"{name}.beta"] = norm.beta
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, norm, _ in self.named_norms():
            out[f"{name}.running_mean"] = norm.running.mean
            out[f"{name}.running_var"] = norm.running.var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        stem, _, kind = name.rpartition(".")
        for nname, norm, _ in self.named_norms():
            if nname == stem:
                if kind == "running_mean":
                    norm.running.mean = value
                else:
                    norm.running.var = value
                return
        raise KeyError(name)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    # -- execution ----------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4:
            raise ShapeError(f"input must be (N, C, H, W), got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ConfigError(f"input has {x.shape[1]} channels, network expects {self.config.in_channels}")
        step = 2**self.config.l
        if x.shape[2] % step or x.shape[3] % step:
            raise ShapeError(f"spatial size {x.shape[2]}x{x.shape[3]} is not divisible by 2^l = {step}")

    def _fuse(self, first: Tensor, second: Tensor) -> Tensor:
        if self.config.fusion == "concat":
            return ops.concat_channels(first, second)
        return ops.add(first, second)

    def run_stage(self, units: list[ConvUnit], x: Tensor, iteration: int, phase: str) -> Tensor:
        for u in units:
            x = u(x, iteration, phase)
        return x

    def iterate(
        self, x_in: Tensor, f_dec: list[Tensor | None], iteration: int, phase: str
    ) -> list[Tensor]:
        """One O-shaped pass; returns this iteration's decoder outputs per level.

        ``f_dec[k]`` is the previous iteration's level-k decoder output (or
        zeros), consumed only by backward-connected levels.
        """
        skips = []
        h = x_in
        for k, enc in enumerate(self.encoders):
            if enc.connected:
                h = self._fuse(f_dec[k], h)
            h = self.run_stage(enc.units, h, iteration, phase)
            skips.append(h)
            h, _ = ops.maxpool2d(h, 2)
        h = self.run_stage(self.middle, h, iteration, phase)
        out: list[Tensor] = [None] * len(self.decoders)  # type: ignore[list-item]
        for k in reversed(range(len(self.decoders))):
            dec = self.decoders[k]
            h = self._fuse(skips[k], dec.up(h))
            h = self.run_stage(dec.units, h, iteration, phase)
            out[k] = h
        return out

    def initial_backward(self, x: Tensor) -> list[Tensor | None]:
        n, _, hgt, wid = x.shape
        return [
            Tensor.zeros((n, self.plan.back[k], hgt >> k, wid >> k)) if self.plan.connected(k) else None
            for k in range(self.config.l)
        ]

    def forward(self, x, phase: str = "eval", tape: Tape | None = None) -> tuple[Tensor, Tape]:
        """Run the full recurrent pass; ops are recorded onto ``tape``.

        Without ``tape`` the innermost active tape is reused, or a new one
        is started.
        """
        if phase not in ("train", "eval"):
            raise ConfigError(f"phase must be 'train' or 'eval', got {phase!r}")
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        if tape is None:
            tape = current_tape()
        if tape is None:
            tape = Tape()
        with tape:
            h = self.run_stage(self.first, x, 0, phase)
            f_dec = self.initial_backward(x)
            tops = []
            for i in range(self.config.t):
                f_dec = self.iterate(h, f_dec, i, phase)
                h = f_dec[0]
                tops.append(h)
            z = ops.concat_channels(*tops) if self.config.int_stack else tops[-1]
            z = self.run_stage(self.last, z, 0, phase)
            y = self.head(z)
        return y, tape

    __call__ = forward


def build(config: BioNetConfig, seed: int = 0) -> BioNet:
    return BioNet(config, seed)


# --------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class ParamSummary:
    """Trainable parameter breakdown.

    ``norm_per_iteration`` is one iteration's worth of recursed batch-norm
    parameters; ``total = conv + norm_once + t * norm_per_iteration``.
    """

    conv: int
    norm_once: int
    norm_per_iteration: int
    t: int

    @property
    def norm(self) -> int:
        return self.norm_once + self.t * self.norm_per_iteration

    @property
    def total(self) -> int:
        return self.conv + self.norm

    @property
    def model_bytes(self) -> int:
        return 4 * self.total


def param_summary(net: BioNet) -> ParamSummary:
    conv = sum(c.params for _, c in net.named_convs())
    once = sum(n.params for _, n, recursed in net.named_norms() if not recursed)
    per_it = sum(u.norms[0].params for u, recursed in net.units() if recursed)
    summary = ParamSummary(conv, once, per_it, net.config.t)
    registry = sum(p.size for p in net.parameters().values())
    assert registry == summary.total, (registry, summary)
    return summary


def param_count(net: BioNet) -> tuple[int, int]:
    """``(trainable_params, model_bytes)`` with 4 bytes per float32 parameter."""
    s = param_summary(net)
    return s.total, s.model_bytes


def describe(net: BioNet) -> str:
    """Plain-text architecture table, one row per convolution and norm set."""
    cfg, plan = net.config, net.plan
    rows: list[tuple[str, str, str, str, str, str]] = []

    def conv_row(name: str, conv: Conv, sharing: str, note: str = "") -> None:
        w = conv.weight.shape
        cin, cout = (w[0], w[1]) if conv.transposed else (w[1], w[0])
        kind = "upconv2x2" if conv.transposed else f"conv{w[2]}x{w[3]}"
        rows.append((name, kind, str(cin), str(cout), str(conv.params), sharing + note))

    def norm_rows(u: ConvUnit, recursed: bool) -> None:
        if recursed:
            for i, n in enumerate(u.norms, start=1):
                rows.append((f"{u.name}.norm{i}", "batchnorm", str(u.out_channels), str(u.out_channels),
                             str(n.params), f"iteration {i}"))
        else:
            n = u.norms[0]
            rows.append((f"{u.name}.norm", "batchnorm", str(u.out_channels), str(u.out_channels),
                         str(n.params), "once"))

    for u in net.first:
        conv_row(u.name, u.conv, "once")
        norm_rows(u, False)
    for enc in net.encoders:
        note = "" if enc.connected else "; no backward input"
        for j, u in enumerate(enc.units):
            conv_row(u.name, u.conv, "shared", note if j == 0 else "")
            norm_rows(u, True)
    for u in net.middle:
        conv_row(u.name, u.conv, "shared")
        norm_rows(u, True)
    for dec in reversed(net.decoders):
        conv_row(f"dec{dec.level}.up", dec.up, "shared")
        for u in dec.units:
            conv_row(u.name, u.conv, "shared")
            norm_rows(u, True)
    for u in net.last:
        conv_row(u.name, u.conv, "once", "; INT stack" if cfg.int_stack and u is net.last[0] else "")
        norm_rows(u, False)
    conv_row("head", net.head, "once")

    header = ("block", "kind", "in", "out", "params", "sharing")
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    fmt = "  ".join("{:<%d}" % w if i in (0, 1, 5) else "{:>%d}" % w for i, w in enumerate(widths))
    lines = [
        f"bionet t={cfg.t} mult={cfg.mult} w={cfg.backward_levels} l={cfg.l} "
        f"INT={'on' if cfg.int_stack else 'off'} fusion={cfg.fusion}",
        f"channels: first={plan.first} enc={list(plan.enc)} middle={plan.middle} dec={list(plan.dec)}",
        fmt.format(*header).rstrip(),
        fmt.format(*("-" * w for w in widths)).rstrip(),
    ]
    lines += [fmt.format(*r).rstrip() for r in rows]
    return "\n".join(lines)


def format_totals(net: BioNet) -> str:
    s = param_summary(net)
    return "\n".join([
        f"conv+head parameters: {s.conv}",
        f"norm parameters (first/last stage): {s.norm_once}",
        f"norm parameters per iteration: {s.norm_per_iteration}",
        f"total trainable parameters: {s.total} ({s.total / 1e6:.2f} M)",
        f"model bytes: {s.model_bytes} ({s.model_bytes / 1e6:.1f} MB)",
    ])
