"""``bionet`` command line: params | train | eval | predict | synth.

Exit codes: 0 success, 2 invalid config / missing or bad input files,
3 training divergence, 4 checkpoint mismatch or corruption.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config as runconfig, data
from .errors import BioNetError, CheckpointError, DivergenceError
from .graph import build, describe, format_totals
from .train import evaluate, logits_to_mask, predict, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4

log = logging.getLogger("bionet")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--t", type=int, help="recurrence count")
    p.add_argument("--mult", type=float, help="channel multiplier")
    p.add_argument("--w", type=int, help="backward-connected levels from the deepest")
    p.add_argument("--depth", type=int, help="encoding depth l")
    p.add_argument("--int-stack", action="store_true", default=None, help="stack all iterations into the last stage")
    p.add_argument("--fusion", choices=("concat", "add"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--manifest", help="dataset manifest (TSV)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    pairs = {
        "t": args.t, "mult": args.mult, "w": args.w, "l": args.depth, "fusion": args.fusion,
        "epochs": args.epochs, "seed": args.seed, "out": args.out, "manifest": args.manifest,
    }
    out = {k: str(v) for k, v in pairs.items() if v is not None}
    if args.int_stack:
        out["int_stack"] = "true"
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise runconfig.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _echo(cfg: runconfig.RunConfig, name: str = "config.resolved") -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(runconfig.dump(cfg), encoding="utf-8")
    return out


def _manifest(cfg: runconfig.RunConfig, split: str) -> data.Manifest:
    if not cfg.manifest:
        raise data.DataIOError("no manifest given (use --manifest or 'manifest = ...')")
    m = data.Manifest.read(cfg.manifest)
    sub = m.split(None if split == "all" else split)
    if not len(sub):
        raise data.DataError(f"manifest {cfg.manifest} has no samples in split {split!r}")
    return sub


def cmd_params(cfg: runconfig.RunConfig) -> int:
    net = build(cfg.net, cfg.seed)
    print(describe(net))
    print(format_totals(net))
    return EXIT_OK


def cmd_train(cfg: runconfig.RunConfig) -> int:
    samples = _manifest(cfg, cfg.train_split).load_samples()
    out = _echo(cfg)
    net = build(cfg.net, cfg.seed)
    aug = cfg.aug if cfg.augment else None
    history = train(net, samples, cfg.train, aug, out)
    last = history.records[-1] if history.records else None
    if last is not None:
        print(last.to_json())
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def _load_net(cfg: runconfig.RunConfig, ckpt: str | None):
    path = Path(ckpt) if ckpt else Path(cfg.out) / "checkpoint.ckpt"
    if not path.exists():
        raise data.DataIOError(f"checkpoint {path} does not exist")
    return checkpoint.load(path, cfg.net)


def cmd_eval(cfg: runconfig.RunConfig, ckpt: str | None) -> int:
    net = _load_net(cfg, ckpt)
    samples = _manifest(cfg, cfg.eval_split).load_samples()
    report = evaluate(net, samples, cfg.metrics)
    out = _echo(cfg, "config.eval.resolved")
    (out / "metrics.txt").write_text(report.to_lines(), encoding="utf-8")
    (out / "metrics.kv").write_text(report.to_kv(), encoding="utf-8")
    sys.stdout.write(report.to_kv())
    return EXIT_OK


def cmd_predict(cfg: runconfig.RunConfig, ckpt: str | None, image: str, output: str | None) -> int:
    net = _load_net(cfg, ckpt)
    x = data.read_png(image).astype(np.float32)[None] / 255.0
    y = predict(net, x)
    if net.config.head == "segmentation":
        result = logits_to_mask(y)[0].astype(np.uint8) * 255
    else:
        result = data.to_uint8(np.clip(y[0], 0.0, 1.0))
    out = _echo(cfg, "config.predict.resolved")
    dest = Path(output) if output else out / "prediction.png"
    data.write_png(dest, result)
    print(dest)
    return EXIT_OK


def cmd_synth(cfg: runconfig.RunConfig, n: int, size: int, noise: float) -> int:
    samples = data.synth_blobs(n, size, cfg.seed, noise)
    manifest = data.materialize(samples, cfg.out)
    _echo(cfg)
    print(Path(cfg.out) / "manifest.tsv")
    return EXIT_OK if len(manifest) == n else EXIT_USAGE


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bionet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("params", help="print the architecture and parameter totals"))
    _common(sub.add_parser("train", help="train on a manifest"))
    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    _common(p)
    p.add_argument("--checkpoint")
    p = sub.add_parser("predict", help="predict one image")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--output")
    p = sub.add_parser("synth", help="write a synthetic blob dataset")
    _common(p)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        cfg = runconfig.load(args.config, _overrides(args))
        if args.command == "params":
            return cmd_params(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "predict":
            return cmd_predict(cfg, args.checkpoint, args.image, args.output)
        return cmd_synth(cfg, args.n, args.size, args.noise)
    except DivergenceError as exc:
        print(f"bionet: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"bionet: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (BioNetError, OSError) as exc:
        print(f"bionet: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
