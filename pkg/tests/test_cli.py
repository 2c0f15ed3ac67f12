import numpy as np
import pytest

from bionet import cli, config
from bionet.data import Manifest, read_png
from bionet.errors import ConfigError, DivergenceError
from bionet.graph import BioNetConfig

TINY = ["--depth", "1", "--t", "2", "--set", "base_channels=2", "--set", "in_channels=1",
        "--set", "convs_per_block=1"]


# -- run config ----------------------------------------------------------------------


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nt = 2\nmult = 0.5  # trailing\ndepth = 3\nint = yes\nlr = 0.001\nseed = 4\n")
    cfg = config.load(path, {"t": "1"})
    assert cfg.net == BioNetConfig(t=1, mult=0.5, l=3, int_stack=True)
    assert cfg.train.initial_lr == 0.001 and cfg.train.seed == 4 and cfg.seed == 4


def test_dump_reloads_to_same_config(tmp_path):
    cfg = config.load(None, {"w": "2", "fusion": "concat", "metrics": "dice,rand_f", "augment": "false"})
    path = tmp_path / "resolved.cfg"
    path.write_text(config.dump(cfg))
    assert config.load(path) == cfg


@pytest.mark.parametrize("text", ["bogus = 1", "t = two", "no equals sign", "w = 9"])
def test_bad_config(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text + "\n")
    with pytest.raises(ConfigError):
        config.load(path)


# -- commands --------------------------------------------------------------------------


def test_params_t_invariant_conv_line(capsys):
    lines = []
    for t in ("1", "3"):
        assert cli.main(["params", "--t", t]) == 0
        out = capsys.readouterr().out
        lines.append([ln for ln in out.splitlines() if ln.startswith("conv+head parameters")][0])
    assert lines[0] == lines[1]


@pytest.mark.parametrize("args", [["--mult", "0.25"], ["--depth", "2"]])
def test_params_totals_near_table(capsys, args):
    assert cli.main(["params", *args]) == 0
    line = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("total trainable")][0]
    total = int(line.split(":")[1].split()[0])
    assert abs(total / 0.9e6 - 1) < 0.15


def test_invalid_config_exit_code(capsys):
    assert cli.main(["params", "--t", "0"]) == 2
    assert "t:" in capsys.readouterr().err


def test_synth_files_and_determinism(tmp_path, capsys):
    for run in ("a", "b"):
        assert cli.main(["synth", "--n", "8", "--size", "16", "--seed", "3", "--out", str(tmp_path / run)]) == 0
    pngs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert len(pngs) == 16
    manifest = Manifest.read(tmp_path / "a" / "manifest.tsv")
    assert len(manifest) == 8
    for r in manifest:
        assert manifest.resolve(r.image_path).exists() and manifest.resolve(r.target_path).exists()
    for p in pngs:
        assert (tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes()


def test_train_eval_predict_cycle(tmp_path, capsys):
    data_dir = tmp_path / "data"
    assert cli.main(["synth", "--n", "4", "--size", "8", "--seed", "1", "--out", str(data_dir)]) == 0
    manifest = str(data_dir / "manifest.tsv")
    logs = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        code = cli.main(["train", *TINY, "--epochs", "2", "--seed", "5", "--manifest", manifest,
                         "--out", str(out)])
        assert code == 0
        logs.append((out / "train_log.jsonl").read_bytes())
        resolved = (out / "config.resolved").read_text()
        assert "epochs = 2" in resolved and "seed = 5" in resolved
    assert logs[0] == logs[1]
    run = tmp_path / "r1"
    capsys.readouterr()
    code = cli.main(["eval", *TINY, "--manifest", manifest, "--set", "eval_split=train", "--out", str(run)])
    assert code == 0
    kv = capsys.readouterr().out
    assert kv.startswith("samples = 4") and "dice = " in kv
    assert (run / "metrics.txt").exists()
    image = sorted((data_dir / "images").glob("*.png"))[0]
    dest = tmp_path / "pred.png"
    code = cli.main(["predict", *TINY, "--out", str(run), "--image", str(image), "--output", str(dest)])
    assert code == 0
    pred = read_png(dest)
    assert pred.shape[1:] == read_png(image).shape[1:]
    assert set(np.unique(pred)) <= {0, 255}


def test_missing_manifest_exit_code(tmp_path, capsys):
    assert cli.main(["train", *TINY, "--manifest", str(tmp_path / "none.tsv"), "--out", str(tmp_path)]) == 2
    assert "none.tsv" in capsys.readouterr().err


def test_checkpoint_mismatch_exit_code(tmp_path):
    data_dir = tmp_path / "data"
    cli.main(["synth", "--n", "2", "--size", "8", "--out", str(data_dir)])
    manifest = str(data_dir / "manifest.tsv")
    out = str(tmp_path / "run")
    assert cli.main(["train", *TINY, "--epochs", "1", "--manifest", manifest, "--out", out]) == 0
    wrong = [a if a != "1" else "2" for a in TINY]  # depth 2 instead of 1
    assert cli.main(["eval", *wrong, "--manifest", manifest, "--set", "eval_split=train", "--out", out]) == 4


def test_divergence_exit_code(tmp_path, monkeypatch, capsys):
    data_dir = tmp_path / "data"
    cli.main(["synth", "--n", "2", "--size", "8", "--out", str(data_dir)])

    def diverge(*args, **kwargs):
        raise DivergenceError(1, 1, float("nan"))

    monkeypatch.setattr(cli, "train", diverge)
    code = cli.main(["train", *TINY, "--manifest", str(data_dir / "manifest.tsv"), "--out", str(tmp_path / "run")])
    assert code == 3
    assert "diverged" in capsys.readouterr().err
