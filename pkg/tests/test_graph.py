import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bionet import checkpoint
from bionet.errors import CheckpointError, ConfigError, FormatError, ShapeError
from bionet.graph import BioNetConfig, build, describe, format_totals, param_count, param_summary, plan_channels
from bionet.tensor import Tensor

from oracles import perturb, plain_unet, unroll_two

TINY = dict(base_channels=2, in_channels=1, convs_per_block=1)


def x_for(cfg, n=1, seed=0):
    size = 2**cfg.l * 2
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((n, cfg.in_channels, size, size)).astype(np.float32))


def configs():
    return st.builds(
        lambda l, wf, t, int_stack, fusion, cpb: BioNetConfig(
            l=l, w=min(wf, l), t=t, int_stack=int_stack, fusion=fusion,
            base_channels=2, mult=1.0, in_channels=1, convs_per_block=cpb,
        ),
        st.integers(1, 4), st.integers(0, 4), st.integers(1, 3), st.booleans(),
        st.sampled_from(["concat", "add"]), st.integers(1, 2),
    )


# -- config -----------------------------------------------------------------------


@pytest.mark.parametrize("field,value", [("t", 0), ("l", 0), ("mult", 0.0), ("w", 5), ("fusion", "mul"),
                                         ("head", "x"), ("convs_per_block", 0), ("block_order", "bn")])
def test_invalid_config_names_field(field, value):
    with pytest.raises(ConfigError, match=field):
        BioNetConfig(**{field: value}).validate()


def test_add_fusion_widths_are_paired():
    # add keeps encoder input widths, so backward connections cost no parameters
    counts = {w: param_summary(build(BioNetConfig(fusion="add", w=w, l=2, **TINY))).conv for w in (0, 2)}
    assert counts[0] == counts[2]
    net = build(BioNetConfig(fusion="add", l=2, t=2, **TINY))
    assert net.plan.up == net.plan.enc
    _, tape = net.forward(x_for(net.config))
    adds = [node for node in tape.nodes if node.kind == "add"]
    assert len(adds) == 2 * (2 + 2)
    assert all(a.inputs[0].shape == a.inputs[1].shape for a in adds)


# -- channel plan ----------------------------------------------------------------------


def test_default_plan():
    plan = plan_channels(BioNetConfig())
    assert plan.first == 32
    assert plan.enc == (64, 128, 256, 512)
    assert plan.middle == 512
    assert plan.dec == (32, 64, 128, 256)
    assert plan.back == plan.dec
    net = build(BioNetConfig())
    # every level concatenates decoded and encoded features
    assert all(enc.connected for enc in net.encoders)
    assert [enc.units[0].in_channels for enc in net.encoders] == [64, 128, 256, 512]


def test_int_stack_width():
    net = build(BioNetConfig(t=3, int_stack=True, l=1, mult=1.0, in_channels=1, convs_per_block=1))
    assert net.plan.dec[0] == 32
    assert net.last[0].in_channels == 96


def test_w_counts_from_deepest():
    net = build(BioNetConfig(l=4, w=2, **TINY))
    assert [enc.connected for enc in net.encoders] == [False, False, True, True]
    text = describe(net)
    assert "enc1.conv0" in text
    lines = [ln for ln in text.splitlines() if "no backward input" in ln]
    assert [ln.split()[0] for ln in lines] == ["enc1.conv0", "enc2.conv0"]


def _concat_widths(tape):
    return [tuple(t.shape[1] for t in node.inputs) for node in tape.nodes if node.kind == "concat_channels"]


def _expected_concats(cfg, plan):
    out = []
    for _ in range(cfg.t):
        for k in range(cfg.l):
            if plan.connected(k) and cfg.fusion == "concat":
                out.append((plan.back[k], plan.enc_in[k]))
        if cfg.fusion == "concat":
            for k in reversed(range(cfg.l)):
                out.append((plan.enc[k], plan.up[k]))
    if cfg.int_stack and cfg.t > 1:
        out.append(tuple([plan.dec[0]] * cfg.t))
    elif cfg.int_stack:
        out.append((plan.dec[0],))
    return out


@given(configs())
@settings(max_examples=40, deadline=None)
def test_channel_bookkeeping(cfg):
    net = build(cfg, seed=1)
    plan = net.plan
    x = x_for(cfg)
    y, tape = net.forward(x, phase="eval")
    assert y.shape == (1, 1) + x.shape[2:]
    assert _concat_widths(tape) == _expected_concats(cfg, plan)
    for k, enc in enumerate(net.encoders):
        assert enc.connected == (k >= cfg.l - cfg.backward_levels)
        back = plan.dec[k] if enc.connected and cfg.fusion == "concat" else 0
        expect = plan.enc_in[k] + back
        assert enc.units[0].in_channels == expect
    assert net.last[0].in_channels == (cfg.t if cfg.int_stack else 1) * plan.dec[0]


@given(configs())
@settings(max_examples=30, deadline=None)
def test_stage_execution_counts(cfg):
    cfg = cfg.replace(fusion="concat")
    net = build(cfg)
    _, tape = net.forward(x_for(cfg), phase="eval")
    uses = {}
    for node in tape.nodes:
        if node.kind in ("conv2d", "conv_transpose2d"):
            uses[id(node.inputs[1])] = uses.get(id(node.inputs[1]), 0) + 1
    for u, recursed in net.units():
        assert uses[id(u.conv.weight)] == (cfg.t if recursed else 1), u.name
        assert len(u.norms) == (cfg.t if recursed else 1)
    for dec in net.decoders:
        assert uses[id(dec.up.weight)] == cfg.t
    assert uses[id(net.head.weight)] == 1


# -- forward semantics ------------------------------------------------------------------


def test_default_forward_shape_independent_of_t():
    for t in (1, 2, 3):
        cfg = BioNetConfig(t=t, l=4, mult=0.125, in_channels=3)
        y, _ = build(cfg).forward(Tensor(np.zeros((1, 3, 64, 64))))
        assert y.shape == (1, 1, 64, 64)


@given(st.integers(1, 4), st.integers(0, 2**16))
@settings(max_examples=12, deadline=None)
def test_w0_t1_is_plain_unet(l, seed):
    cfg = BioNetConfig(t=1, w=0, l=l, **TINY)
    net = perturb(build(cfg, seed=seed), seed)
    x = x_for(cfg, n=2, seed=seed)
    y, _ = net.forward(x, phase="eval")
    assert y.data.tobytes() == plain_unet(net, x).data.tobytes()


def test_first_iteration_equals_no_backward_network():
    # zeros injected at i = 1: with t = 1, w = l gives the w = 0 function when the
    # zero-fed weight slices are dropped
    cfg = BioNetConfig(t=1, l=2, **TINY)
    net = perturb(build(cfg, seed=3), 3)
    plain = build(cfg.replace(w=0), seed=3)
    for (name, p), (pname, q) in zip(net.parameters().items(), plain.parameters().items()):
        assert name == pname
        if p.shape == q.shape:
            q.data = p.data.copy()
        else:
            # encoder input is [f_dec, x_in]: keep the x_in slice
            q.data = p.data[:, p.shape[1] - q.shape[1]:].copy()
    for name, buf in net.buffers().items():
        plain.set_buffer(name, buf.copy())
    x = x_for(cfg, n=2, seed=4)
    a, _ = net.forward(x)
    b, _ = plain.forward(x)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("seed", [0, 7])
def test_manual_two_iteration_unroll(seed):
    cfg = BioNetConfig(t=2, l=2, base_channels=2, in_channels=1, convs_per_block=2)
    net = perturb(build(cfg, seed=seed), seed + 1)
    x = x_for(cfg, n=2, seed=seed)
    y, _ = net.forward(x, phase="eval")
    assert y.data.tobytes() == unroll_two(net, x).data.tobytes()


def test_eval_forward_is_deterministic():
    cfg = BioNetConfig(t=2, l=2, **TINY)
    net = perturb(build(cfg))
    x = x_for(cfg, n=2)
    assert net.forward(x)[0].data.tobytes() == net.forward(x)[0].data.tobytes()


def test_shared_weight_affects_every_iteration():
    cfg = BioNetConfig(t=2, l=2, int_stack=True, **TINY)
    net = perturb(build(cfg))
    x = x_for(cfg)

    def tops():
        _, tape = net.forward(x)
        stack = [node for node in tape.nodes if node.kind == "concat_channels"][-1]
        return [t.data.copy() for t in stack.inputs]

    before = tops()
    w = net.decoders[0].units[0].conv.weight
    w.data = (w.data * 1.5).astype(np.float32)
    after = tops()
    assert len(before) == 2
    for a, b in zip(before, after):
        assert not np.array_equal(a, b)


def test_forward_input_errors():
    net = build(BioNetConfig(t=1, l=2, **TINY))
    with pytest.raises(ShapeError):
        net.forward(Tensor(np.zeros((1, 1, 6, 8))))
    with pytest.raises(ConfigError):
        net.forward(Tensor(np.zeros((1, 3, 8, 8))))


# -- parameter accounting ------------------------------------------------------------------


def test_param_count_hand_enumeration():
    # l=1, base=4, cpb=1, in=1, out=1, t=2; widths first=4, enc=8, middle=8, dec=4
    conv = (
        (1 * 4 * 9 + 4) + 2 * (4 * 4 * 9 + 4)    # first stage: 3 CONV
        + (8 * 8 * 9 + 8)                       # enc1: [f_dec 4, x_in 4] -> 8
        + 2 * (8 * 8 * 9 + 8)                   # middle: 2 CONV at 8
        + (8 * 4 * 2 * 2 + 4)                   # dec1 UP 8 -> 4
        + (12 * 4 * 9 + 4)                      # dec1: [f_enc 8, up 4] -> 4
        + 3 * (4 * 4 * 9 + 4)                   # last stage
        + (4 * 1 + 1)                           # 1x1 head
    )
    norm_once = 6 * 2 * 4
    norm_per_iteration = 2 * 8 + 2 * 2 * 8 + 2 * 4
    expected = conv + norm_once + 2 * norm_per_iteration
    assert (conv, norm_once, norm_per_iteration, expected) == (3105, 48, 56, 3265)
    net = build(BioNetConfig(t=2, l=1, base_channels=4, mult=1.0, convs_per_block=1, in_channels=1))
    s = param_summary(net)
    assert (s.conv, s.norm_once, s.norm_per_iteration) == (conv, norm_once, norm_per_iteration)
    assert param_count(net) == (expected, 4 * expected)


@pytest.mark.parametrize("extra", [{}, {"fusion": "add"}, {"w": 2}, {"l": 2}])
def test_conv_count_invariant_in_t(extra):
    summaries = [param_summary(build(BioNetConfig(t=t, mult=0.25, **extra))) for t in (1, 2, 3)]
    assert len({s.conv for s in summaries}) == 1
    for s in summaries:
        assert s.total - summaries[0].total == (s.t - 1) * s.norm_per_iteration


def test_int_stack_grows_only_the_last_stage_input():
    base = param_summary(build(BioNetConfig(t=1, mult=0.25, int_stack=True))).conv
    for t in (2, 3):
        conv = param_summary(build(BioNetConfig(t=t, mult=0.25, int_stack=True))).conv
        # one extra first-width input block per iteration into last.conv0 (3x3 kernels)
        assert conv - base == (t - 1) * 8 * 8 * 9


def test_mult_halving_quarters_conv_params():
    full = param_summary(build(BioNetConfig(mult=1.0))).conv
    half = param_summary(build(BioNetConfig(mult=0.5))).conv
    assert abs(half / full - 0.25) < 0.025


def test_describe_rows():
    net = build(BioNetConfig(t=3, **TINY, l=2))
    text = describe(net)
    names = [ln.split()[0] for ln in text.splitlines()[4:]]
    assert names.count("first.conv0") == 1 and names.count("last.conv2") == 1
    for u, recursed in net.units():
        rows = [n for n in names if n.startswith(u.name + ".norm")]
        assert len(rows) == (3 if recursed else 1)
    assert describe(net) == text


def test_format_totals_t_invariant_line():
    lines = [format_totals(build(BioNetConfig(t=t, mult=0.25))).splitlines()[0] for t in (1, 3)]
    assert lines[0] == lines[1]
    assert lines[0].startswith("conv+head parameters:")


# -- checkpoints -------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    cfg = BioNetConfig(t=2, l=2, **TINY)
    net = perturb(build(cfg, seed=5))
    path = tmp_path / "net.ckpt"
    written = checkpoint.save(net, path)
    assert path.stat().st_size == written
    total, model_bytes = param_count(net)
    buffers = sum(b.size for b in net.buffers().values()) * 4
    header = written - model_bytes - buffers
    assert 0 < header < 16384
    back = checkpoint.load(path)
    assert back.config == cfg
    for (name, p), q in zip(net.parameters().items(), back.parameters().values()):
        assert p.data.tobytes() == q.data.tobytes(), name
    for name, b in net.buffers().items():
        assert b.tobytes() == back.buffers()[name].tobytes(), name
    x = x_for(cfg)
    assert net.forward(x)[0].data.tobytes() == back.forward(x)[0].data.tobytes()


def test_checkpoint_wrong_depth_names_block(tmp_path):
    path = tmp_path / "net.ckpt"
    checkpoint.save(build(BioNetConfig(t=1, l=2, **TINY)), path)
    with pytest.raises(CheckpointError, match=r"block \w+"):
        checkpoint.load(path, BioNetConfig(t=1, l=3, **TINY))


@pytest.mark.parametrize("damage", ["magic", "header", "truncate"])
def test_checkpoint_corruption(tmp_path, damage):
    path = tmp_path / "net.ckpt"
    checkpoint.save(build(BioNetConfig(t=1, l=1, **TINY)), path)
    raw = path.read_bytes()
    if damage == "magic":
        raw = b"X" + raw[1:]
    elif damage == "header":
        raw = raw.replace(b"arrays ", b"arrayz ", 1)
    else:
        raw = raw[:-8]
    path.write_bytes(raw)
    with pytest.raises(FormatError):
        checkpoint.load(path)
