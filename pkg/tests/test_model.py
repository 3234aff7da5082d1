import numpy as np
import pytest

from tfsep.gradcheck import grad_check
from tfsep.layers import RngState, sigmoid, silu
from tfsep.model import (
    AttentionCapture,
    MBConv,
    ModelConfig,
    build,
    count_params,
    dump_attention,
    param_count_formula,
    preset,
    read_matrix,
    separate,
    waveform_backward,
    waveform_forward,
)
from tfsep.signal import MultichannelWaveform, StftConfig


def jittered(store, seed=0, scale=0.2):
    rng = np.random.default_rng(seed)
    for n in store.names():
        if n.endswith("running_mean"):
            store[n] = rng.normal(0, 0.3, store[n].shape)
        elif n.endswith("running_var"):
            store[n] = rng.uniform(0.5, 2.0, store[n].shape)
        elif n.endswith("bias") or n.endswith("bn.weight") or n.endswith("ln.weight"):
            store[n] = store[n] + rng.normal(0, scale, store[n].shape)
    return store


def test_invalid_config_messages():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(D=10, H=4)
    with pytest.raises(ValueError, match="I=1"):
        ModelConfig(I=1)
    with pytest.raises(ValueError, match="L_layers"):
        ModelConfig(L_layers=0)


def test_parameter_names_follow_scheme():
    store, _ = build(preset("micro"))
    names = store.names()
    assert names[0] == "encoder.weight" and names[-1] == "decoder.bias"
    for expected in ("block0.mbconv1.pw1.weight", "block0.mbconv1.se.fc1.weight", "block1.fsa.attn.q.weight",
                     "block1.bta.ln.weight", "block0.mbconv2.bn.running_var", "block1.mbconv2.dw.weight"):
        assert expected in store


@pytest.mark.parametrize("name,target", [
    ("dasformer-base", 2.2e6),
    ("ablation-no-se", 1.4e6),
    ("ablation-1x1-no-se", 1.3e6),
    ("dasformer-plus", 6.4e6),
])
def test_parameter_counts(name, target):
    cfg = preset(name)
    store, _ = build(cfg)
    n = count_params(store)
    assert n == sum(param_count_formula(cfg).values())
    assert abs(n - target) <= 0.15 * target


def test_breakdown_sums_to_total():
    store, _ = build(preset("micro"))
    parts = count_params(store, by="submodule")
    assert sum(parts.values()) == count_params(store)
    assert set(parts) == {"encoder", "decoder", "block0", "block1"}
    formula = param_count_formula(preset("micro"))
    assert parts["encoder"] == formula["encoder"] and parts["decoder"] == formula["decoder"]


def test_expanded_and_se_widths_base():
    cfg = preset("dasformer-base")
    assert cfg.expanded == 256 and cfg.se_hidden == 64


@pytest.mark.parametrize("t,f", [(1, 1), (3, 7), (6, 9)])
def test_output_shape(t, f):
    cfg = preset("micro")
    store, model = build(cfg)
    y, _ = model.forward(store, np.random.default_rng(0).standard_normal((2, 4, t, f)))
    assert y.shape == (2, 4, t, f)


def test_same_weights_run_on_different_lengths():
    store, model = build(preset("micro"))
    for t in (5, 11):
        y, _ = model.forward(store, np.ones((1, 4, t, 9)))
        assert np.all(np.isfinite(y))


def test_wrong_input_channels():
    store, model = build(preset("micro"))
    with pytest.raises(ValueError, match="model input"):
        model.forward(store, np.zeros((1, 3, 4, 4)))


def test_zero_decoder_gives_zero_output():
    store, model = build(preset("micro"), zero_decoder=True)
    y, _ = model.forward(store, np.random.default_rng(1).standard_normal((1, 4, 5, 6)))
    assert not np.any(y)


def test_zero_pw2_makes_mbconv_identity():
    cfg = ModelConfig(D=4, H=2, L_layers=1, M=1, I=2)
    block = MBConv("m", cfg)
    from tfsep.layers import ParamStore
    store = ParamStore()
    block.init(store, RngState(0))
    store["m.pw2.weight"] = np.zeros_like(store["m.pw2.weight"])
    x = np.random.default_rng(2).standard_normal((1, 4, 3, 3))
    y, _ = block.forward(store, x)
    assert np.array_equal(y, x)


def mbconv_scalar_oracle(x, s, cfg):
    """Eq.-by-eq. composition with per-element loops; x is (D, T, F)."""
    d, t, f = x.shape
    e = cfg.expanded
    mean, var = s["m.bn.running_mean"], s["m.bn.running_var"]
    h = np.empty_like(x)
    for c in range(d):
        h[c] = s["m.bn.weight"][c] * (x[c] - mean[c]) / np.sqrt(var[c] + 1e-5) + s["m.bn.bias"][c]
    a1 = np.zeros((e, t, f))
    for o in range(e):
        for c in range(d):
            a1[o] += s["m.pw1.weight"][o, c] * h[c]
        a1[o] = silu(a1[o] + s["m.pw1.bias"][o])
    a2 = np.zeros((e, t, f))
    for o in range(e):
        for ti in range(t):
            for fi in range(f):
                acc = s["m.dw.bias"][o]
                for a in range(3):
                    for b in range(3):
                        tt, ff = ti + a - 1, fi + b - 1
                        if 0 <= tt < t and 0 <= ff < f:
                            acc += s["m.dw.weight"][o, a, b] * a1[o, tt, ff]
                a2[o, ti, fi] = silu(acc)
    pooled = a2.mean(axis=(1, 2))
    hid = silu(s["m.se.fc1.weight"] @ pooled + s["m.se.fc1.bias"])
    gate = sigmoid(s["m.se.fc2.weight"] @ hid + s["m.se.fc2.bias"])
    a3 = a2 * gate[:, None, None]
    out = np.zeros_like(x)
    for c in range(d):
        for o in range(e):
            out[c] += s["m.pw2.weight"][c, o] * a3[o]
        out[c] += s["m.pw2.bias"][c]
    return x + out


def test_mbconv_matches_scalar_oracle():
    cfg = ModelConfig(D=4, H=2, L_layers=1, M=1, I=2)
    block = MBConv("m", cfg)
    from tfsep.layers import ParamStore
    store = ParamStore()
    block.init(store, RngState(3))
    jittered(store, 3)
    x = np.random.default_rng(4).standard_normal((1, 4, 3, 3))
    y, _ = block.forward(store, x, train=False)
    np.testing.assert_allclose(y[0], mbconv_scalar_oracle(x[0], store, cfg), atol=1e-9)


@pytest.mark.parametrize("axis", ["freq", "time"])
def test_shared_attention_per_slice_equals_batched(axis):
    cfg = preset("micro", dropout_rate=0.0)
    store, model = build(cfg, 5)
    mod = model.blocks[0][1 if axis == "freq" else 3]
    x = np.random.default_rng(6).standard_normal((2, cfg.D, 7, 9))
    batched, _ = mod.forward(store, x)
    out = np.empty_like(x)
    if axis == "freq":
        for b in range(2):
            for t in range(7):
                seq = x[b, :, t, :].T[None]
                h, _ = mod.ln.forward(store, seq)
                a, _ = mod.attn.forward(store, h)
                out[b, :, t, :] = (seq + a)[0].T
    else:
        for b in range(2):
            for f in range(9):
                seq = x[b, :, :, f].T[None]
                h, _ = mod.ln.forward(store, seq)
                a, _ = mod.attn.forward(store, h)
                out[b, :, :, f] = (seq + a)[0].T
    assert np.max(np.abs(out - batched)) < 1e-6


def test_end_to_end_gradient_micro():
    cfg = preset("gradcheck")
    store, model = build(cfg, 1)
    jittered(store, 7, 0.3)
    x = np.random.default_rng(8).standard_normal((1, 2 * cfg.M, 6, 9))

    def fwd(s, inputs):
        y, cache = model.forward(s, inputs["x"], train=False)
        return y, lambda g: {"x": model.backward(s, cache, g)}

    report = grad_check(fwd, store, {"x": x}, tolerance=1e-3, max_entries=40)
    assert report.passed, report.summary()


def test_train_mode_gradient_with_batch_norm():
    cfg = preset("gradcheck")
    store, model = build(cfg, 2)
    x = np.random.default_rng(9).standard_normal((2, 2 * cfg.M, 4, 5))

    def fwd(s, inputs):
        y, cache = model.forward(s, inputs["x"], train=True, rng=RngState(0))
        return y, lambda g: {"x": model.backward(s, cache, g)}

    report = grad_check(fwd, store, {"x": x}, tolerance=1e-3, max_entries=15)
    assert report.passed, report.summary()


def test_waveform_pipeline_gradient():
    cfg = preset("gradcheck")
    store, model = build(cfg, 3)
    stft_cfg = StftConfig(16, 8)
    mix = np.random.default_rng(10).standard_normal((1, cfg.M, 40))

    def fwd(s, inputs):
        est, cache = waveform_forward(model, s, mix, stft_cfg)

        def bwd(g):
            waveform_backward(model, s, stft_cfg, cache, g)
            return {}

        return est, bwd

    report = grad_check(fwd, store, {}, tolerance=1e-3, max_entries=10)
    assert report.passed, report.summary()


def test_separate_shapes_and_determinism():
    cfg = preset("micro")
    store, model = build(cfg, 4)
    wave = MultichannelWaveform(np.random.default_rng(11).standard_normal((2, 1000)) * 0.1, 8000)
    st = StftConfig(256, 128)
    a = separate(model, store, wave, st)
    b = separate(model, store, wave, st)
    assert len(a) == cfg.I
    assert all(w.samples.shape == (1, 1000) for w in a)
    assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a, b))


def test_separate_channel_mismatch():
    store, model = build(preset("micro"))
    with pytest.raises(ValueError, match="channels"):
        separate(model, store, MultichannelWaveform(np.zeros((3, 600)), 8000), StftConfig())


def test_attention_capture_rows_stochastic(tmp_path):
    cfg = preset("micro")
    store, model = build(cfg, 5)
    cap = AttentionCapture(layers={1}, heads={0}, slices={0, 2})
    model.forward(store, np.random.default_rng(12).standard_normal((1, 4, 5, 7)), capture=cap)
    assert {(r.module, r.slice) for r in cap.records} == {("fsa", 0), ("fsa", 2), ("bta", 0), ("bta", 2)}
    for r in cap.records:
        assert r.layer == 1 and r.head == 0
        assert np.all(np.abs(r.matrix.sum(1) - 1) < 1e-6)
    fsa = [r for r in cap.records if r.module == "fsa"][0]
    assert fsa.matrix.shape == (7, 7)
    index = dump_attention(cap.records, tmp_path)
    lines = index.read_text().splitlines()
    assert len(lines) == 4
    m = read_matrix(tmp_path / "layer1_fsa_head0_slice0.txt")
    np.testing.assert_allclose(m, fsa.matrix, rtol=1e-8)
