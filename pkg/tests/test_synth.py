from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsvc import formats
from fsvc.errors import InputError, ShapeError
from fsvc.synth import (
    SynthesizerConfig,
    backward_arrays,
    benchmark_inference,
    build_synthesizer,
    evaluate_mse,
    forward_arrays,
    prosody_inputs,
    resample_for_rate,
    speedup,
    synth_forward,
    train_synthesizer,
)

from helpers import gradient_report, random_inputs, synthetic_utterance

DESK = SynthesizerConfig()  # D=64, N=2, 2 heads, K=64


@pytest.fixture(scope="module")
def desk_params():
    return build_synthesizer(DESK)


def closed_form_count(K, D, N, H, k=3, P=2, out=20):
    attn = 4 * (D * D + D)
    block = attn + 2 * D + (k * D * H + H) + (k * H * D + D) + 2 * D
    return (K * D + D) + 2 * D + N * block + ((D + P) * D + D) + N * block + (D * out + out)


def test_parameter_count_closed_form():
    p = build_synthesizer(SynthesizerConfig(n_blocks=6, model_dim=64, ppg_classes=64))
    assert p.n_parameters() == closed_form_count(K=64, D=64, N=6, H=256)
    assert p.n_parameters() == 1_396_116  # hand count: 2*6*115520 + 4288 + 4288 + 1300


def test_same_seed_bit_identical():
    a, b = build_synthesizer(DESK), build_synthesizer(DESK)
    assert list(a.tensors) == list(b.tensors)
    for k in a.tensors:
        assert a.tensors[k].tobytes() == b.tensors[k].tobytes()
    c = build_synthesizer(replace(DESK, seed=1))
    assert c.tensors["ppg.w"].tobytes() != a.tensors["ppg.w"].tobytes()


def test_init_bounds():
    p = build_synthesizer(DESK)
    bound = np.sqrt(6 / (64 + 64))
    assert np.abs(p.tensors["enc.0.attn.wq"]).max() <= bound


@pytest.mark.parametrize(
    "bad",
    [dict(model_dim=65, n_heads=2), dict(conv_kernel=4), dict(n_blocks=0), dict(out_dim=18)],
)
def test_invalid_configs(bad):
    with pytest.raises(InputError):
        build_synthesizer(replace(DESK, **bad))


def test_full_config_constructible():
    cfg = SynthesizerConfig.full(ppg_classes=64)
    assert (cfg.n_blocks, cfg.model_dim, cfg.n_heads, cfg.hidden) == (6, 512, 4, 2048)
    p = build_synthesizer(cfg)
    assert p.tensors["ppg.w"].shape == (64, 512)


@pytest.mark.parametrize("T", [1, 98])
def test_forward_shapes(desk_params, T):
    ppg, pros = random_inputs(T, 64, seed=T)
    out = synth_forward(desk_params, ppg, pros)
    assert out.frames.shape == (T, 20)
    assert np.all(np.isfinite(out.frames))


@settings(max_examples=25, deadline=None)
@given(T=st.integers(1, 200))
def test_length_preserved(desk_params, T):
    ppg, pros = random_inputs(T, 64, seed=T)
    assert len(synth_forward(desk_params, ppg, pros)) == T


def test_length_mismatch_rejected(desk_params):
    ppg, pros = random_inputs(10, 64)
    ppg2, _ = random_inputs(11, 64)
    with pytest.raises(ShapeError):
        synth_forward(desk_params, ppg2, pros)
    ppg3, pros3 = random_inputs(10, 32)
    with pytest.raises(ShapeError, match="classes"):
        synth_forward(desk_params, ppg3, pros3)


def test_forward_depends_on_log_f0():
    ex = synthetic_utterance(T=30)
    p = train_synthesizer(build_synthesizer(DESK), [ex], epochs=30)
    ppg, pros, _ = ex
    a = synth_forward(p, ppg, pros).frames
    b = synth_forward(p, ppg, replace(pros, log_f0=pros.log_f0 * 2)).frames
    assert np.linalg.norm(a - b) > 0


def test_inference_repeatable(desk_params):
    ppg, pros = random_inputs(40, 64, seed=3)
    a = synth_forward(desk_params, ppg, pros).frames
    b = synth_forward(desk_params, ppg, pros).frames
    assert a.tobytes() == b.tobytes()


def test_utterances_do_not_interact(desk_params):
    # per-utterance results are the same whatever else is processed around them
    inputs = [random_inputs(T, 64, seed=T) for T in (5, 17, 9)]
    alone = [synth_forward(desk_params, *x).frames for x in inputs]
    again = [synth_forward(desk_params, *x).frames for x in reversed(inputs)][::-1]
    for a, b in zip(alone, again):
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("seed", [0, 1])
def test_composed_gradient(seed):
    cfg = SynthesizerConfig(n_blocks=1, model_dim=16, n_heads=2, ppg_classes=8, seed=seed)
    p = build_synthesizer(cfg)
    rng = np.random.default_rng(100 + seed)
    for k in p.trainable():  # move LN gains/biases off their trivial init
        p.tensors[k] += 0.05 * rng.standard_normal(p.tensors[k].shape)
    ppg, pros = random_inputs(4, 8, seed=seed)
    xp, xs = ppg.log_post, prosody_inputs(pros)
    R = rng.standard_normal((4, 20))

    def loss():
        return float(np.sum(forward_arrays(p.tensors, cfg, xp, xs)[0] * R))

    _, cache = forward_arrays(p.tensors, cfg, xp, xs, want_cache=True)
    g = backward_arrays(p.tensors, cfg, R, cache)
    assert set(g) == set(p.trainable())
    errs = gradient_report(loss, {k: p.tensors[k] for k in g}, g)
    assert max(errs.values()) < 1e-3, max(errs.items(), key=lambda kv: kv[1])


def test_training_reduces_loss_and_records_history():
    ex = synthetic_utterance(T=20, seed=1)
    p0 = build_synthesizer(DESK)
    seen = []
    p1 = train_synthesizer(p0, [ex], epochs=20, on_epoch=lambda e, l: seen.append(l))
    assert len(seen) == 20 and seen[-1] < seen[0]
    assert evaluate_mse(p1, [ex]) < evaluate_mse(p0, [ex])
    assert p1.meta["epochs"] == "20"
    # the input object is left untouched
    assert p0.tensors["ppg.w"].tobytes() == build_synthesizer(DESK).tensors["ppg.w"].tobytes()


def test_training_deterministic():
    data = [synthetic_utterance(T=12, seed=s) for s in range(3)]
    a = train_synthesizer(build_synthesizer(DESK), data, epochs=3, batch_size=2, seed=4)
    b = train_synthesizer(build_synthesizer(DESK), data, epochs=3, batch_size=2, seed=4)
    for k in a.tensors:
        assert a.tensors[k].tobytes() == b.tensors[k].tobytes()


def test_zero_epochs_unchanged():
    p = build_synthesizer(DESK)
    q = train_synthesizer(p, [synthetic_utterance(T=10)], epochs=0)
    for k in p.tensors:
        assert p.tensors[k].tobytes() == q.tensors[k].tobytes()


def test_init_from_checkpoint_zero_epochs(tmp_path):
    trained = train_synthesizer(build_synthesizer(DESK), [synthetic_utterance(T=10)], epochs=2)
    formats.save_synthesizer(trained, tmp_path / "ck.fvcm")
    ck = formats.load_synthesizer(tmp_path / "ck.fvcm")
    out = train_synthesizer(build_synthesizer(DESK), [synthetic_utterance(T=10)], epochs=0, init_from=ck)
    for k in ck.tensors:
        assert out.tensors[k].tobytes() == ck.tensors[k].tobytes()


def test_training_rejections():
    ppg, pros, feat = synthetic_utterance(T=10)
    from fsvc.dsp import LpcnetFeatureSequence

    with pytest.raises(InputError):
        train_synthesizer(build_synthesizer(DESK), [], epochs=1)
    with pytest.raises(ShapeError):
        train_synthesizer(
            build_synthesizer(DESK), [(ppg, pros, LpcnetFeatureSequence(feat.frames[:9]))], epochs=1
        )


# --- rate control ----------------------------------------------------------------


def test_rate_one_is_identity():
    ppg, pros = random_inputs(37, 16)
    p2, s2 = resample_for_rate(ppg, pros, 1.0)
    assert p2.log_post.tobytes() == ppg.log_post.tobytes()
    assert s2.log_f0.tobytes() == pros.log_f0.tobytes()
    assert s2.voicing.tobytes() == pros.voicing.tobytes()


@pytest.mark.parametrize("T,rate,expect", [(100, 0.8, 125), (120, 1.2, 100), (50, 0.5, 100), (50, 2.0, 25)])
def test_rate_lengths(T, rate, expect):
    ppg, pros = random_inputs(T, 16)
    p2, s2 = resample_for_rate(ppg, pros, rate)
    assert len(p2) == len(s2) == expect
    np.testing.assert_allclose(np.exp(p2.log_post).sum(axis=1), 1.0, atol=1e-6)
    assert set(np.unique(s2.voicing)) <= {0.0, 1.0}


@settings(max_examples=40, deadline=None)
@given(T=st.integers(2, 150), rate=st.floats(0.5, 2.0))
def test_rate_round_trip_length(T, rate):
    ppg, pros = random_inputs(T, 8, seed=T)
    p2, s2 = resample_for_rate(ppg, pros, rate)
    assert len(p2) == round(T / rate)
    if len(p2) >= 2 and 0.5 <= 1 / rate <= 2.0:
        p3, _ = resample_for_rate(p2, s2, 1 / rate)
        assert abs(len(p3) - T) <= 1
    np.testing.assert_allclose(np.exp(p2.log_post).sum(axis=1), 1.0, atol=1e-6)


def test_rate_interpolates_linearly():
    ppg, pros = random_inputs(3, 4)
    pros = replace(pros, log_f0=np.array([0.0, 1.0, 2.0]))
    _, s2 = resample_for_rate(ppg, pros, 0.6)  # 5 output frames at 0, .5, 1, 1.5, 2
    np.testing.assert_allclose(s2.log_f0, [0, 0.5, 1, 1.5, 2])


def test_rate_bounds():
    ppg, pros = random_inputs(10, 4)
    for bad in (0.49, 2.01):
        with pytest.raises(InputError):
            resample_for_rate(ppg, pros, bad)
    with pytest.raises(InputError):
        resample_for_rate(*random_inputs(1, 4), 1.0)


# --- benchmark -----------------------------------------------------------------------


def test_modes_agree_on_shape(desk_params):
    par = benchmark_inference(desk_params, 16, "parallel", repeats=1)
    ar = benchmark_inference(desk_params, 16, "ar_emulation", repeats=1)
    assert par.output_shape == ar.output_shape == (16, 20)


def test_ar_last_frame_equals_parallel_last_frame(desk_params):
    from fsvc.synth import _random_inputs, generate

    t = desk_params.tensors
    xp, xs = _random_inputs(DESK, 20, 0, np.float64)
    full = generate(t, DESK, xp, xs, "parallel")
    ar = generate(t, DESK, xp, xs, "ar_emulation")
    # the final prefix is the whole sequence, so the last frames coincide
    np.testing.assert_allclose(ar[-1], full[-1], atol=1e-10)


def test_speedup_and_growth(desk_params):
    par64 = benchmark_inference(desk_params, 64, "parallel", repeats=5)
    ar64 = benchmark_inference(desk_params, 64, "ar_emulation", repeats=3)
    ar256 = benchmark_inference(desk_params, 256, "ar_emulation", repeats=1)
    assert speedup(ar64, par64) > 1
    assert ar256.median_ms > ar64.median_ms


def test_benchmark_rejects_short_and_unknown(desk_params):
    with pytest.raises(InputError):
        benchmark_inference(desk_params, 8, "parallel")
    with pytest.raises(InputError):
        benchmark_inference(desk_params, 32, "beam")
