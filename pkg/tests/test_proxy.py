import csv
import dataclasses
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sfresample import analysis, proxy, resampler
from sfresample.resampler import Method, ResampleSpec, Signal


@pytest.fixture(scope="module")
def default_proxy():
    return proxy.build_proxy()


@pytest.fixture(scope="module")
def experiment():
    cfg = proxy.ExperimentConfig(n_items=4)
    px = cfg.proxy()
    low = proxy.synth_dataset(8000, 4, 2, 0.5, cfg.seed, proxy=px)
    native = proxy.synth_dataset(44100, 4, 2, 0.5, cfg.seed, proxy=px)
    return cfg, px, low, native


def test_build_proxy_band_plan(default_proxy):
    px = default_proxy
    assert px.bands == ((0.0, 4410.0), (4410.0, 8820.0))
    assert px.gate_band[0] == pytest.approx(12127.5) and px.gate_band[1] == pytest.approx(20947.5)
    four = proxy.build_proxy(44100, 4)
    assert four.bands[1][1] - four.bands[1][0] == pytest.approx(2205.0)
    assert proxy.build_proxy(44100, 2, seed=5) == proxy.build_proxy(44100, 2, seed=5)
    with pytest.raises(ValueError):
        proxy.build_proxy(44100, 1)


def test_proxy_validation():
    with pytest.raises(ValueError):
        proxy.ProxySeparator(16000, ((0, 1000), (900, 2000)), (5000, 7000))
    with pytest.raises(ValueError):
        proxy.ProxySeparator(16000, ((0, 1000),), (5000, 9000))
    with pytest.raises(ValueError):
        proxy.ProxySeparator(16000, ((0, 1000),), (5000, 7000), gate_epsilon=0.0)
    px = proxy.build_proxy(16000)
    with pytest.raises(dataclasses.FrozenInstanceError):
        px.gate_epsilon = 1.0


def test_gate_is_strictly_increasing_in_high_energy():
    e_total = np.array([1e-3, 1.0, 250.0])
    e_high = np.linspace(0.0, 1.0, 401)[:, None] * e_total
    for eps in (1e-7, 5e-7, 1e-3, 0.5):
        g = proxy.gate_value(e_high, e_total, eps)
        assert np.all(np.diff(g, axis=0) > 0)
        assert np.all((g >= 0) & (g <= 1))
    assert proxy.gate_value(0.0, 0.0, 1e-3) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-9, 1.0), st.floats(1e-6, 1e3), st.floats(1.0, 1e4))
def test_gate_half_open_threshold(eps, e_total, factor):
    e_high = min(eps * e_total * factor, e_total)
    if e_high >= eps * e_total:
        assert proxy.gate_value(e_high, e_total, eps) >= 0.5


def test_native_separation_quality(default_proxy):
    px = default_proxy
    data = proxy.synth_dataset(44100, 2, 2, 0.3, seed=3, proxy=px)
    for mixture, sources in data.items:
        assert np.min(px.gate(mixture)) >= 0.9
        for est, ref in zip(px.separate(mixture), sources):
            assert len(est) == len(ref)
            assert analysis.sdr_db(est, ref) >= 20.0


def test_closed_gate_silences_output(default_proxy):
    px = default_proxy
    t = np.arange(8000) / 44100
    low_only = Signal.mono(np.sin(2 * np.pi * 1000 * t) * np.hanning(8000), 44100)
    # a smoothly faded tone has no gate-band energy beyond kernel leakage
    assert np.max(px.gate(low_only)) <= 0.01
    silent = Signal.mono(np.zeros(3000), 44100)
    assert not np.any(px.gate(silent))
    for est in px.separate(silent):
        assert not np.any(est.channels)
    zero_ref = Signal.mono(np.sin(2 * np.pi * 1000 * t), 44100)
    assert analysis.sdr_db(np.zeros(8000), zero_ref) == 0.0


def test_separate_rejects_wrong_rate(default_proxy):
    with pytest.raises(ValueError):
        default_proxy.separate(Signal.mono(np.zeros(100), 8000))


def test_separate_does_not_mutate(default_proxy):
    before = default_proxy.fingerprint()
    x = Signal(np.random.default_rng(0).standard_normal((2, 3000)), 44100)
    a = default_proxy.separate(x)
    b = default_proxy.separate(x)
    assert default_proxy.fingerprint() == before
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.channels, v.channels)


def test_band_masks_partition_the_spectrum():
    split = proxy.ProxySeparator(16000, ((0, 4000), (4000, 8000)), (6000, 8000),
                                 gate_epsilon=1e-12, n_fft=256, hop=64)
    whole = dataclasses.replace(split, bands=((0, 8000),))
    gen = np.random.default_rng(1)
    t = np.arange(2000) / 16000
    tones = np.sin(2 * np.pi * gen.uniform(50, 7000, (20, 1)) * t + gen.uniform(0, 6, (20, 1)))
    x = Signal.mono(tones.sum(axis=0), 16000)
    parts = split.separate(x)
    (full,) = whole.separate(x)
    np.testing.assert_allclose(parts[0].channels + parts[1].channels, full.channels, atol=1e-12)
    # with the gate open the only loss is the excluded Nyquist bin (window leakage, -46 dB)
    assert np.max(np.abs(full.channels - x.channels)) <= 5e-3 * np.max(np.abs(x.channels))


@pytest.mark.parametrize("scale", [1.0, 0.03])
def test_separate_vjp_matches_finite_differences(scale):
    # scale 0.03 puts the gate-band excitation near the gate threshold
    px = proxy.ProxySeparator(16000, ((0, 1500), (1500, 3000)), (5000, 7500),
                              gate_epsilon=1e-3, n_fft=128, hop=32)
    gen = np.random.default_rng(2)
    n = 300
    t = np.arange(n) / 16000
    base = np.sin(2 * np.pi * 700 * t) + np.sin(2 * np.pi * 2100 * t)
    air = np.sin(2 * np.pi * 6000 * t + 0.3)
    x0 = np.stack([base + scale * air, 0.5 * base - scale * air])
    g = px.gate(Signal(x0, 16000))
    assert scale == 1.0 or (0.05 < np.median(g) < 0.95)
    w = [gen.standard_normal((2, n)) for _ in range(2)]

    def f(flat):
        outs = px.separate(Signal(flat.reshape(2, n), 16000))
        return float(sum(np.sum(wi * o.channels) for wi, o in zip(w, outs)))

    grad = px.separate_vjp(Signal(x0, 16000), w).ravel()
    idx = gen.choice(grad.size, 25, replace=False)
    fd = oracles.central_difference(f, x0.ravel(), idx=idx)
    assert np.max(oracles.relative_error(grad[idx], [fd[i] for i in idx], 1e-7)) <= 1e-5


def test_identity_separator():
    ident = proxy.IdentitySeparator(44100)
    x = Signal.mono(np.arange(5.0), 44100)
    assert ident.separate(x)[0] is x
    np.testing.assert_array_equal(ident.separate_vjp(x, [np.ones((1, 5))]), np.ones((1, 5)))


def test_synth_dataset_contract(default_proxy):
    a = proxy.synth_dataset(44100, 3, 2, 0.2, seed=9, proxy=default_proxy)
    b = proxy.synth_dataset(44100, 3, 2, 0.2, seed=9, proxy=default_proxy)
    assert len(a) == 3 and a.rate_hz == 44100
    for (mix, srcs), (mix_b, srcs_b) in zip(a.items, b.items):
        np.testing.assert_array_equal(mix.channels, mix_b.channels)
        total = np.sum([s.channels for s in srcs], axis=0)
        assert np.max(np.abs(mix.channels - total)) <= 1e-12
        assert len(mix) == round(0.2 * 44100)
    with pytest.raises(ValueError):
        proxy.synth_dataset(44100, 0, 2, 0.2, seed=9)
    with pytest.raises(ValueError):
        proxy.synth_dataset(8000, 1, 2, 0.2, seed=9, proxy=default_proxy)


def test_synth_sources_stay_in_band(default_proxy):
    data = proxy.synth_dataset(44100, 2, 2, 0.5, seed=4, proxy=default_proxy)
    nyq = 22050.0
    for _, sources in data.items:
        for (lo, hi), src in zip(default_proxy.bands, sources):
            inside = analysis.band_energy(src, lo, hi)
            gate = analysis.band_energy(src, *default_proxy.gate_band)
            total = analysis.band_energy(src, 0, nyq)
            outside = total - inside - gate
            assert outside <= 0.01 * inside


def test_low_rate_items_share_tones(experiment):
    cfg, px, low, native = experiment
    m8 = low.items[0][0]
    m44 = native.items[0][0]
    up = resampler.resample_conventional(m8, 44100)
    # the native item adds gate-band excitation; below 4 kHz they match
    lo8 = analysis.band_energy(up, 100, 3000)
    lo44 = analysis.band_energy(m44, 100, 3000)
    assert lo8 == pytest.approx(lo44, rel=0.05)


def test_conventional_gate_collapses_per_frame(experiment):
    _, px, low, _ = experiment
    for mixture, _ in low.items:
        up = resampler.resample_conventional(mixture, 44100)
        a = px._analyze(up)
        busy = a["e_total"] >= 0.01 * np.max(a["e_total"])
        assert np.max(a["gate"][busy]) <= 0.01


@pytest.mark.parametrize("method", [Method.NOISY_KERNEL, Method.POST_NOISE])
def test_noise_methods_reopen_gate(experiment, method):
    _, px, low, _ = experiment
    for i, (mixture, _) in enumerate(low.items):
        up = resampler.resample(mixture, 44100, ResampleSpec(method, seed=i))
        assert np.min(px.gate(up)) >= 0.5


def test_run_experiment_orders_methods(experiment):
    cfg, px, low, native = experiment
    ref = proxy.reference_sdr(px, native)
    conv = proxy.run_experiment(px, low, cfg.spec("conventional"))
    noisy = proxy.run_experiment(px, low, cfg.spec("noisy_kernel"))
    post = proxy.run_experiment(px, low, cfg.spec("post_noise"))
    assert ref.mean_sdr_db >= 20.0
    assert conv.mean_sdr_db <= 1.0
    assert noisy.mean_sdr_db >= conv.mean_sdr_db + 10.0
    assert post.mean_sdr_db < noisy.mean_sdr_db
    assert [s.n_items for s in conv.scores] == [4, 4]
    again = proxy.run_experiment(px, low, cfg.spec("noisy_kernel"))
    assert proxy.results_csv([noisy]) == proxy.results_csv([again])


def test_run_experiment_rejects_native_rate(experiment):
    cfg, px, _, native = experiment
    with pytest.raises(ValueError):
        proxy.run_experiment(px, native, cfg.spec("conventional"))
    with pytest.raises(ValueError):
        proxy.reference_sdr(px, experiment[2])


def test_results_csv_layout():
    res = proxy.ExperimentResult("conventional", (proxy.SourceScore(0, 1.5, 0.25, 3),
                                                  proxy.SourceScore(1, 2.0, 0.5, 3)), 0.1)
    text = proxy.results_csv([res])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["method", "source", "mean_sdr_db", "stderr_db", "n_items"]
    assert rows[1] == ["conventional", "0", "1.5", "0.25", "3"]
    assert text.endswith("\n") and "\r" not in text
    assert res.mean_sdr_db == pytest.approx(1.75)


def test_experiment_config_parsing():
    cfg = proxy.ExperimentConfig.from_dict({"methods": ["noisy-kernel"], "seed": 3,
                                            "train": {"max_epochs": 2}})
    assert cfg.methods == ("noisy_kernel",)
    assert cfg.train.max_epochs == 2
    assert (cfg.train.rate_in_hz, cfg.train.rate_out_hz) == (8000, 44100)
    assert proxy.ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        proxy.ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        proxy.ExperimentConfig.from_dict({"train": {"bogus": 1}})
    with pytest.raises(ValueError):
        proxy.ExperimentConfig(methods=("linear",))
    with pytest.raises(ValueError):
        proxy.run_suite(proxy.ExperimentConfig(methods=()))


def test_regularizer_only_targets():
    cfg = proxy.ExperimentConfig(n_train=2, n_val=1, train_duration_s=0.05,
                                 regularizer_only=True)
    train, val, model = proxy.training_data(cfg)
    assert isinstance(model, proxy.IdentitySeparator)
    mix, (target,) = train[0]
    assert len(target) == len(mix) and len(val) == 1
