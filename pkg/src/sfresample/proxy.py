"""A frozen stand-in separator whose output depends on high-band energy.

``ProxySeparator`` splits a mixture into frequency bands with an STFT mask and
scales every frame by a smooth gate

    g = E_high / (E_high + eps * E_total)

where E_high is the frame energy inside ``gate_band`` and E_total the whole
frame energy. A mixture upsampled with a clean low-pass kernel has almost no
energy in the gate band, so the gate closes and the estimates collapse; any
resampler that puts energy up there reopens it. This makes the degradation
mechanism deterministic and cheap enough to train a kernel through.
"""

import csv
import dataclasses
import io
import math

import numpy as np

from sfresample import analysis, rng
from sfresample.analysis import fft, hann, ifft
from sfresample.resampler import Signal

DEFAULT_GATE_EPSILON = 5e-7
EXCITATION_RATIO = 1e-3
TONES_PER_SOURCE = 8
SOURCE_RMS = 0.15
NOISE_RATIO = 0.01
BAND_MARGIN = 0.1
FADE_S = 0.02


def gate_value(e_high, e_total, epsilon):
    """E_high / (E_high + epsilon * E_total), taken as 0 for a silent frame."""
    e_high = np.asarray(e_high, dtype=np.float64)
    den = e_high + epsilon * np.asarray(e_total, dtype=np.float64)
    return np.where(den > 0, e_high / np.where(den > 0, den, 1.0), 0.0)


@dataclasses.dataclass(frozen=True)
class ProxySeparator:
    trained_rate_hz: int
    bands: tuple  # ((f_lo, f_hi), ...) per source
    gate_band: tuple
    gate_epsilon: float = DEFAULT_GATE_EPSILON
    n_fft: int = 1024
    hop: int = 256
    seed: int = 0
    frozen: bool = True

    def __post_init__(self):
        nyq = self.trained_rate_hz / 2.0
        edges = sorted(self.bands)
        for (lo, hi) in edges:
            if not 0 <= lo < hi <= nyq:
                raise ValueError(f"band [{lo}, {hi}) outside [0, {nyq})")
        for (_, hi), (lo, _) in zip(edges[:-1], edges[1:]):
            if lo < hi:
                raise ValueError("source bands overlap")
        if not 0 <= self.gate_band[0] < self.gate_band[1] <= nyq:
            raise ValueError("gate band outside the spectrum")
        if not self.gate_epsilon > 0:
            raise ValueError("gate_epsilon must be positive")
        if self.n_fft < self.hop or self.n_fft & (self.n_fft - 1):
            raise ValueError("n_fft must be a power of two >= hop")

    @property
    def n_sources(self):
        return len(self.bands)

    def fingerprint(self):
        """Bytes identifying every field, for frozen-ness checks."""
        return repr(dataclasses.astuple(self)).encode()

    # -- STFT plumbing --------------------------------------------------------

    def _mask(self, lo, hi):
        k = np.arange(self.n_fft)
        f = np.minimum(k, self.n_fft - k) * (self.trained_rate_hz / self.n_fft)
        return ((f >= lo) & (f < hi)).astype(np.float64)

    def _layout(self, n):
        pad = self.n_fft // 2
        n_frames = 1 + -(-(n + 2 * pad - self.n_fft) // self.hop)
        total = (n_frames - 1) * self.hop + self.n_fft
        idx = self.hop * np.arange(n_frames)[:, None] + np.arange(self.n_fft)[None, :]
        win = hann(self.n_fft)
        wss = np.zeros(total)
        np.add.at(wss, idx, np.broadcast_to(win * win, idx.shape))
        return pad, total, idx, win, wss

    def _frames(self, data, pad, total, idx):
        buf = np.zeros((data.shape[0], total))
        buf[:, pad:pad + data.shape[1]] = data
        return buf[:, idx]

    def _overlap_add(self, frames, total, idx):
        out = np.zeros((frames.shape[0], total))
        for c in range(frames.shape[0]):
            out[c] = np.bincount(idx.ravel(), weights=frames[c].ravel(), minlength=total)
        return out

    def _check(self, mixture):
        if mixture.rate_hz != self.trained_rate_hz:
            raise ValueError(
                f"mixture at {mixture.rate_hz} Hz, separator trained at {self.trained_rate_hz} Hz")

    def _analyze(self, mixture):
        data = mixture.channels
        pad, total, idx, win, wss = self._layout(data.shape[1])
        frames = self._frames(data, pad, total, idx) * win
        spec = fft(frames)
        high = np.real(ifft(spec * self._mask(*self.gate_band)))
        e_high = np.sum(high * high, axis=-1)
        e_total = np.sum(frames * frames, axis=-1)
        den = e_high + self.gate_epsilon * e_total
        safe = np.where(den > 0, den, 1.0)
        gate = gate_value(e_high, e_total, self.gate_epsilon)
        return dict(pad=pad, total=total, idx=idx, win=win, wss=wss, frames=frames,
                    spec=spec, high=high, e_high=e_high, e_total=e_total, den=den,
                    safe=safe, gate=gate)

    # -- public ---------------------------------------------------------------

    def gate(self, mixture):
        """Per-frame gate values ``[channel, frame]``."""
        self._check(mixture)
        return self._analyze(mixture)["gate"]

    def separate(self, mixture):
        """One estimate per source band, each the length of the mixture."""
        self._check(mixture)
        a = self._analyze(mixture)
        n = len(mixture)
        norm = np.where(a["wss"] > 1e-12, a["wss"], 1.0)
        out = []
        for lo, hi in self.bands:
            band = np.real(ifft(a["spec"] * self._mask(lo, hi)))
            u = a["gate"][..., None] * a["win"] * band
            y = self._overlap_add(u, a["total"], a["idx"]) / norm
            out.append(Signal(y[:, a["pad"]:a["pad"] + n], mixture.rate_hz))
        return out

    def separate_vjp(self, mixture, grads):
        """Gradient with respect to the mixture of ``sum_i <grads[i], separate(mixture)[i]>``."""
        self._check(mixture)
        a = self._analyze(mixture)
        n = len(mixture)
        pad, total, idx, win = a["pad"], a["total"], a["idx"], a["win"]
        norm = np.where(a["wss"] > 1e-12, a["wss"], 1.0)
        gate = a["gate"][..., None]
        d_gate = np.zeros_like(a["gate"])
        d_spec = np.zeros_like(a["spec"])
        for (lo, hi), g_out in zip(self.bands, grads):
            g_out = np.atleast_2d(np.asarray(g_out, dtype=np.float64))
            buf = np.zeros((g_out.shape[0], total))
            buf[:, pad:pad + n] = g_out
            d_u = (buf / norm)[:, idx]
            mask = self._mask(lo, hi)
            band = np.real(ifft(a["spec"] * mask))
            d_gate += np.sum(d_u * win * band, axis=-1)
            # band-pass with a symmetric binary mask is self-adjoint
            d_spec += fft(gate * win * d_u) * mask
        d_frames = np.real(ifft(d_spec))
        den2 = np.where(a["den"] > 0, a["safe"] ** 2, np.inf)
        eps = self.gate_epsilon
        d_high = d_gate * eps * a["e_total"] / den2
        d_total = -d_gate * eps * a["e_high"] / den2
        # the gate-band projection is idempotent, so d(E_high)/d(frame) = 2 * high
        d_frames = d_frames + 2.0 * d_high[..., None] * a["high"] \
            + 2.0 * d_total[..., None] * a["frames"]
        d_buf = self._overlap_add(d_frames * win, total, idx)
        return d_buf[:, pad:pad + n]


class IdentitySeparator:
    """Passes the mixture through as a single source; used for kernel warm-up."""

    frozen = True

    def __init__(self, trained_rate_hz):
        self.trained_rate_hz = int(trained_rate_hz)

    def separate(self, mixture):
        return [mixture]

    def separate_vjp(self, mixture, grads):
        return np.atleast_2d(np.asarray(grads[0], dtype=np.float64))

    def fingerprint(self):
        return repr(self.trained_rate_hz).encode()


def build_proxy(trained_rate_hz=44100, n_sources=2, seed=0, band_fraction=0.4,
                gate_fraction=(0.55, 0.95), gate_epsilon=DEFAULT_GATE_EPSILON,
                n_fft=1024, hop=256):
    """Band plan: source i owns [i B, (i + 1) B) with B = nyquist * band_fraction / n_sources."""
    if n_sources < 2:
        raise ValueError("need at least two sources")
    nyq = trained_rate_hz / 2.0
    width = nyq * band_fraction / n_sources
    bands = tuple((i * width, (i + 1) * width) for i in range(n_sources))
    gate = (gate_fraction[0] * nyq, gate_fraction[1] * nyq)
    return ProxySeparator(int(trained_rate_hz), bands, gate, gate_epsilon, n_fft, hop, seed)


# -- synthetic data ----------------------------------------------------------


@dataclasses.dataclass(frozen=True, eq=False)
class SynthDataset:
    items: tuple  # ((mixture, (source, ...)), ...)
    rate_hz: int
    seed: int
    duration_s: float

    def __len__(self):
        return len(self.items)

    def split(self, n_first):
        return list(self.items[:n_first]), list(self.items[n_first:])


def _band_noise(gen, n, rate_hz, lo, hi):
    """White noise restricted to [lo, hi) Hz by a DFT mask, unit power."""
    white = gen.standard_normal(n)
    k = np.arange(n)
    f = np.minimum(k, n - k) * (rate_hz / n)
    shaped = np.real(ifft(fft(white) * ((f >= lo) & (f < hi))))
    power = np.mean(shaped ** 2)
    return shaped / math.sqrt(power) if power > 0 else shaped


def _fade(n, rate_hz):
    ramp = min(n // 2, int(FADE_S * rate_hz))
    env = np.ones(n)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[n - ramp:] = r[::-1]
    return env


def synth_item(proxy, rate_hz, n_samples, seed):
    """Mixture and sources for one item.

    Each source is eight random-phase tones inside its band (kept a 10% margin
    from the edges) plus band-limited noise 20 dB down, shaped by a slow random
    envelope and short fades. When the gate band fits below ``rate_hz / 2`` the
    sources also carry gate-band noise 30 dB down, so native-rate mixtures keep
    the gate open. The tonal content depends only on ``seed``, not on the rate.
    """
    gen = rng.generator(seed)
    t = np.arange(n_samples) / rate_hz
    fade = _fade(n_samples, rate_hz)
    nyq = rate_hz / 2.0
    params = []
    for lo, hi in proxy.bands:
        margin = BAND_MARGIN * (hi - lo)
        freqs = gen.uniform(lo + margin, hi - margin, TONES_PER_SOURCE)
        amps = gen.uniform(0.5, 1.0, TONES_PER_SOURCE)
        phases = gen.uniform(0, 2 * np.pi, TONES_PER_SOURCE)
        env_f = gen.uniform(0.5, 2.0)
        env_p = gen.uniform(0, 2 * np.pi)
        noise_seed = int(gen.integers(2 ** 62))
        params.append((lo, hi, margin, freqs, amps, phases, env_f, env_p, noise_seed))
    sources = []
    for lo, hi, margin, freqs, amps, phases, env_f, env_p, noise_seed in params:
        if hi - margin >= nyq:
            raise ValueError(f"source band [{lo}, {hi}) does not fit below {nyq} Hz")
        tones = np.sum(amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None]),
                       axis=0)
        tones *= SOURCE_RMS / math.sqrt(np.mean(tones ** 2))
        ngen = rng.generator(noise_seed)
        noise = _band_noise(ngen, n_samples, rate_hz, lo + margin, hi - margin)
        src = tones + math.sqrt(NOISE_RATIO) * SOURCE_RMS * noise
        if proxy.gate_band[1] <= nyq:
            air = _band_noise(ngen, n_samples, rate_hz, *proxy.gate_band)
            src = src + math.sqrt(EXCITATION_RATIO) * SOURCE_RMS * air
        env = (1.0 + 0.5 * np.sin(2 * np.pi * env_f * t + env_p)) * fade
        sources.append(Signal.mono(src * env, rate_hz))
    mixture = Signal.mono(np.sum([s.channels[0] for s in sources], axis=0), rate_hz)
    return mixture, tuple(sources)


def synth_dataset(rate_hz, n_items, n_sources, duration_s, seed, proxy=None, offset=0):
    """``n_items`` synthetic items; item i uses a seed derived from (seed, offset + i)."""
    if n_items <= 0 or duration_s <= 0 or rate_hz <= 0:
        raise ValueError("synth_dataset needs positive arguments")
    if proxy is None:
        proxy = build_proxy(44100, n_sources, seed)
    if proxy.n_sources != n_sources:
        raise ValueError("n_sources does not match the proxy band plan")
    n = int(round(duration_s * rate_hz))
    items = tuple(synth_item(proxy, rate_hz, n, rng.derive_seed(seed, rng.DATASET, offset + i))
                  for i in range(n_items))
    return SynthDataset(items, int(rate_hz), int(seed), float(duration_s))


# -- experiment --------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class SourceScore:
    source: int
    mean_sdr_db: float
    stderr_db: float
    n_items: int


@dataclasses.dataclass(frozen=True)
class ExperimentResult:
    method: str
    scores: tuple
    mean_gate: float

    @property
    def mean_sdr_db(self):
        return float(np.mean([s.mean_sdr_db for s in self.scores]))

    def rows(self):
        return [(self.method, s.source, s.mean_sdr_db, s.stderr_db, s.n_items)
                for s in self.scores]


def results_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "source", "mean_sdr_db", "stderr_db", "n_items"])
    for res in results:
        for method, source, mean, err, n in res.rows():
            w.writerow([method, source, repr(float(mean)), repr(float(err)), n])
    return buf.getvalue()


def _summarize(method, sdrs, gates):
    sdrs = np.asarray(sdrs)  # [item, source]
    n = sdrs.shape[0]
    scores = []
    for j in range(sdrs.shape[1]):
        col = sdrs[:, j]
        err = float(np.std(col, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        scores.append(SourceScore(j, float(np.mean(col)), err, n))
    return ExperimentResult(method, tuple(scores), float(np.mean(gates)))


def _fit(data, n):
    out = np.zeros((data.shape[0], n))
    m = min(n, data.shape[1])
    out[:, :m] = data[:, :m]
    return out


def run_experiment(proxy, dataset, spec):
    """Score one resampling method through upsample -> separate -> downsample.

    Noise-based methods draw fresh noise for every item from a seed derived
    from ``(spec.seed, item index)``.
    """
    from sfresample import kernels, resampler

    if dataset.rate_hz >= proxy.trained_rate_hz:
        raise ValueError("experiment needs a dataset below the trained rate")
    down = kernels.discretize_kernel(spec.kernel_cfg, proxy.trained_rate_hz, dataset.rate_hz)
    sdrs, gates = [], []
    for i, (mixture, sources) in enumerate(dataset.items):
        item_spec = dataclasses.replace(spec, seed=rng.derive_seed(spec.seed, rng.NOISE, i))
        up = resampler.resample(mixture, proxy.trained_rate_hz, item_spec)
        gates.append(float(np.mean(proxy.gate(up))))
        row = []
        for est, ref in zip(proxy.separate(up), sources):
            back = resampler.resample_with_table(est, down)
            row.append(analysis.sdr_db(_fit(back.channels, len(ref)), ref.channels))
        sdrs.append(row)
    return _summarize(spec.method.value, sdrs, gates)


def reference_sdr(proxy, dataset):
    """Scores at the trained rate with no resampling."""
    if dataset.rate_hz != proxy.trained_rate_hz:
        raise ValueError("reference needs a dataset at the trained rate")
    sdrs, gates = [], []
    for mixture, sources in dataset.items:
        gates.append(float(np.mean(proxy.gate(mixture))))
        sdrs.append([analysis.sdr_db(est.channels, ref.channels)
                     for est, ref in zip(proxy.separate(mixture), sources)])
    return _summarize("reference", sdrs, gates)


# -- configured runs ---------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Everything a proxy experiment or a kernel-training job depends on.

    The default band plan uses 12% of the trained-rate Nyquist band so that
    both sources (and a guard band) sit below the 4 kHz Nyquist of an 8 kHz
    input. ``train`` holds the optimizer settings; its rates are forced to
    ``input_rate_hz`` / ``trained_rate_hz``.
    """

    trained_rate_hz: int = 44100
    input_rate_hz: int = 8000
    n_sources: int = 2
    band_fraction: float = 0.12
    gate_epsilon: float = DEFAULT_GATE_EPSILON
    n_items: int = 8
    duration_s: float = 0.5
    seed: int = 0
    methods: tuple = ("conventional", "post_noise", "noisy_kernel", "trainable")
    snr_db: float = 20.0
    kernel_sigma: float = 1e-3
    window_length: int = 48
    kaiser_alpha: float = 4.1
    n_train: int = 8
    n_val: int = 4
    train_duration_s: float = 0.25
    warm_start_steps: int = 2000
    regularizer_only: bool = False
    train: object = None

    def __post_init__(self):
        from sfresample import resampler, trainable

        train = self.train
        if train is None:
            train = trainable.TrainConfig(max_epochs=30, seed=self.seed)
        if isinstance(train, dict):
            train = trainable.TrainConfig(**train)
        train = dataclasses.replace(train, rate_in_hz=int(self.input_rate_hz),
                                    rate_out_hz=int(self.trained_rate_hz))
        object.__setattr__(self, "train", train)
        methods = tuple(resampler.Method.parse(m).value for m in self.methods)
        object.__setattr__(self, "methods", methods)
        for name in ("n_items", "n_train", "n_val", "duration_s", "train_duration_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.warm_start_steps < 0:
            raise ValueError("warm_start_steps must be >= 0")

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        doc = dict(doc)
        if "methods" in doc:
            doc["methods"] = tuple(doc["methods"])
        if isinstance(doc.get("train"), dict):
            tnames = {f.name for f in dataclasses.fields(type(cls().train))}
            bad = sorted(set(doc["train"]) - tnames)
            if bad:
                raise ValueError(f"unknown train config keys: {', '.join(bad)}")
        return cls(**doc)

    def to_dict(self):
        doc = dataclasses.asdict(self)
        doc["methods"] = list(self.methods)
        return doc

    def kernel_cfg(self):
        from sfresample import kernels

        return kernels.KernelConfig(self.window_length, self.kaiser_alpha)

    def proxy(self):
        return build_proxy(self.trained_rate_hz, self.n_sources, self.seed,
                           band_fraction=self.band_fraction, gate_epsilon=self.gate_epsilon)

    def spec(self, method, kernel_params=None):
        from sfresample import resampler

        method = resampler.Method.parse(method)
        extra = {}
        if method is resampler.Method.POST_NOISE:
            extra["snr_db"] = self.snr_db
        elif method is resampler.Method.NOISY_KERNEL:
            extra["kernel_sigma"] = self.kernel_sigma
        elif method is resampler.Method.TRAINABLE:
            extra["kernel_params"] = kernel_params
        return resampler.ResampleSpec(method, self.kernel_cfg(), seed=self.seed, **extra)


def training_data(config, proxy=None):
    """``(train_items, val_items, model)`` for kernel training.

    Items come from seeds disjoint from the evaluation set. With
    ``regularizer_only`` the model is the identity and each target is the
    mixture taken through a conventional round trip, so the separation term
    vanishes for a windowed-sinc kernel and only the regularizer is left to
    drive the fit.
    """
    from sfresample import resampler

    proxy = proxy or config.proxy()
    n_total = config.n_train + config.n_val
    data = synth_dataset(config.input_rate_hz, n_total, config.n_sources,
                         config.train_duration_s, config.seed, proxy=proxy,
                         offset=config.n_items)
    items = list(data.items)
    model = proxy
    if config.regularizer_only:
        model = IdentitySeparator(config.trained_rate_hz)
        cfg = config.kernel_cfg()
        items = []
        for mix, _ in data.items:
            up = resampler.resample_conventional(mix, config.trained_rate_hz, cfg)
            back = resampler.resample_conventional(up, config.input_rate_hz, cfg)
            items.append((mix, (Signal(_fit(back.channels, len(mix)), mix.rate_hz),)))
    return items[:config.n_train], items[config.n_train:], model


def train_for_config(config, log=None):
    """Initialize, optionally warm-start, then train the kernel network."""
    from sfresample import trainable

    theta = trainable.init_params(rng.derive_seed(config.seed, rng.INIT), config.window_length)
    if config.warm_start_steps:
        theta = trainable.fit_to_windowed_sinc(theta, config.kernel_cfg(),
                                               steps=config.warm_start_steps)
    train_items, val_items, model = training_data(config)
    return trainable.train_kernel(train_items, val_items, model, config.train, init=theta,
                                  log=log)


def run_suite(config, kernel_params=None, log=None):
    """Reference plus one ``ExperimentResult`` per configured method.

    The native-rate reference reuses the evaluation seeds, so it separates the
    same tones the low-rate methods see. The trainable method trains a kernel
    first unless ``kernel_params`` is given.
    """
    if not config.methods:
        raise ValueError("no methods to run")
    proxy = config.proxy()
    low = synth_dataset(config.input_rate_hz, config.n_items, config.n_sources,
                        config.duration_s, config.seed, proxy=proxy)
    native = synth_dataset(config.trained_rate_hz, config.n_items, config.n_sources,
                           config.duration_s, config.seed, proxy=proxy)
    reference = reference_sdr(proxy, native)
    results = []
    for method in config.methods:
        params = None
        if method == "trainable":
            params = kernel_params
            if params is None:
                params, _ = train_for_config(config, log=log)
        results.append(run_experiment(proxy, low, config.spec(method, params)))
    return reference, results
