"""Spectral measurements and separation metrics."""

import csv
import dataclasses
import io

import numpy as np

SDR_CAP_DB = 300.0
SPEC_FLOOR_DB = -120.0
WELCH_SEGMENTS = 8
WELCH_THRESHOLD = 8192


def _bit_reverse(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_pow2(x):
    n = x.shape[-1]
    if n == 1:
        return x.astype(np.complex128)
    out = x[..., _bit_reverse(n)].astype(np.complex128)
    lead = out.shape[:-1]
    size = 2
    while size <= n:
        half = size // 2
        blocks = out.reshape(*lead, n // size, size)
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        size *= 2
    return out


def _ifft_pow2(x):
    n = x.shape[-1]
    return np.conj(_fft_pow2(np.conj(x))) / n


def _bluestein(x):
    n = x.shape[-1]
    k = np.arange(n)
    # k^2 mod 2n keeps the chirp phase accurate for large n
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1 << (2 * n - 1).bit_length()
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:][::-1])
    conv = _ifft_pow2(_fft_pow2(a) * _fft_pow2(b))
    return conv[..., :n] * chirp


def fft(x):
    """DFT along the last axis: radix-2 for powers of two, Bluestein otherwise."""
    x = np.asarray(x)
    n = x.shape[-1]
    if n < 1:
        raise ValueError("dft needs at least one sample")
    if n & (n - 1) == 0:
        return _fft_pow2(x)
    return _bluestein(x.astype(np.complex128))


dft = fft


def ifft(spec):
    spec = np.asarray(spec, dtype=np.complex128)
    return np.conj(fft(np.conj(spec))) / spec.shape[-1]


def hann(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _channels(x):
    """Accept a Signal or a bare array; return (2-D array, rate or None)."""
    if hasattr(x, "channels"):
        return np.atleast_2d(np.asarray(x.channels, dtype=np.float64)), x.rate_hz
    return np.atleast_2d(np.asarray(x, dtype=np.float64)), None


@dataclasses.dataclass(frozen=True)
class SpectralReport:
    band_edges_hz: tuple
    band_energy: tuple
    band_energy_db: tuple
    total_energy: float
    n_fft: int
    window: str
    segment_length: int
    hop: int

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["f_lo_hz", "f_hi_hz", "energy", "energy_db"])
        for (lo, hi), e, edb in zip(self.band_edges_hz, self.band_energy, self.band_energy_db):
            w.writerow([repr(float(lo)), repr(float(hi)), repr(float(e)), repr(float(edb))])
        return buf.getvalue()


def power_spectrum(x, rate_hz=None):
    """One-sided Hann-windowed energy spectrum summed over channels.

    Signals up to 8192 samples use a single segment; longer ones use Welch
    averaging over 8 half-overlapping segments, rescaled to the full length.
    Bins sum to the windowed signal energy (Parseval).

    Returns ``(freqs_hz, energy, n_fft, segment_length, hop)``.
    """
    data, sig_rate = _channels(x)
    rate = rate_hz if rate_hz is not None else sig_rate
    if rate is None:
        raise ValueError("sampling rate required")
    n = data.shape[-1]
    if n > WELCH_THRESHOLD:
        seg = (2 * n) // (WELCH_SEGMENTS + 1)
        hop = seg // 2
        starts = hop * np.arange(WELCH_SEGMENTS)
    else:
        seg, hop, starts = n, n, np.array([0])
    win = hann(seg) if seg > 1 else np.ones(1)
    frames = np.stack([data[:, s:s + seg] for s in starts], axis=1) * win
    spec = fft(frames)
    energy = np.abs(spec) ** 2 / seg
    half = seg // 2 + 1
    one = energy[..., :half].copy()
    # fold negative-frequency bins onto their positive twins
    if seg % 2 == 0:
        one[..., 1:half - 1] *= 2.0
    else:
        one[..., 1:] *= 2.0
    one = one.sum(axis=0).mean(axis=0)
    if len(starts) > 1:
        one = one * (n / seg)
    freqs = np.arange(half) * (rate / seg)
    return freqs, one, seg, seg, hop


def band_energy(x, f_lo, f_hi, rate_hz=None):
    """Energy in [f_lo, f_hi) Hz; ``f_hi`` equal to Nyquist includes the Nyquist bin."""
    data, sig_rate = _channels(x)
    rate = rate_hz if rate_hz is not None else sig_rate
    if not 0 <= f_lo < f_hi <= rate / 2.0:
        raise ValueError(f"band [{f_lo}, {f_hi}) outside [0, {rate / 2.0}]")
    freqs, energy, *_ = power_spectrum(data, rate)
    sel = (freqs >= f_lo) & (freqs < f_hi)
    if f_hi >= rate / 2.0:
        sel |= freqs >= f_lo
    return float(np.sum(energy[sel]))


def spectral_report(x, edges_hz, rate_hz=None):
    """Band energies over consecutive edges ``[e0, e1), [e1, e2), ...``."""
    data, sig_rate = _channels(x)
    rate = rate_hz if rate_hz is not None else sig_rate
    freqs, energy, n_fft, seg, hop = power_spectrum(data, rate)
    edges = [float(e) for e in edges_hz]
    bands, values = [], []
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        sel = (freqs >= lo) & (freqs < hi)
        if i == len(edges) - 2 and hi >= rate / 2.0:
            sel |= freqs >= lo
        bands.append((lo, hi))
        values.append(float(np.sum(energy[sel])))
    with np.errstate(divide="ignore"):
        dbs = tuple(float(v) for v in 10.0 * np.log10(np.maximum(values, 1e-300)))
    return SpectralReport(tuple(bands), tuple(values), dbs, float(np.sum(energy)),
                          n_fft, "hann", seg, hop)


def snr_db(clean, noisy):
    """10 log10(|clean|^2 / |noisy - clean|^2); +inf when they coincide."""
    c, _ = _channels(clean)
    d, _ = _channels(noisy)
    if c.shape != d.shape:
        raise ValueError(f"shape mismatch {c.shape} vs {d.shape}")
    err = float(np.sum((d - c) ** 2))
    if err == 0.0:
        return float("inf")
    return 10.0 * np.log10(float(np.sum(c ** 2)) / err)


def sdr_db(est, ref):
    """Simplified source-to-distortion ratio, capped at 300 dB."""
    e, _ = _channels(est)
    r, _ = _channels(ref)
    if e.shape != r.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {r.shape}")
    ref_energy = float(np.sum(r ** 2))
    if ref_energy == 0.0:
        raise ValueError("reference signal is silent")
    err = float(np.sum((r - e) ** 2))
    if err == 0.0:
        return SDR_CAP_DB
    return min(10.0 * np.log10(ref_energy / err), SDR_CAP_DB)


@dataclasses.dataclass(frozen=True)
class Spectrogram:
    magnitude_db: np.ndarray  # [frame, bin]
    frame_rate_hz: float
    bin_hz: float
    n_fft: int
    hop: int

    @property
    def freqs_hz(self):
        return np.arange(self.magnitude_db.shape[1]) * self.bin_hz

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "time_s", "freq_hz", "magnitude_db"])
        freqs = self.freqs_hz
        for f, row in enumerate(self.magnitude_db):
            t = f / self.frame_rate_hz
            for hz, v in zip(freqs, row):
                w.writerow([f, repr(float(t)), repr(float(hz)), repr(float(v))])
        return buf.getvalue()


def spectrogram(x, n_fft=1024, hop=256, rate_hz=None):
    """Hann-windowed magnitude STFT in dB (channels averaged in power)."""
    if n_fft < hop or hop < 1:
        raise ValueError("need n_fft >= hop >= 1")
    data, sig_rate = _channels(x)
    rate = rate_hz if rate_hz is not None else sig_rate
    n = data.shape[-1]
    n_frames = 1 + max(0, -(-(n - n_fft) // hop))
    padded = np.zeros((data.shape[0], (n_frames - 1) * hop + n_fft))
    padded[:, :n] = data
    idx = hop * np.arange(n_frames)[:, None] + np.arange(n_fft)[None, :]
    frames = padded[:, idx] * hann(n_fft)
    spec = fft(frames)[..., : n_fft // 2 + 1]
    power = np.mean(np.abs(spec) ** 2, axis=0)
    with np.errstate(divide="ignore"):
        db = np.maximum(10.0 * np.log10(power), SPEC_FLOOR_DB)
    return Spectrogram(db, rate / hop, rate / n_fft, n_fft, hop)


def response_comparison_csv(freqs_hz, columns):
    """Plot-ready CSV of frequency responses: freq_hz, <name>_db, ..."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(columns)
    w.writerow(["freq_hz"] + [f"{name}_db" for name in names])
    for i, f in enumerate(freqs_hz):
        w.writerow([repr(float(f))] + [repr(float(columns[name][i])) for name in names])
    return buf.getvalue()
