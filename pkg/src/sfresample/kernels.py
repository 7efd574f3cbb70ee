"""Windowed-sinc interpolation kernels and their polyphase tables.

A kernel table stores the taps needed by the resampling sum

    y[m] = sum_n x[n] k(m / F_out - n / F_in)

grouped by the fractional position of each output instant between input
samples. With g = gcd(F_in, F_out), P = F_in / g and Q = F_out / g, output
sample m sits at input position m * P / Q = a + b / Q, where a is the integer
part and b in [0, Q) selects the phase. Row b of the table holds the kernel at
offsets ``u = j + b / Q`` input samples for j = -W..W, so that

    y[m] = sum_k taps[b, k] * x[a + W - k].
"""

import dataclasses
import json
import math
from fractions import Fraction

import numpy as np

from sfresample import rng

DB_FLOOR = -200.0


@dataclasses.dataclass(frozen=True)
class KernelConfig:
    """Parameters of the Kaiser-windowed sinc kernel.

    Attributes:
      window_length: L, the window support in periods of the window rate.
      kaiser_alpha: Kaiser shape parameter.
      cutoff_hz: sinc cutoff in Hz. ``None`` selects min(F_in, F_out) / 2 when
        the kernel is discretized for a rate pair.
      rolloff: multiplier applied to the cutoff.
    """

    window_length: int = 48
    kaiser_alpha: float = 4.1
    cutoff_hz: float | None = None
    rolloff: float = 1.0

    def __post_init__(self):
        if self.window_length < 2 or self.window_length % 2:
            raise ValueError(f"window_length must be even and >= 2, got {self.window_length}")
        if self.kaiser_alpha < 0:
            raise ValueError(f"kaiser_alpha must be nonnegative, got {self.kaiser_alpha}")
        if self.cutoff_hz is not None and not self.cutoff_hz > 0:
            raise ValueError(f"cutoff_hz must be positive, got {self.cutoff_hz}")
        if not 0 < self.rolloff <= 1:
            raise ValueError(f"rolloff must lie in (0, 1], got {self.rolloff}")


@dataclasses.dataclass(frozen=True, eq=False)
class KernelTable:
    """Polyphase kernel taps, ``taps[phase, tap]``."""

    taps: np.ndarray
    source_rate_hz: int
    target_rate_hz: int
    center_offset: int

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64)
        if taps.ndim != 2:
            raise ValueError("taps must be a 2-D [phase][tap] array")
        if not np.all(np.isfinite(taps)):
            raise ValueError("kernel taps must be finite")
        g = math.gcd(self.source_rate_hz, self.target_rate_hz)
        if taps.shape[0] != self.target_rate_hz // g:
            raise ValueError(
                f"expected {self.target_rate_hz // g} phases, got {taps.shape[0]}")
        if not 0 <= self.center_offset < taps.shape[1]:
            raise ValueError("center_offset out of range")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @property
    def phases(self):
        return self.taps.shape[0]

    @property
    def taps_per_phase(self):
        return self.taps.shape[1]

    @property
    def step(self):
        """Input samples advanced per output sample, as the integer numerator P."""
        return self.source_rate_hz // math.gcd(self.source_rate_hz, self.target_rate_hz)

    def with_taps(self, taps):
        return KernelTable(taps, self.source_rate_hz, self.target_rate_hz, self.center_offset)

    def flatten(self):
        """Time-ordered taps at rate ``phases * source_rate_hz``.

        Entry ``i`` sits at offset ``(i - center_offset * phases) / phases``
        input samples.
        """
        return np.ascontiguousarray(self.taps.T).reshape(-1)

    def to_json(self):
        doc = {
            "source_rate_hz": self.source_rate_hz,
            "target_rate_hz": self.target_rate_hz,
            "phases": self.phases,
            "taps_per_phase": self.taps_per_phase,
            "center_offset": self.center_offset,
            "taps": [float(v) for v in self.taps.reshape(-1)],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        taps = np.asarray(doc["taps"], dtype=np.float64)
        shape = (int(doc["phases"]), int(doc["taps_per_phase"]))
        if taps.size != shape[0] * shape[1]:
            raise ValueError("taps length does not match phases * taps_per_phase")
        return cls(taps.reshape(shape), int(doc["source_rate_hz"]),
                   int(doc["target_rate_hz"]), int(doc["center_offset"]))


@dataclasses.dataclass(frozen=True)
class FrequencyResponse:
    freqs_hz: np.ndarray
    magnitude_db: np.ndarray
    n_fft: int


def sinc(t):
    """Normalized sinc, sin(pi t) / (pi t), exactly 0 at nonzero integers."""
    t = np.asarray(t, dtype=np.float64)
    out = np.ones_like(t)
    nz = t != 0
    pt = np.pi * t[nz]
    out[nz] = np.sin(pt) / pt
    out[nz & (t == np.round(t))] = 0.0
    return out if out.ndim else float(out)


def bessel_i0(x, rtol=1e-12):
    """Zeroth-order modified Bessel function of the first kind by power series."""
    x = np.asarray(x, dtype=np.float64)
    q = (x / 2.0) ** 2
    term = np.ones_like(x)
    total = np.ones_like(x)
    k = 0
    while True:
        k += 1
        term = term * q / (k * k)
        total = total + term
        if np.all(term <= rtol * total):
            break
    return total if total.ndim else float(total)


def _kaiser_from_ratio(ratio, alpha):
    # ratio = 2 * rate * t / L, in [-1, 1] inside the support
    ratio = np.asarray(ratio, dtype=np.float64)
    inside = np.abs(ratio) <= 1.0
    out = np.zeros_like(ratio)
    arg = alpha * np.sqrt(1.0 - ratio[inside] ** 2)
    out[inside] = bessel_i0(arg) / bessel_i0(alpha)
    return out


def kaiser_window(t, L, rate_hz, alpha):
    """Kaiser window supported on |t| <= L / (2 rate_hz) seconds."""
    if L < 2 or rate_hz <= 0:
        raise ValueError("kaiser_window needs L >= 2 and rate_hz > 0")
    t = np.asarray(t, dtype=np.float64)
    out = _kaiser_from_ratio(2.0 * rate_hz * t / L, alpha)
    return out if out.ndim else float(out)


def windowed_sinc_kernel(t, cfg, rate_hz):
    """z(t) * sinc(2 * rolloff * cutoff * t); cutoff defaults to rate_hz / 2."""
    cutoff = cfg.cutoff_hz if cfg.cutoff_hz is not None else rate_hz / 2.0
    t = np.asarray(t, dtype=np.float64)
    out = (kaiser_window(t, cfg.window_length, rate_hz, cfg.kaiser_alpha)
           * sinc(2.0 * cfg.rolloff * cutoff * t))
    return out if np.ndim(out) else float(out)


def _check_rates(rate_in_hz, rate_out_hz):
    for r in (rate_in_hz, rate_out_hz):
        if int(r) != r or r <= 0:
            raise ValueError(f"sampling rates must be positive integers, got {r}")
    return int(rate_in_hz), int(rate_out_hz)


def table_grid(rate_in_hz, rate_out_hz, half_width):
    """Integer numerators of the tap offsets, in units of 1 / (Q * F_in) seconds.

    Returns an array ``num[phase, tap]`` with ``num = j * Q + phase`` for
    ``j = -half_width..half_width``; the offset in input samples is ``num / Q``.
    """
    q = rate_out_hz // math.gcd(rate_in_hz, rate_out_hz)
    j = np.arange(-half_width, half_width + 1, dtype=np.int64)
    return j[None, :] * q + np.arange(q, dtype=np.int64)[:, None]


def table_offsets_seconds(rate_in_hz, rate_out_hz, half_width):
    """Tap offsets t (seconds) on the polyphase grid, shape [phase, tap]."""
    rate_in_hz, rate_out_hz = _check_rates(rate_in_hz, rate_out_hz)
    q = rate_out_hz // math.gcd(rate_in_hz, rate_out_hz)
    return table_grid(rate_in_hz, rate_out_hz, half_width) / float(q * rate_in_hz)


def support_half_width(window_length, rate_in_hz, window_rate_hz):
    """Taps on each side of the center needed to cover |t| <= L / (2 window_rate)."""
    return math.ceil(Fraction(window_length * rate_in_hz, 2) / Fraction(window_rate_hz))


def discretize_kernel(cfg, rate_in_hz, rate_out_hz):
    """Sample the windowed-sinc kernel on the polyphase grid for a rate pair.

    The sinc cutoff is ``rolloff * min(F_in, F_out) / 2`` unless the config
    pins ``cutoff_hz``; the window spans L zero crossings of the unrolled sinc.
    Taps carry the gain ``2 * rolloff * cutoff / F_in``, which is 1 for
    upsampling with rolloff 1 and keeps unit passband gain when downsampling.
    """
    rate_in_hz, rate_out_hz = _check_rates(rate_in_hz, rate_out_hz)
    g = math.gcd(rate_in_hz, rate_out_hz)
    q = rate_out_hz // g
    if cfg.cutoff_hz is None:
        window_rate = Fraction(min(rate_in_hz, rate_out_hz))
    else:
        window_rate = Fraction(cfg.cutoff_hz) * 2
    half_width = support_half_width(cfg.window_length, rate_in_hz, window_rate)
    num = table_grid(rate_in_hz, rate_out_hz, half_width)

    # offset in window-rate periods: num * window_rate / (Q * F_in), exact when
    # the rate ratio is integral so sinc zeros land on exact integers
    wr_num, wr_den = window_rate.numerator, window_rate.denominator
    periods = (num * wr_num).astype(np.float64) / float(q * rate_in_hz * wr_den)
    window = _kaiser_from_ratio(2.0 * periods / cfg.window_length, cfg.kaiser_alpha)
    taps = window * sinc(cfg.rolloff * periods)
    gain = cfg.rolloff * float(window_rate) / rate_in_hz
    if gain != 1.0:
        taps = taps * gain
    return KernelTable(taps, rate_in_hz, rate_out_hz, half_width)


def add_kernel_noise(table, sigma, seed):
    """Perturb every tap by independent N(0, sigma^2) noise."""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return table
    noise = rng.generator(seed).standard_normal(table.taps.shape)
    return table.with_taps(table.taps + sigma * noise)


def _check_nfft(table, n_fft):
    total = table.phases * table.taps_per_phase
    if n_fft < total or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two >= {total}, got {n_fft}")


def response_nfft(table):
    """Smallest power of two holding the flattened table."""
    total = table.phases * table.taps_per_phase
    return 1 << (total - 1).bit_length()


def kernel_spectrum(table, n_fft):
    """Complex DFT of the flattened table, normalized to unit passband gain.

    Returns ``(freqs_hz, spectrum)`` restricted to [0, F_out / 2]. The flattened
    taps are sampled at ``phases * F_in`` Hz; dividing by ``phases`` makes the
    DC gain of a unit-gain kernel equal to one.
    """
    from sfresample.analysis import fft

    _check_nfft(table, n_fft)
    flat = np.zeros(n_fft)
    flat[:table.phases * table.taps_per_phase] = table.flatten()
    spec = fft(flat)[: n_fft // 2 + 1] / table.phases
    fs = table.phases * table.source_rate_hz
    freqs = np.arange(n_fft // 2 + 1) * (fs / n_fft)
    keep = freqs <= table.target_rate_hz / 2.0
    return freqs[keep], spec[keep]


def kernel_frequency_response(table, n_fft=None):
    """Magnitude response of a kernel table in dB over [0, F_out / 2]."""
    if n_fft is None:
        n_fft = response_nfft(table)
    freqs, spec = kernel_spectrum(table, n_fft)
    mag = np.abs(spec)
    with np.errstate(divide="ignore"):
        db = np.maximum(20.0 * np.log10(mag), DB_FLOOR)
    return FrequencyResponse(freqs, db, n_fft)


def band_mean_magnitude(response, f_lo, f_hi):
    """Mean linear magnitude of ``response`` over bins in [f_lo, f_hi]."""
    sel = (response.freqs_hz >= f_lo) & (response.freqs_hz <= f_hi)
    return float(np.mean(10.0 ** (response.magnitude_db[sel] / 20.0)))
