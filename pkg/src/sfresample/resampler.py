"""Kernel-based sampling-frequency conversion.

All four strategies share one engine, ``resample_with_table``, which applies
a polyphase kernel table to every channel. They differ only in the table
(clean, noise-perturbed, learned) or in noise added after the fact.
"""

import dataclasses
import enum
import math

import numpy as np

from sfresample import kernels, rng

DEFAULT_SNR_DB = 20.0
DEFAULT_KERNEL_SIGMA = 1e-3  # variance 1e-6

# Rows of the gather matrix processed at once.
_CHUNK_ELEMS = 1 << 21


@dataclasses.dataclass(frozen=True, eq=False)
class Signal:
    """Multichannel samples ``channels[c, n]`` at ``rate_hz``."""

    channels: np.ndarray
    rate_hz: int

    def __post_init__(self):
        data = np.atleast_2d(np.array(self.channels, dtype=np.float64))
        if data.ndim != 2:
            raise ValueError("channels must be a list of equal-length arrays")
        if not np.all(np.isfinite(data)):
            raise ValueError("samples must be finite")
        if int(self.rate_hz) != self.rate_hz or self.rate_hz <= 0:
            raise ValueError(f"rate_hz must be a positive integer, got {self.rate_hz}")
        data.setflags(write=False)
        object.__setattr__(self, "channels", data)
        object.__setattr__(self, "rate_hz", int(self.rate_hz))

    @classmethod
    def mono(cls, samples, rate_hz):
        return cls(np.asarray(samples, dtype=np.float64)[None, :], rate_hz)

    @property
    def n_channels(self):
        return self.channels.shape[0]

    def __len__(self):
        return self.channels.shape[1]

    def power(self):
        """Mean power over all channels and samples."""
        return float(np.mean(self.channels ** 2)) if self.channels.size else 0.0


class Method(str, enum.Enum):
    CONVENTIONAL = "conventional"
    POST_NOISE = "post_noise"
    NOISY_KERNEL = "noisy_kernel"
    TRAINABLE = "trainable"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).replace("-", "_"))
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown method {name!r}; choose from {choices}") from None


@dataclasses.dataclass(frozen=True)
class ResampleSpec:
    """A resampling method and its parameters.

    ``snr_db`` is only meaningful for post_noise, ``kernel_sigma`` (standard
    deviation, so sigma^2 = 1e-6 by default) for noisy_kernel and
    ``kernel_params`` for trainable.
    """

    method: Method = Method.CONVENTIONAL
    kernel_cfg: kernels.KernelConfig = kernels.KernelConfig()
    snr_db: float | None = None
    kernel_sigma: float | None = None
    seed: int = 0
    kernel_params: object = None

    def __post_init__(self):
        method = Method.parse(self.method)
        object.__setattr__(self, "method", method)
        if method is Method.POST_NOISE:
            if self.snr_db is None:
                object.__setattr__(self, "snr_db", DEFAULT_SNR_DB)
            if math.isnan(self.snr_db):
                raise ValueError("snr_db must not be NaN")
        elif self.snr_db is not None:
            raise ValueError("snr_db only applies to post_noise")
        if method is Method.NOISY_KERNEL:
            if self.kernel_sigma is None:
                object.__setattr__(self, "kernel_sigma", DEFAULT_KERNEL_SIGMA)
            if not self.kernel_sigma >= 0:
                raise ValueError("kernel_sigma must be nonnegative")
        elif self.kernel_sigma is not None:
            raise ValueError("kernel_sigma only applies to noisy_kernel")
        if method is Method.TRAINABLE and self.kernel_params is None:
            raise ValueError("trainable method needs kernel_params")


def output_length(n, rate_in_hz, rate_out_hz):
    """Number of output samples, floor(rate_out * n / rate_in), in integer arithmetic."""
    for v in (n, rate_in_hz, rate_out_hz):
        if int(v) != v or v <= 0:
            raise ValueError(f"output_length needs positive integers, got {v}")
    return (int(rate_out_hz) * int(n)) // int(rate_in_hz)


def output_positions(m_count, table):
    """Phase and integer input position of each output sample."""
    q = table.phases
    p = table.step
    mp = np.arange(m_count, dtype=np.int64) * p
    return mp % q, mp // q


def _gather_index(base, table):
    k = np.arange(table.taps_per_phase, dtype=np.int64)
    return base[:, None] + table.center_offset - k[None, :]


def _padded(data, table):
    # pad so every gathered index lands inside the buffer
    pad = table.taps_per_phase
    out = np.zeros((data.shape[0], data.shape[1] + 2 * pad))
    out[:, pad:pad + data.shape[1]] = data
    return out, pad


def _apply(data, table, m_count):
    phase, base = output_positions(m_count, table)
    padded, pad = _padded(data, table)
    out = np.empty((data.shape[0], m_count))
    rows = max(1, _CHUNK_ELEMS // table.taps_per_phase)
    for start in range(0, m_count, rows):
        sl = slice(start, min(start + rows, m_count))
        idx = _gather_index(base[sl], table) + pad
        taps = table.taps[phase[sl]]
        out[:, sl] = np.einsum("cmk,mk->cm", padded[:, idx], taps)
    return out


def resample_with_table(x, table):
    """Apply ``table`` to every channel; samples outside the signal count as zero."""
    if x.rate_hz != table.source_rate_hz:
        raise ValueError(
            f"signal rate {x.rate_hz} Hz does not match table source rate "
            f"{table.source_rate_hz} Hz")
    m_count = output_length(len(x), x.rate_hz, table.target_rate_hz) if len(x) else 0
    return Signal(_apply(x.channels, table, m_count), table.target_rate_hz)


def table_gradient(data, table, grad_out):
    """Gradient of sum(grad_out * y) with respect to the table taps.

    ``data`` is the input ``[channel, n]``; ``grad_out`` is ``dL/dy`` of shape
    ``[channel, m]``. Returns an array shaped like ``table.taps``.
    """
    m_count = grad_out.shape[1]
    phase, base = output_positions(m_count, table)
    padded, pad = _padded(data, table)
    n_taps = table.taps_per_phase
    k = np.arange(n_taps, dtype=np.int64)
    grad = np.zeros(table.taps.size)
    rows = max(1, _CHUNK_ELEMS // n_taps)
    for start in range(0, m_count, rows):
        sl = slice(start, min(start + rows, m_count))
        idx = _gather_index(base[sl], table) + pad
        contrib = np.einsum("cmk,cm->mk", padded[:, idx], grad_out[:, sl])
        flat = (phase[sl, None] * n_taps + k[None, :]).ravel()
        grad += np.bincount(flat, weights=contrib.ravel(), minlength=grad.size)
    return grad.reshape(table.taps.shape)


def input_gradient(n, table, grad_out):
    """Gradient of sum(grad_out * y) with respect to the input samples."""
    m_count = grad_out.shape[1]
    phase, base = output_positions(m_count, table)
    pad = table.taps_per_phase
    size = n + 2 * pad
    grad = np.zeros((grad_out.shape[0], size))
    rows = max(1, _CHUNK_ELEMS // table.taps_per_phase)
    for start in range(0, m_count, rows):
        sl = slice(start, min(start + rows, m_count))
        idx = (_gather_index(base[sl], table) + pad).ravel()
        taps = table.taps[phase[sl]]
        for c in range(grad_out.shape[0]):
            w = (grad_out[c, sl, None] * taps).ravel()
            grad[c] += np.bincount(idx, weights=w, minlength=size)
    return grad[:, pad:pad + n]


def resample_conventional(x, rate_out_hz, cfg=kernels.KernelConfig()):
    if rate_out_hz == x.rate_hz:
        # The same-rate kernel is a unit impulse; copying keeps the samples
        # bit-identical, including signed zeros that the tap sum would drop.
        return Signal(x.channels.copy(), x.rate_hz)
    table = kernels.discretize_kernel(cfg, x.rate_hz, rate_out_hz)
    return resample_with_table(x, table)


def calibrate_noise_variance(y, snr_db):
    """Noise variance giving ``snr_db`` against the mean power of ``y``."""
    power = y.power()
    if power == 0.0:
        raise ValueError("cannot calibrate noise against a silent signal")
    return power * 10.0 ** (-snr_db / 10.0)


def resample_post_noise(x, rate_out_hz, cfg=kernels.KernelConfig(),
                        snr_db=DEFAULT_SNR_DB, seed=0):
    """Conventional resampling followed by SNR-calibrated Gaussian noise.

    All channels share one variance, computed from the joint power of the
    resampled signal, and receive independent draws. ``snr_db=inf`` adds none.
    """
    y = resample_conventional(x, rate_out_hz, cfg)
    if math.isinf(snr_db) and snr_db > 0:
        return y
    variance = calibrate_noise_variance(y, snr_db)
    noise = rng.generator(seed).standard_normal(y.channels.shape)
    return Signal(y.channels + math.sqrt(variance) * noise, y.rate_hz)


def resample_noisy_kernel(x, rate_out_hz, cfg=kernels.KernelConfig(),
                          sigma=DEFAULT_KERNEL_SIGMA, seed=0):
    """Resample with a windowed-sinc table whose taps carry N(0, sigma^2) noise.

    One noisy table is drawn per call and shared by all channels.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    table = kernels.discretize_kernel(cfg, x.rate_hz, rate_out_hz)
    return resample_with_table(x, kernels.add_kernel_noise(table, sigma, seed))


def resample(x, rate_out_hz, spec):
    """Dispatch on ``spec.method``."""
    if spec.method is Method.CONVENTIONAL:
        return resample_conventional(x, rate_out_hz, spec.kernel_cfg)
    if spec.method is Method.POST_NOISE:
        return resample_post_noise(x, rate_out_hz, spec.kernel_cfg, spec.snr_db, spec.seed)
    if spec.method is Method.NOISY_KERNEL:
        return resample_noisy_kernel(x, rate_out_hz, spec.kernel_cfg, spec.kernel_sigma, spec.seed)
    from sfresample import trainable

    table = trainable.export_kernel(spec.kernel_params, x.rate_hz, rate_out_hz, spec.kernel_cfg)
    return resample_with_table(x, table)
