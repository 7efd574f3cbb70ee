"""Minimal RIFF/WAVE reader and writer.

Supports PCM 16-bit, PCM 24-bit and IEEE float32, any channel count
(``WAVE_FORMAT_EXTENSIBLE`` headers are read too). Samples are returned as
float64 in [-1, 1) for PCM; float32 data round-trips bit-exactly.
"""

import struct

import numpy as np

from sfresample.resampler import Signal

PCM = 1
IEEE_FLOAT = 3
EXTENSIBLE = 0xFFFE

FORMATS = ("pcm16", "pcm24", "float32")


class WavError(ValueError):
    pass


def _chunks(data):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        yield cid, data[pos + 8:pos + 8 + size]
        pos += 8 + size + (size & 1)


def read_wav(path):
    """Return ``(Signal, sample_format)``; format is one of ``FORMATS``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    fmt = body = None
    for cid, payload in _chunks(data):
        if cid == b"fmt ":
            fmt = payload
        elif cid == b"data":
            body = payload
    if fmt is None or body is None or len(fmt) < 16:
        raise WavError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels < 1 or block_align != channels * (bits // 8):
        raise WavError(f"{path}: inconsistent fmt chunk")
    n = len(body) // block_align
    body = body[:n * block_align]
    if tag == PCM and bits == 16:
        samples = np.frombuffer(body, dtype="<i2").astype(np.float64) / 32768.0
        kind = "pcm16"
    elif tag == PCM and bits == 24:
        raw = np.frombuffer(body, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        samples = ints.astype(np.float64) / float(1 << 23)
        kind = "pcm24"
    elif tag == IEEE_FLOAT and bits == 32:
        samples = np.frombuffer(body, dtype="<f4").astype(np.float64)
        kind = "float32"
    else:
        raise WavError(f"{path}: unsupported encoding (format {tag}, {bits} bits)")
    return Signal(samples.reshape(n, channels).T, rate), kind


def _encode(channels, kind):
    inter = np.ascontiguousarray(channels.T).reshape(-1)
    if kind == "float32":
        return inter.astype("<f4").tobytes(), IEEE_FLOAT, 32
    if kind == "pcm16":
        q = np.clip(np.round(inter * 32768.0), -32768, 32767).astype("<i2")
        return q.tobytes(), PCM, 16
    if kind == "pcm24":
        q = np.clip(np.round(inter * float(1 << 23)), -(1 << 23), (1 << 23) - 1).astype(np.int32)
        u = (q & 0xFFFFFF).astype("<u4")
        b = u.view(np.uint8).reshape(-1, 4)[:, :3]
        return np.ascontiguousarray(b).tobytes(), PCM, 24
    raise WavError(f"unknown sample format {kind!r}; choose from {', '.join(FORMATS)}")


def write_wav(path, signal, kind="float32"):
    """Write ``signal`` as ``kind`` (no dithering; PCM clips to full scale)."""
    body, tag, bits = _encode(signal.channels, kind)
    n_ch = signal.n_channels
    block = n_ch * bits // 8
    fmt = struct.pack("<HHIIHH", tag, n_ch, signal.rate_hz, signal.rate_hz * block, block, bits)
    chunks = [b"fmt ", struct.pack("<I", len(fmt)), fmt]
    if tag == IEEE_FLOAT:
        # float data wants a fact chunk with the frame count
        chunks += [b"fact", struct.pack("<II", 4, len(signal))]
    chunks += [b"data", struct.pack("<I", len(body)), body]
    if len(body) & 1:
        chunks.append(b"\x00")
    payload = b"WAVE" + b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(payload)) + payload)
