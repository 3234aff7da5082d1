"""Waveform <-> complex spectrogram transforms, channel packing and WAV I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MultichannelWaveform",
    "StftConfig",
    "ComplexSpectrogram",
    "hann_window",
    "stft",
    "istft",
    "istft_adjoint",
    "pack_input",
    "unpack_output",
    "unpack_output_adjoint",
    "read_wav",
    "write_wav",
    "WavFormatError",
]


class WavFormatError(ValueError):
    """Raised for malformed or unsupported RIFF/WAVE content."""


@dataclass
class MultichannelWaveform:
    samples: np.ndarray  # (M, N)
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise ValueError(f"samples must be (channels, n_samples), got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples contain non-finite values")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = s
        self.sample_rate = int(self.sample_rate)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (COLA at hop n/2)."""
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


@dataclass
class StftConfig:
    frame_len: int = 256
    hop_len: int = 128
    window: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.frame_len = int(self.frame_len)
        self.hop_len = int(self.hop_len)
        if self.frame_len < 2 or self.frame_len % 2:
            raise ValueError(f"frame_len must be even and >= 2, got {self.frame_len}")
        if not 1 <= self.hop_len <= self.frame_len:
            raise ValueError(f"hop_len must be in [1, frame_len], got {self.hop_len}")
        if self.window is None:
            self.window = hann_window(self.frame_len)
        self.window = np.asarray(self.window, dtype=np.float64)
        if self.window.shape != (self.frame_len,):
            raise ValueError("window length must equal frame_len")
        if not self.is_cola():
            raise ValueError("window does not satisfy constant overlap-add at hop_len")

    @classmethod
    def from_ms(cls, sample_rate: int, frame_ms: float = 32.0, hop_ms: float = 16.0):
        return cls(int(round(sample_rate * frame_ms / 1000)), int(round(sample_rate * hop_ms / 1000)))

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    def overlap_sum(self, power: int = 1) -> np.ndarray:
        """One period (hop_len samples) of sum_k w^power(n - k*hop)."""
        acc = np.zeros(self.hop_len)
        w = self.window**power
        for start in range(0, self.frame_len, self.hop_len):
            seg = w[start:start + self.hop_len]
            acc[: len(seg)] += seg
        return acc

    def is_cola(self, rtol: float = 1e-6) -> bool:
        s = self.overlap_sum(1)
        return bool(np.ptp(s) <= rtol * np.max(np.abs(s)))

    def n_frames(self, n_samples: int) -> int:
        return int(np.ceil(max(n_samples - self.frame_len, 0) / self.hop_len)) + 1

    def to_dict(self) -> dict:
        return {"frame_len": self.frame_len, "hop_len": self.hop_len, "window": "hann"}

    @classmethod
    def from_dict(cls, d: dict) -> "StftConfig":
        if d.get("window", "hann") != "hann":
            raise ValueError(f"unsupported window {d['window']!r}")
        return cls(d["frame_len"], d["hop_len"])


@dataclass
class ComplexSpectrogram:
    data: np.ndarray  # (C, T, F) complex
    frame_len: int
    hop_len: int
    sample_rate: int
    n_samples: int | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"spectrogram must be (C, T, F), got {self.data.shape}")
        if self.data.shape[2] != self.frame_len // 2 + 1:
            raise ValueError(
                f"F={self.data.shape[2]} inconsistent with frame_len={self.frame_len}"
            )

    def config(self) -> StftConfig:
        return StftConfig(self.frame_len, self.hop_len)


def _frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """(..., N) -> (..., T, frame_len), zero padding the tail."""
    n = x.shape[-1]
    t = cfg.n_frames(n)
    total = (t - 1) * cfg.hop_len + cfg.frame_len
    if total > n:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (total - n,), dtype=x.dtype)], axis=-1)
    idx = np.arange(t)[:, None] * cfg.hop_len + np.arange(cfg.frame_len)[None, :]
    return x[..., idx]


def stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Array-level STFT: (..., N) real -> (..., T, F) complex."""
    if x.shape[-1] < cfg.frame_len:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than one frame ({cfg.frame_len})")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite values")
    frames = _frame_signal(x, cfg) * cfg.window.astype(x.dtype, copy=False)
    return np.fft.rfft(frames, axis=-1)


def _synthesis_norm(cfg: StftConfig, t: int) -> np.ndarray:
    total = (t - 1) * cfg.hop_len + cfg.frame_len
    denom = np.zeros(total)
    w2 = cfg.window**2
    for k in range(t):
        denom[k * cfg.hop_len:k * cfg.hop_len + cfg.frame_len] += w2
    # zero-weight edge samples map to zero instead of dividing by zero
    return np.where(denom > 1e-10, 1.0 / np.maximum(denom, 1e-10), 0.0)


def istft_array(spec: np.ndarray, cfg: StftConfig, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse: (..., T, F) complex -> (..., length) real."""
    if spec.shape[-1] != cfg.n_bins:
        raise ValueError(f"F={spec.shape[-1]} inconsistent with frame_len={cfg.frame_len}")
    t = spec.shape[-2]
    frames = np.fft.irfft(spec, n=cfg.frame_len, axis=-1)
    dtype = frames.dtype
    frames = frames * cfg.window.astype(dtype, copy=False)
    total = (t - 1) * cfg.hop_len + cfg.frame_len
    out = np.zeros(spec.shape[:-2] + (total,), dtype=dtype)
    for k in range(t):
        out[..., k * cfg.hop_len:k * cfg.hop_len + cfg.frame_len] += frames[..., k, :]
    out *= _synthesis_norm(cfg, t).astype(dtype, copy=False)
    if length is None:
        return out
    if length <= total:
        return out[..., :length]
    pad = np.zeros(out.shape[:-1] + (length - total,), dtype=dtype)
    return np.concatenate([out, pad], axis=-1)


def istft_adjoint(grad: np.ndarray, cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Gradient of a real loss w.r.t. (Re, Im) of the istft input, returned as Re + j*Im.

    ``grad`` is dLoss/d(output samples), shape (..., length).
    """
    total = (n_frames - 1) * cfg.hop_len + cfg.frame_len
    length = grad.shape[-1]
    if length < total:
        grad = np.concatenate([grad, np.zeros(grad.shape[:-1] + (total - length,), grad.dtype)], -1)
    else:
        grad = grad[..., :total]
    dtype = grad.dtype
    g = grad * _synthesis_norm(cfg, n_frames).astype(dtype, copy=False)
    idx = np.arange(n_frames)[:, None] * cfg.hop_len + np.arange(cfg.frame_len)[None, :]
    gframes = g[..., idx] * cfg.window.astype(dtype, copy=False)
    n = cfg.frame_len
    scale = np.full(cfg.n_bins, 2.0 / n)
    scale[0] = scale[-1] = 1.0 / n
    out = np.fft.rfft(gframes, axis=-1) * scale.astype(dtype, copy=False)
    # imaginary parts of the DC and Nyquist bins do not reach the output
    out[..., 0] = out[..., 0].real
    out[..., -1] = out[..., -1].real
    return out


def stft(wave: MultichannelWaveform, cfg: StftConfig) -> ComplexSpectrogram:
    data = stft_array(wave.samples, cfg)
    return ComplexSpectrogram(data, cfg.frame_len, cfg.hop_len, wave.sample_rate, wave.n_samples)


def istft(spec: ComplexSpectrogram, length: int | None = None) -> MultichannelWaveform:
    cfg = spec.config()
    if length is None:
        length = spec.n_samples
    return MultichannelWaveform(istft_array(spec.data, cfg, length), spec.sample_rate)


def pack_input(spec: ComplexSpectrogram | np.ndarray) -> np.ndarray:
    """(C, T, F) complex -> (2C, T, F) real; channel 2c = Re, 2c+1 = Im.

    Also accepts a leading batch axis: (B, C, T, F) -> (B, 2C, T, F).
    """
    data = spec.data if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    if data.ndim not in (3, 4):
        raise ValueError(f"expected (C, T, F) or (B, C, T, F), got {data.shape}")
    ax = data.ndim - 3
    out = np.stack([data.real, data.imag], axis=ax + 1)
    shape = data.shape[:ax] + (2 * data.shape[ax],) + data.shape[ax + 1:]
    return np.ascontiguousarray(out.reshape(shape))


def unpack_output(grid: np.ndarray) -> np.ndarray:
    """(2I, T, F) real -> (I, T, F) complex, or batched (B, 2I, T, F) -> (B, I, T, F)."""
    grid = np.asarray(grid)
    if grid.ndim not in (3, 4):
        raise ValueError(f"expected (2I, T, F) or (B, 2I, T, F), got {grid.shape}")
    ax = grid.ndim - 3
    c = grid.shape[ax]
    if c % 2:
        raise ValueError(f"channel count must be even, got {c}")
    g = grid.reshape(grid.shape[:ax] + (c // 2, 2) + grid.shape[ax + 1:])
    re = np.take(g, 0, axis=ax + 1)
    im = np.take(g, 1, axis=ax + 1)
    return re + 1j * im


def unpack_output_adjoint(grad: np.ndarray) -> np.ndarray:
    """Map a complex gradient (Re + j*Im parts) back onto the interleaved real channels."""
    return pack_input(grad)


# --- WAV ---------------------------------------------------------------------

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def read_wav(path) -> MultichannelWaveform:
    """Read a RIFF/WAVE file holding 16-bit PCM or 32-bit float samples."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise WavFormatError(f"{path}: RIFF header truncated ({len(raw)} bytes)")
    riff, _, wave = struct.unpack("<4sI4s", raw[:12])
    if riff != b"RIFF":
        raise WavFormatError(f"{path}: bad chunk id {riff!r}, expected b'RIFF'")
    if wave != b"WAVE":
        raise WavFormatError(f"{path}: bad format {wave!r}, expected b'WAVE'")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack("<4sI", raw[pos:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short ({size} bytes)")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE and size >= 26:
                sub = struct.unpack("<H", body[24:26])[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavFormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavFormatError(f"{path}: missing data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1:
        raise WavFormatError(f"{path}: channels={channels}")
    if (tag, bits) == (_PCM, 16):
        dtype = np.dtype("<i2")
    elif (tag, bits) == (_IEEE_FLOAT, 32):
        dtype = np.dtype("<f4")
    else:
        raise WavFormatError(f"{path}: unsupported encoding format_tag={tag} bits_per_sample={bits}")
    if block_align != channels * dtype.itemsize:
        raise WavFormatError(f"{path}: block_align={block_align} inconsistent with channels/bits")
    if len(data) % block_align:
        raise WavFormatError(f"{path}: data size {len(data)} not a multiple of block_align={block_align}")
    frames = np.frombuffer(data, dtype=dtype).reshape(-1, channels).T
    if frames.shape[1] == 0:
        raise WavFormatError(f"{path}: data chunk holds no samples")
    if dtype.kind == "i":
        samples = frames.astype(np.float32) / 32768.0
    else:
        samples = frames.astype(np.float32)
    return MultichannelWaveform(samples, rate)


def write_wav(path, wave: MultichannelWaveform, encoding: str = "float32") -> None:
    """Write interleaved samples as 32-bit float (default) or 16-bit PCM."""
    if encoding == "float32":
        tag, dtype = _IEEE_FLOAT, np.dtype("<f4")
        payload = wave.samples.astype(dtype)
    elif encoding == "int16":
        tag, dtype = _PCM, np.dtype("<i2")
        payload = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(dtype)
    else:
        raise ValueError(f"unsupported encoding {encoding!r}")
    channels = wave.n_channels
    block = channels * dtype.itemsize
    body = np.ascontiguousarray(payload.T).tobytes()
    fmt = struct.pack("<HHIIHH", tag, channels, wave.sample_rate, wave.sample_rate * block, block, dtype.itemsize * 8)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(body)) + body
    if len(body) & 1:
        chunks += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)
