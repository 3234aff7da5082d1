"""Synthetic convolutive mixtures with ground-truth reference-microphone images.

Sources are toy stand-ins for speech (band-limited noise, harmonic stacks or
chirps); room filters are sparse exponentially decaying FIRs with a unit
direct path whose delay differs across microphones.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal import MultichannelWaveform, StftConfig, istft_array, read_wav, stft_array, write_wav

SOURCE_KINDS = ("band-disjoint-noise", "multitone", "am-chirp")
SPLITS = ("train", "val", "test")
PEAK = 0.9
MIX_PEAK = 0.95


@dataclass
class SceneConfig:
    I: int = 2
    M: int = 2
    sample_rate: int = 8000
    clip_seconds: float = 2.0
    L_rir: int = 512
    decay_range: tuple = (0.004, 0.012)
    mic_delay_range: tuple = (-2, 2)
    max_base_delay: int = 8
    n_reflections: int = 24
    reflection_gain: float = 0.5
    source_kind: str = "band-disjoint-noise"
    n_bands: int = 8
    band_layout: str = "random"
    guard_hz: float = 80.0
    min_active: float = 0.5
    dry_target: bool = False
    noise_snr_range: tuple | None = None
    seed: int = 0
    frame_len: int = 256

    def __post_init__(self):
        self.decay_range = tuple(self.decay_range)
        self.mic_delay_range = tuple(self.mic_delay_range)
        if self.noise_snr_range is not None:
            self.noise_snr_range = tuple(self.noise_snr_range)
        problems = []
        if self.I < 1 or self.M < 1:
            problems.append("I and M must be >= 1")
        if self.source_kind not in SOURCE_KINDS:
            problems.append(f"source_kind must be one of {SOURCE_KINDS}")
        if self.band_layout not in ("random", "contiguous", "interleaved"):
            problems.append(f"unknown band_layout {self.band_layout!r}")
        if self.L_rir < 1:
            problems.append("L_rir must be >= 1")
        if self.n_samples <= self.frame_len:
            problems.append(f"clip of {self.n_samples} samples not longer than frame_len={self.frame_len}")
        if self.n_bands < self.I:
            problems.append("need at least one band per speaker")
        if problems:
            raise ValueError("invalid SceneConfig: " + "; ".join(problems))

    @property
    def n_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class RoomFilterSet:
    taps: np.ndarray  # (I, M, L_rir)
    direct_delay: np.ndarray  # (I, M) samples
    decay_rate: np.ndarray  # (I,) per-sample envelope decay


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


# --- sources -----------------------------------------------------------------

def band_edges(cfg: SceneConfig) -> np.ndarray:
    """(n_bands, 2) pass-band limits in Hz, guard gaps between neighbours."""
    lo, hi = 2 * cfg.guard_hz, cfg.sample_rate / 2 - 2 * cfg.guard_hz
    edges = np.linspace(lo, hi, cfg.n_bands + 1)
    return np.stack([edges[:-1] + cfg.guard_hz / 2, edges[1:] - cfg.guard_hz / 2], axis=1)


def assign_bands(cfg: SceneConfig, rng: np.random.Generator) -> list[list[int]]:
    """Split band indices into ``I`` disjoint groups."""
    idx = np.arange(cfg.n_bands)
    if cfg.band_layout == "random":
        idx = rng.permutation(cfg.n_bands)
        return [sorted(int(b) for b in idx[i::cfg.I]) for i in range(cfg.I)]
    if cfg.band_layout == "interleaved":
        return [[int(b) for b in idx[i::cfg.I]] for i in range(cfg.I)]
    return [[int(b) for b in chunk] for chunk in np.array_split(idx, cfg.I)]


def on_off_envelope(n: int, sr: int, rng: np.random.Generator, min_active: float = 0.5) -> np.ndarray:
    """Random gating with 10 ms raised-cosine ramps; active for >= ``min_active`` of the clip."""
    for _ in range(100):
        env = np.zeros(n)
        pos = 0
        on = bool(rng.random() < 0.5)
        while pos < n:
            seg = int(rng.uniform(0.15, 0.5) * sr)
            if on:
                env[pos:pos + seg] = 1.0
            pos += seg
            on = not on
        if env.mean() >= min_active:
            break
    ramp = max(1, int(0.01 * sr))
    kernel = np.hanning(2 * ramp + 1)
    return np.convolve(env, kernel / kernel.sum(), mode="same")


def _bandpass_noise(n: int, sr: int, bands, rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    keep = np.zeros_like(freqs, dtype=bool)
    for lo, hi in bands:
        keep |= (freqs >= lo) & (freqs <= hi)
    return np.fft.irfft(spec * keep, n)


def gen_sources(cfg: SceneConfig, rng: np.random.Generator | int) -> np.ndarray:
    """(I, N) dry sources, each peak-normalized to 0.9."""
    if not isinstance(rng, np.random.Generator):
        rng = _rng(rng)
    n, sr = cfg.n_samples, cfg.sample_rate
    t = np.arange(n) / sr
    out = np.zeros((cfg.I, n))
    if cfg.source_kind == "band-disjoint-noise":
        edges = band_edges(cfg)
        for i, group in enumerate(assign_bands(cfg, rng)):
            noise = _bandpass_noise(n, sr, edges[group], rng)
            out[i] = noise * on_off_envelope(n, sr, rng, cfg.min_active)
    elif cfg.source_kind == "multitone":
        # disjoint fundamental ranges keep harmonic stacks apart
        f0s = np.linspace(110.0, 330.0, cfg.I + 1)
        for i in range(cfg.I):
            f0 = rng.uniform(f0s[i], f0s[i + 1])
            k = np.arange(1, int((sr / 2 - 100) // f0) + 1)
            amps = rng.uniform(0.3, 1.0, k.size) / k
            phases = rng.uniform(0, 2 * np.pi, k.size)
            out[i] = (amps[:, None] * np.sin(2 * np.pi * f0 * k[:, None] * t + phases[:, None])).sum(0)
            out[i] *= on_off_envelope(n, sr, rng, cfg.min_active)
    else:
        edges = np.linspace(200.0, sr / 2 - 200.0, cfg.I + 1)
        for i in range(cfg.I):
            f_start, f_stop = sorted(rng.uniform(edges[i], edges[i + 1], 2))
            inst = f_start + (f_stop - f_start) * t / t[-1]
            phase = 2 * np.pi * np.cumsum(inst) / sr
            am = 1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
            out[i] = am * np.sin(phase)
    peaks = np.max(np.abs(out), axis=1, keepdims=True)
    return PEAK * out / np.where(peaks > 0, peaks, 1.0)


# --- room filters ------------------------------------------------------------

def gen_filters(cfg: SceneConfig, rng: np.random.Generator | int) -> RoomFilterSet:
    """Unit direct path at a mic-dependent delay plus sparse decaying reflections.

    Reflection amplitudes satisfy ``|tap[d + l]| <= exp(-decay * l)`` where
    ``d`` is the direct-path delay.
    """
    if not isinstance(rng, np.random.Generator):
        rng = _rng(rng)
    taps = np.zeros((cfg.I, cfg.M, cfg.L_rir))
    delays = np.zeros((cfg.I, cfg.M), dtype=int)
    decay = rng.uniform(*cfg.decay_range, size=cfg.I)
    lo, hi = cfg.mic_delay_range
    for i in range(cfg.I):
        step = int(rng.integers(lo, hi + 1)) if cfg.M > 1 else 0
        rel = step * np.arange(cfg.M)
        base = int(rng.integers(0, cfg.max_base_delay + 1)) - min(rel.min(), 0)
        delays[i] = np.clip(base + rel, 0, cfg.L_rir - 1)
        for m in range(cfg.M):
            d = delays[i, m]
            taps[i, m, d] = 1.0
            room = cfg.L_rir - d - 1
            if cfg.n_reflections and room > 0:
                lags = rng.integers(1, room + 1, size=cfg.n_reflections)
                amps = cfg.reflection_gain * rng.uniform(-1.0, 1.0, cfg.n_reflections) * np.exp(-decay[i] * lags)
                np.add.at(taps[i, m], d + lags, amps)
                # coinciding lags may sum past the envelope
                env = np.exp(-decay[i] * np.arange(cfg.L_rir - d))
                tail = taps[i, m, d + 1:]
                np.clip(tail, -env[1:], env[1:], out=tail)
    return RoomFilterSet(taps, delays, decay)


# --- mixing ------------------------------------------------------------------

def convolve_images(sources: np.ndarray, filters: RoomFilterSet) -> np.ndarray:
    """X[i, m] = S_i * H_{i,m}, truncated to the clip length. Shape (I, M, N)."""
    i_src, n = sources.shape
    if filters.taps.shape[0] != i_src:
        raise ValueError(f"{filters.taps.shape[0]} filter sets for {i_src} sources")
    out = np.empty((i_src,) + filters.taps.shape[1:2] + (n,))
    for i in range(i_src):
        for m in range(filters.taps.shape[1]):
            out[i, m] = np.convolve(sources[i], filters.taps[i, m])[:n]
    return out


def mix(sources: np.ndarray, filters: RoomFilterSet, dry_target: bool = False,
        noise: np.ndarray | None = None):
    """Return ``(mixture (M, N), targets (I, N), images (I, M, N), scale)``.

    Targets are the reference-microphone (m = 0) images, or the dry sources
    when ``dry_target``. If the mixture would exceed 0.95 peak, images,
    targets and noise share one rescale factor.
    """
    images = convolve_images(np.asarray(sources, dtype=np.float64), filters)
    mixture = images.sum(axis=0)
    if noise is not None:
        mixture = mixture + noise
    peak = np.max(np.abs(mixture))
    if not np.isfinite(peak):
        raise FloatingPointError("mixture contains non-finite values")
    scale = MIX_PEAK / peak if peak > MIX_PEAK else 1.0
    images = images * scale
    mixture = images.sum(axis=0)
    if noise is not None:
        mixture = mixture + noise * scale
    targets = np.array(sources, dtype=np.float64) * scale if dry_target else images[:, 0].copy()
    return mixture, targets, images, scale


def make_scene(cfg: SceneConfig, seed) -> dict:
    """Generate one utterance from an explicit seed."""
    rng = _rng(seed)
    sources = gen_sources(cfg, rng)
    filters = gen_filters(cfg, rng)
    noise = None
    snr = None
    if cfg.noise_snr_range is not None:
        clean = convolve_images(sources, filters).sum(axis=0)
        snr = float(rng.uniform(*cfg.noise_snr_range))
        white = rng.standard_normal(clean.shape)
        white *= np.sqrt(np.mean(clean[0] ** 2) / np.mean(white[0] ** 2) / 10 ** (snr / 10))
        noise = white
    mixture, targets, images, scale = mix(sources, filters, cfg.dry_target, noise)
    return {
        "sources": sources,
        "filters": filters,
        "mixture": mixture,
        "targets": targets,
        "images": images,
        "scale": scale,
        "snr_db": snr,
    }


def ideal_binary_mask(mixture_ref: np.ndarray, targets: np.ndarray, stft_cfg: StftConfig) -> np.ndarray:
    """Oracle estimates: each TF bin of the reference channel goes to its dominant target."""
    n = mixture_ref.shape[-1]
    p = stft_cfg.frame_len - stft_cfg.hop_len
    y = stft_array(np.pad(mixture_ref, (p, p)), stft_cfg)
    x = stft_array(np.pad(targets, ((0, 0), (p, p))), stft_cfg)
    winner = np.argmax(np.abs(x), axis=0)
    masks = np.stack([winner == i for i in range(targets.shape[0])])
    return istft_array(masks * y[None], stft_cfg, n + 2 * p)[:, p:p + n]


# --- datasets ----------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    records: list = field(default_factory=list)

    FILENAME = "manifest.jsonl"

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def save(self) -> Path:
        path = Path(self.root) / self.FILENAME
        with path.open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / cls.FILENAME
        records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        return cls(path.parent, records)

    def load_example(self, record: dict):
        """Return ``(mixture (M, N), targets (I, N))`` as float32 arrays."""
        mixture = read_wav(Path(self.root) / record["mixture"]).samples
        targets = np.concatenate([read_wav(Path(self.root) / p).samples for p in record["references"]])
        return mixture, targets

    def validate(self) -> None:
        for r in self.records:
            mixture, targets = self.load_example(r)
            if mixture.shape != (r["n_channels"], r["n_samples"]):
                raise ValueError(f"{r['mixture']}: shape {mixture.shape} disagrees with manifest")
            if targets.shape != (r["n_speakers"], r["n_samples"]):
                raise ValueError(f"{r['id']}: reference shape {targets.shape} disagrees with manifest")


def utterance_seed(base_seed: int, split: str, index: int) -> list[int]:
    return [int(base_seed), SPLITS.index(split), int(index)]


def build_dataset(cfg: SceneConfig, counts: dict, out_dir) -> DatasetManifest:
    """Write mixtures, per-speaker references and ``manifest.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    manifest = DatasetManifest(out_dir)
    for split in SPLITS:
        count = int(counts.get(split, 0))
        if count == 0:
            continue
        split_dir = out_dir / split
        try:
            split_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {split_dir}: {exc}") from exc
        for k in range(count):
            uid = f"{split}_{k:05d}"
            scene = make_scene(cfg, utterance_seed(cfg.seed, split, k))
            mix_rel = f"{split}/{uid}_mix.wav"
            refs_rel = [f"{split}/{uid}_s{i}.wav" for i in range(cfg.I)]
            try:
                write_wav(out_dir / mix_rel, MultichannelWaveform(scene["mixture"], cfg.sample_rate))
                for i, rel in enumerate(refs_rel):
                    write_wav(out_dir / rel, MultichannelWaveform(scene["targets"][i], cfg.sample_rate))
            except OSError as exc:
                raise OSError(f"failed writing {uid} under {out_dir}: {exc}") from exc
            manifest.records.append({
                "id": uid,
                "split": split,
                "mixture": mix_rel,
                "references": refs_rel,
                "sample_rate": cfg.sample_rate,
                "n_samples": cfg.n_samples,
                "n_channels": cfg.M,
                "n_speakers": cfg.I,
                "scene": {
                    "seed": utterance_seed(cfg.seed, split, k),
                    "direct_delay": scene["filters"].direct_delay.tolist(),
                    "decay_rate": scene["filters"].decay_rate.tolist(),
                    "scale": scene["scale"],
                    "snr_db": scene["snr_db"],
                    "source_kind": cfg.source_kind,
                },
            })
    (out_dir / "scene_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    manifest.save()
    return manifest
