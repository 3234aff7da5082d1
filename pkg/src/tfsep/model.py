"""Alternating time-frequency transformer: encoder, stacked blocks, decoder.

Parameter names follow a fixed scheme::

    encoder.{weight,bias}
    block{i}.mbconv{1,2}.{bn,pw1,dw,se.fc1,se.fc2,pw2}.*
    block{i}.{fsa,bta}.{ln,attn.q,attn.k,attn.v,attn.out}.*
    decoder.{weight,bias}
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import (
    BatchNorm2d,
    Conv2d,
    LayerNorm,
    MultiHeadSelfAttention,
    ParamStore,
    RngState,
    SqueezeExcite,
    dropout_backward,
    dropout_forward,
    silu,
    silu_grad,
)
from .signal import (
    MultichannelWaveform,
    StftConfig,
    istft_adjoint,
    istft_array,
    pack_input,
    stft_array,
    unpack_output,
    unpack_output_adjoint,
)


@dataclass
class ModelConfig:
    D: int = 64
    H: int = 4
    L_layers: int = 12
    M: int = 4
    I: int = 2
    expansion: int = 4
    se_shrink: float = 0.25
    dw_kernel: int = 3
    dropout_rate: float = 0.1
    use_se: bool = True
    dw_kind: str = "k3x3"

    def __post_init__(self):
        problems = []
        if self.D < 2:
            problems.append(f"D={self.D} must be >= 2")
        if self.H < 1 or self.D % self.H:
            problems.append(f"D={self.D} not divisible by H={self.H}")
        if self.L_layers < 1:
            problems.append(f"L_layers={self.L_layers} must be >= 1")
        if self.M < 1:
            problems.append(f"M={self.M} must be >= 1")
        if self.I < 2:
            problems.append(f"I={self.I} must be >= 2")
        if self.expansion < 1:
            problems.append(f"expansion={self.expansion} must be >= 1")
        if not 0 < self.se_shrink <= 1:
            problems.append(f"se_shrink={self.se_shrink} must be in (0, 1]")
        if self.dw_kind not in ("k3x3", "pointwise"):
            problems.append(f"dw_kind={self.dw_kind!r} must be 'k3x3' or 'pointwise'")
        if self.dw_kernel < 1 or self.dw_kernel % 2 == 0:
            problems.append(f"dw_kernel={self.dw_kernel} must be odd")
        if not 0 <= self.dropout_rate < 1:
            problems.append(f"dropout_rate={self.dropout_rate} must be in [0, 1)")
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    @property
    def expanded(self) -> int:
        return self.expansion * self.D

    @property
    def se_hidden(self) -> int:
        return max(1, int(round(self.expanded * self.se_shrink)))

    @property
    def depthwise_kernel(self) -> int:
        return self.dw_kernel if self.dw_kind == "k3x3" else 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "dasformer-base": dict(D=64, H=4, L_layers=12, M=4, I=2),
    "dasformer-plus": dict(D=96, H=4, L_layers=16, M=1, I=2),
    "ablation-no-se": dict(D=64, H=4, L_layers=12, M=4, I=2, use_se=False),
    "ablation-1x1-no-se": dict(D=64, H=4, L_layers=12, M=4, I=2, use_se=False, dw_kind="pointwise"),
    "micro": dict(D=16, H=2, L_layers=2, M=2, I=2),
    "micro-mono": dict(D=16, H=2, L_layers=2, M=1, I=2),
    "gradcheck": dict(D=8, H=2, L_layers=2, M=2, I=2, dropout_rate=0.0),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def param_count_formula(cfg: ModelConfig) -> dict:
    """Closed-form trainable parameter counts, keyed like ``count_params``."""
    d, e, k = cfg.D, cfg.expanded, cfg.depthwise_kernel
    mbconv = 2 * d + (d * e + e) + (e * k * k + e) + (e * d + d)
    if cfg.use_se:
        h = cfg.se_hidden
        mbconv += 2 * e * h + h + e
    attention = 2 * d + 4 * (d * d + d)
    return {
        "encoder": 2 * cfg.M * d * 9 + d,
        "blocks": cfg.L_layers * (2 * mbconv + 2 * attention),
        "decoder": d * 2 * cfg.I * 9 + 2 * cfg.I,
    }


@dataclass
class AttentionRecord:
    layer: int
    module: str  # "fsa" or "bta"
    head: int
    slice: int  # frame index for fsa, band index for bta
    matrix: np.ndarray


@dataclass
class AttentionCapture:
    """Selects which attention maps to keep during a forward pass.

    ``None`` in any selector means "all". Only batch item ``batch_index`` is kept.
    """

    layers: set | None = None
    modules: set | None = None
    heads: set | None = None
    slices: set | None = None
    batch_index: int = 0
    records: list = field(default_factory=list)

    def wants(self, layer: int, module: str) -> bool:
        return (self.layers is None or layer in self.layers) and (
            self.modules is None or module in self.modules)

    def collect(self, layer: int, module: str, attn: np.ndarray, batch: int) -> None:
        n, h = attn.shape[:2]
        per_item = attn.reshape(batch, n // batch, h, *attn.shape[2:])[self.batch_index]
        for sl in range(per_item.shape[0]):
            if self.slices is not None and sl not in self.slices:
                continue
            for head in range(h):
                if self.heads is not None and head not in self.heads:
                    continue
                self.records.append(AttentionRecord(layer, module, head, sl,
                                                    np.array(per_item[sl, head], dtype=np.float64)))


@dataclass(frozen=True)
class MBConv:
    """Residual inverted bottleneck: x + Pw2(SE(Dw(Pw1(BN(x)))))."""

    name: str
    cfg: ModelConfig

    @property
    def bn(self):
        return BatchNorm2d(f"{self.name}.bn", self.cfg.D)

    @property
    def pw1(self):
        return Conv2d(f"{self.name}.pw1", self.cfg.D, self.cfg.expanded, "pointwise", 1)

    @property
    def dw(self):
        e = self.cfg.expanded
        return Conv2d(f"{self.name}.dw", e, e, "depthwise", self.cfg.depthwise_kernel)

    @property
    def se(self):
        return SqueezeExcite(f"{self.name}.se", self.cfg.expanded, self.cfg.se_hidden) if self.cfg.use_se else None

    @property
    def pw2(self):
        return Conv2d(f"{self.name}.pw2", self.cfg.expanded, self.cfg.D, "pointwise", 1)

    def init(self, store, rng):
        for layer in (self.bn, self.pw1, self.dw, self.se, self.pw2):
            if layer is not None:
                layer.init(store, rng)

    def forward(self, store, x, train=False):
        h, c_bn = self.bn.forward(store, x, train)
        z1, c_pw1 = self.pw1.forward(store, h)
        a1 = silu(z1)
        z2, c_dw = self.dw.forward(store, a1)
        a2 = silu(z2)
        c_se = None
        if self.se is not None:
            a2, c_se = self.se.forward(store, a2)
        out, c_pw2 = self.pw2.forward(store, a2)
        return x + out, (c_bn, c_pw1, z1, c_dw, z2, c_se, c_pw2)

    def backward(self, store, cache, gy):
        c_bn, c_pw1, z1, c_dw, z2, c_se, c_pw2 = cache
        g = self.pw2.backward(store, c_pw2, gy)
        if self.se is not None:
            g = self.se.backward(store, c_se, g)
        g = self.dw.backward(store, c_dw, g * silu_grad(z2))
        g = self.pw1.backward(store, c_pw1, g * silu_grad(z1))
        return gy + self.bn.backward(store, c_bn, g)


@dataclass(frozen=True)
class AxisAttention:
    """Residual shared MHSA over one spectrogram axis.

    ``axis="freq"``: each frame's F-length sequence (frame-wise spectral attention).
    ``axis="time"``: each band's T-length sequence (band-wise temporal attention).
    """

    name: str
    cfg: ModelConfig
    axis: str

    @property
    def ln(self):
        return LayerNorm(f"{self.name}.ln", self.cfg.D)

    @property
    def attn(self):
        return MultiHeadSelfAttention(f"{self.name}.attn", self.cfg.D, self.cfg.H)

    def init(self, store, rng):
        self.ln.init(store, rng)
        self.attn.init(store, rng)

    def to_sequences(self, x):
        b, d, t, f = x.shape
        if self.axis == "freq":
            return x.transpose(0, 2, 3, 1).reshape(b * t, f, d)
        return x.transpose(0, 3, 2, 1).reshape(b * f, t, d)

    def from_sequences(self, s, shape):
        b, d, t, f = shape
        if self.axis == "freq":
            return s.reshape(b, t, f, d).transpose(0, 3, 1, 2)
        return s.reshape(b, f, t, d).transpose(0, 3, 2, 1)

    def forward(self, store, x, train=False, rng=None, capture=None, layer=0):
        seq = self.to_sequences(x)
        h, c_ln = self.ln.forward(store, seq)
        a, c_attn = self.attn.forward(store, h)
        a, mask = dropout_forward(a, self.cfg.dropout_rate, train, rng)
        module = "fsa" if self.axis == "freq" else "bta"
        if capture is not None and capture.wants(layer, module):
            capture.collect(layer, module, c_attn["attn"], x.shape[0])
        out = x + self.from_sequences(a, x.shape)
        return np.ascontiguousarray(out), (c_ln, c_attn, mask, x.shape)

    def backward(self, store, cache, gy):
        c_ln, c_attn, mask, shape = cache
        g = dropout_backward(mask, self.to_sequences(gy))
        g = self.attn.backward(store, c_attn, g)
        g = self.ln.backward(store, c_ln, g)
        return gy + self.from_sequences(g, shape)


class Model:
    """Immutable network description; weights live in a ParamStore."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.encoder = Conv2d("encoder", 2 * cfg.M, cfg.D, "full", 3)
        self.decoder = Conv2d("decoder", cfg.D, 2 * cfg.I, "full", 3)
        self.blocks = []
        for i in range(cfg.L_layers):
            self.blocks.append((
                MBConv(f"block{i}.mbconv1", cfg),
                AxisAttention(f"block{i}.fsa", cfg, "freq"),
                MBConv(f"block{i}.mbconv2", cfg),
                AxisAttention(f"block{i}.bta", cfg, "time"),
            ))

    def init(self, rng: RngState, zero_decoder: bool = False) -> ParamStore:
        store = ParamStore()
        self.encoder.init(store, rng)
        for block in self.blocks:
            for sub in block:
                sub.init(store, rng)
        self.decoder.init(store, rng)
        if zero_decoder:
            store["decoder.weight"] = np.zeros_like(store["decoder.weight"])
        return store

    def forward(self, store: ParamStore, x: np.ndarray, train: bool = False,
                rng: RngState | None = None, capture: AttentionCapture | None = None):
        """(B, 2M, T, F) -> (B, 2I, T, F). Returns ``(y, cache)``."""
        if x.ndim != 4 or x.shape[1] != 2 * self.cfg.M:
            raise ValueError(f"model input must be (B, {2 * self.cfg.M}, T, F), got {x.shape}")
        h, c_enc = self.encoder.forward(store, x)
        caches = []
        for i, (mb1, fsa, mb2, bta) in enumerate(self.blocks):
            h, c1 = mb1.forward(store, h, train)
            h, c2 = fsa.forward(store, h, train, rng, capture, i)
            h, c3 = mb2.forward(store, h, train)
            h, c4 = bta.forward(store, h, train, rng, capture, i)
            caches.append((c1, c2, c3, c4))
        y, c_dec = self.decoder.forward(store, h)
        return y, (c_enc, caches, c_dec)

    def backward(self, store: ParamStore, cache, gy: np.ndarray) -> np.ndarray:
        c_enc, caches, c_dec = cache
        g = self.decoder.backward(store, c_dec, gy)
        for block, cs in zip(reversed(self.blocks), reversed(caches)):
            for sub, c in zip(reversed(block), reversed(cs)):
                g = sub.backward(store, c, g)
        return self.encoder.backward(store, c_enc, g)


def build(cfg: ModelConfig, rng: RngState | int = 0, zero_decoder: bool = False):
    """Create a model handle and its freshly initialized parameters."""
    if not isinstance(rng, RngState):
        rng = RngState(rng)
    model = Model(cfg)
    return model.init(rng, zero_decoder=zero_decoder), model


def count_params(store: ParamStore, by: str = "total"):
    """Trainable element count; ``by="submodule"`` gives a per-prefix breakdown."""
    if by == "total":
        return store.num_trainable()
    depth = {"submodule": 1, "module": 2}.get(by)
    if depth is None:
        raise ValueError(f"unknown breakdown {by!r}")
    out: dict[str, int] = {}
    for name in store.names(trainable_only=True):
        key = ".".join(name.split(".")[:depth])
        out[key] = out.get(key, 0) + store[name].size
    return out


# --- waveform-level pipeline -------------------------------------------------

def edge_pad(cfg: StftConfig) -> int:
    """Zeros added on both sides so every real sample gets full overlap."""
    return cfg.frame_len - cfg.hop_len


def waveform_forward(model: Model, store: ParamStore, mixture: np.ndarray, stft_cfg: StftConfig,
                     train: bool = False, rng: RngState | None = None,
                     capture: AttentionCapture | None = None):
    """(B, M, N) mixtures -> (B, I, N) estimates; returns ``(estimates, cache)``."""
    if mixture.ndim != 3 or mixture.shape[1] != model.cfg.M:
        raise ValueError(f"mixture must be (B, {model.cfg.M}, N), got {mixture.shape}")
    n = mixture.shape[-1]
    p = edge_pad(stft_cfg)
    padded = np.pad(mixture, ((0, 0), (0, 0), (p, p)))
    spec = stft_array(padded, stft_cfg)
    dtype = mixture.dtype if mixture.dtype in (np.float32, np.float64) else np.float64
    x = pack_input(spec).astype(dtype)
    y, cache = model.forward(store, x, train, rng, capture)
    est_spec = unpack_output(y)
    est = istft_array(est_spec, stft_cfg, n + 2 * p)[..., p:p + n].astype(dtype)
    return est, (cache, spec.shape[-2], n)


def waveform_backward(model: Model, store: ParamStore, stft_cfg: StftConfig, cache, grad_est):
    net_cache, n_frames, n = cache
    p = edge_pad(stft_cfg)
    g = np.pad(grad_est, ((0, 0), (0, 0), (p, p)))
    gspec = istft_adjoint(g, stft_cfg, n_frames)
    gy = unpack_output_adjoint(gspec).astype(grad_est.dtype)
    model.backward(store, net_cache, gy)


def separate(model: Model, store: ParamStore, mixture: MultichannelWaveform,
             stft_cfg: StftConfig, capture: AttentionCapture | None = None) -> list[MultichannelWaveform]:
    """Eval-mode separation of one mixture into ``I`` single-channel waveforms."""
    if mixture.n_channels != model.cfg.M:
        raise ValueError(f"mixture has {mixture.n_channels} channels, model expects {model.cfg.M}")
    est, _ = waveform_forward(model, store, mixture.samples[None].astype(np.float64), stft_cfg,
                              train=False, capture=capture)
    return [MultichannelWaveform(e[None], mixture.sample_rate) for e in est[0]]


# --- attention dump ----------------------------------------------------------

def dump_attention(records: list[AttentionRecord], out_dir) -> Path:
    """Write one dense-matrix text file per record plus ``index.jsonl``.

    Matrix format: first line ``rows cols``, then one row per line of
    space-separated decimals.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = out_dir / "index.jsonl"
    with index.open("w") as fh:
        for r in records:
            fname = f"layer{r.layer}_{r.module}_head{r.head}_slice{r.slice}.txt"
            rows, cols = r.matrix.shape
            with (out_dir / fname).open("w") as mf:
                mf.write(f"{rows} {cols}\n")
                for row in r.matrix:
                    mf.write(" ".join(f"{v:.9e}" for v in row) + "\n")
            fh.write(json.dumps({"layer": r.layer, "module": r.module, "head": r.head,
                                 "slice": r.slice, "rows": rows, "cols": cols, "file": fname}) + "\n")
    return index


def read_matrix(path) -> np.ndarray:
    with open(path) as fh:
        rows, cols = (int(v) for v in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, body is {data.shape}")
    return data
