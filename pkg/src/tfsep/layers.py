"""Differentiable building blocks with hand-written backward rules.

Every layer is an immutable description (names, shapes). Weights live in a
:class:`ParamStore`; ``forward`` returns ``(output, cache)`` and ``backward``
consumes the cache, accumulates parameter gradients into the store and
returns the input gradient. Activations use the layout ``(B, C, T, F)``
for convolutional layers and ``(N, S, D)`` for sequence layers.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
LN_EPS = 1e-5
BN_MOMENTUM = 0.9


class RngState:
    """Seeded random stream; identical seeds give identical draws."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self.generator.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.generator.bit_generator.state = state["bit_generator"]

    def spawn(self, key: int) -> "RngState":
        return RngState(int(np.random.SeedSequence([self.seed, key]).generate_state(1)[0]))


class ParamStore:
    """Named tensors with gradient slots, iterated in insertion order."""

    def __init__(self):
        self._values: OrderedDict[str, np.ndarray] = OrderedDict()
        self._grads: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, copy=True)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        self._trainable[name] = bool(trainable)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value)
        if value.shape != self._values[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {self._values[name].shape}")
        self._values[name] = value.astype(self._values[name].dtype, copy=True)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self, trainable_only: bool = False) -> list[str]:
        return [n for n in self._values if self._trainable[n] or not trainable_only]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def accumulate(self, name: str, g: np.ndarray) -> None:
        self._grads[name] += g

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g[...] = 0

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for n, v in self._values.items():
            out.add(n, v.astype(dtype), self._trainable[n])
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, v in self._values.items():
            out.add(n, v, self._trainable[n])
            out._grads[n][...] = self._grads[n]
        return out

    def num_trainable(self) -> int:
        return int(sum(v.size for n, v in self._values.items() if self._trainable[n]))


def kaiming_uniform(rng: RngState, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.generator.uniform(-bound, bound, size=shape)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


# --- convolution -------------------------------------------------------------

@dataclass(frozen=True)
class Conv2d:
    """Same-padded, stride-1 2-D convolution over (T, F).

    kind: ``full`` (dense k x k), ``pointwise`` (dense 1 x 1) or
    ``depthwise`` (per-channel k x k, c_out == c_in).
    """

    name: str
    c_in: int
    c_out: int
    kind: str = "full"
    kernel: int = 3

    def __post_init__(self):
        if self.kind not in ("full", "pointwise", "depthwise"):
            raise ValueError(f"{self.name}: unknown conv kind {self.kind!r}")
        if self.kind == "depthwise" and self.c_in != self.c_out:
            raise ValueError(f"{self.name}: depthwise conv needs c_out == c_in")
        if self.kind == "pointwise" and self.kernel != 1:
            object.__setattr__(self, "kernel", 1)
        if self.kernel % 2 != 1:
            raise ValueError(f"{self.name}: kernel must be odd")

    @property
    def weight_shape(self) -> tuple:
        k = self.kernel
        if self.kind == "full":
            return (self.c_out, self.c_in, k, k)
        if self.kind == "pointwise":
            return (self.c_out, self.c_in)
        return (self.c_out, k, k)

    @property
    def fan_in(self) -> int:
        k2 = self.kernel**2
        return k2 if self.kind == "depthwise" else self.c_in * k2

    def n_params(self) -> int:
        return int(np.prod(self.weight_shape)) + self.c_out

    def init(self, store: ParamStore, rng: RngState) -> None:
        store.add(f"{self.name}.weight", kaiming_uniform(rng, self.weight_shape, self.fan_in))
        store.add(f"{self.name}.bias", np.zeros(self.c_out))

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"{self.name}: expected (B, {self.c_in}, T, F) input, got {x.shape}")

    def forward(self, store: ParamStore, x: np.ndarray):
        self._check(x)
        w = store[f"{self.name}.weight"].astype(x.dtype, copy=False)
        b = store[f"{self.name}.bias"].astype(x.dtype, copy=False)
        bsz, _, t, f = x.shape
        k, p = self.kernel, self.kernel // 2
        if self.kind == "pointwise":
            y = np.matmul(w, x.reshape(bsz, self.c_in, t * f)).reshape(bsz, self.c_out, t, f)
            y += b[None, :, None, None]
            return y, x
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        if self.kind == "depthwise":
            y = np.empty_like(x)
            y[...] = b[None, :, None, None]
            for a in range(k):
                for c in range(k):
                    y += w[None, :, a, c, None, None] * xp[:, :, a:a + t, c:c + f]
            return y, xp
        cols = np.stack([xp[:, :, a:a + t, c:c + f] for a in range(k) for c in range(k)], axis=2)
        cols = cols.reshape(bsz, self.c_in * k * k, t * f)
        y = np.matmul(w.reshape(self.c_out, -1), cols).reshape(bsz, self.c_out, t, f)
        y += b[None, :, None, None]
        return y, (cols, x.shape)

    def backward(self, store: ParamStore, cache, gy: np.ndarray) -> np.ndarray:
        w = store[f"{self.name}.weight"].astype(gy.dtype, copy=False)
        bsz, _, t, f = gy.shape
        k, p = self.kernel, self.kernel // 2
        store.accumulate(f"{self.name}.bias", gy.sum(axis=(0, 2, 3)))
        if self.kind == "pointwise":
            x = cache
            g2 = gy.reshape(bsz, self.c_out, t * f)
            x2 = x.reshape(bsz, self.c_in, t * f)
            store.accumulate(f"{self.name}.weight", np.tensordot(g2, x2, axes=([0, 2], [0, 2])))
            return np.matmul(w.T, g2).reshape(x.shape)
        if self.kind == "depthwise":
            xp = cache
            gw = np.empty(w.shape, dtype=gy.dtype)
            gxp = np.zeros_like(xp)
            for a in range(k):
                for c in range(k):
                    gw[:, a, c] = np.einsum("bctf,bctf->c", gy, xp[:, :, a:a + t, c:c + f])
                    gxp[:, :, a:a + t, c:c + f] += w[None, :, a, c, None, None] * gy
            store.accumulate(f"{self.name}.weight", gw)
            return gxp[:, :, p:p + t, p:p + f] if p else gxp
        cols, xshape = cache
        g2 = gy.reshape(bsz, self.c_out, t * f)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        store.accumulate(f"{self.name}.weight", gw)
        gcols = np.matmul(w.reshape(self.c_out, -1).T, g2).reshape(bsz, self.c_in, k * k, t, f)
        gxp = np.zeros((bsz, self.c_in, t + 2 * p, f + 2 * p), dtype=gy.dtype)
        for a in range(k):
            for c in range(k):
                gxp[:, :, a:a + t, c:c + f] += gcols[:, :, a * k + c]
        return gxp[:, :, p:p + t, p:p + f]


# --- normalization -----------------------------------------------------------

@dataclass(frozen=True)
class BatchNorm2d:
    """Per-channel normalization over (batch, T, F)."""

    name: str
    channels: int

    def n_params(self) -> int:
        return 2 * self.channels

    def init(self, store: ParamStore, rng: RngState | None = None) -> None:
        store.add(f"{self.name}.weight", np.ones(self.channels))
        store.add(f"{self.name}.bias", np.zeros(self.channels))
        store.add(f"{self.name}.running_mean", np.zeros(self.channels), trainable=False)
        store.add(f"{self.name}.running_var", np.ones(self.channels), trainable=False)

    def forward(self, store: ParamStore, x: np.ndarray, train: bool = False):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"{self.name}: expected (B, {self.channels}, T, F) input, got {x.shape}")
        gamma = store[f"{self.name}.weight"].astype(x.dtype, copy=False)[None, :, None, None]
        beta = store[f"{self.name}.bias"].astype(x.dtype, copy=False)[None, :, None, None]
        if train:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            if count < 2:
                raise ValueError(f"{self.name}: train-mode batch norm needs more than one value per channel")
            mean = x.mean(axis=(0, 2, 3))
            xc = x - mean[None, :, None, None]
            var = np.mean(xc * xc, axis=(0, 2, 3))
            rm, rv = f"{self.name}.running_mean", f"{self.name}.running_var"
            store[rm] = BN_MOMENTUM * store[rm] + (1 - BN_MOMENTUM) * mean
            store[rv] = BN_MOMENTUM * store[rv] + (1 - BN_MOMENTUM) * var * count / (count - 1)
        else:
            mean = store[f"{self.name}.running_mean"].astype(x.dtype, copy=False)
            var = store[f"{self.name}.running_var"].astype(x.dtype, copy=False)
            xc = x - mean[None, :, None, None]
        inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype, copy=False)
        xhat = xc * inv[None, :, None, None]
        return gamma * xhat + beta, (xhat, inv, train)

    def backward(self, store: ParamStore, cache, gy: np.ndarray) -> np.ndarray:
        xhat, inv, train = cache
        gamma = store[f"{self.name}.weight"].astype(gy.dtype, copy=False)
        store.accumulate(f"{self.name}.weight", np.sum(gy * xhat, axis=(0, 2, 3)))
        store.accumulate(f"{self.name}.bias", gy.sum(axis=(0, 2, 3)))
        gxhat = gy * gamma[None, :, None, None]
        if not train:
            return gxhat * inv[None, :, None, None]
        m1 = gxhat.mean(axis=(0, 2, 3))[None, :, None, None]
        m2 = np.mean(gxhat * xhat, axis=(0, 2, 3))[None, :, None, None]
        return (gxhat - m1 - xhat * m2) * inv[None, :, None, None]


@dataclass(frozen=True)
class LayerNorm:
    """Normalization over the trailing embedding axis."""

    name: str
    dim: int

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"{self.name}: layer norm needs dim >= 2")

    def n_params(self) -> int:
        return 2 * self.dim

    def init(self, store: ParamStore, rng: RngState | None = None) -> None:
        store.add(f"{self.name}.weight", np.ones(self.dim))
        store.add(f"{self.name}.bias", np.zeros(self.dim))

    def forward(self, store: ParamStore, x: np.ndarray):
        gamma = store[f"{self.name}.weight"].astype(x.dtype, copy=False)
        beta = store[f"{self.name}.bias"].astype(x.dtype, copy=False)
        mean = x.mean(axis=-1, keepdims=True)
        xc = x - mean
        inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + LN_EPS)
        xhat = xc * inv
        return xhat * gamma + beta, (xhat, inv)

    def backward(self, store: ParamStore, cache, gy: np.ndarray) -> np.ndarray:
        xhat, inv = cache
        gamma = store[f"{self.name}.weight"].astype(gy.dtype, copy=False)
        d = gy.shape[-1]
        store.accumulate(f"{self.name}.weight", np.sum((gy * xhat).reshape(-1, d), axis=0))
        store.accumulate(f"{self.name}.bias", gy.reshape(-1, d).sum(axis=0))
        gxhat = gy * gamma
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = np.mean(gxhat * xhat, axis=-1, keepdims=True)
        return (gxhat - m1 - xhat * m2) * inv


# --- squeeze-excitation ------------------------------------------------------

@dataclass(frozen=True)
class SqueezeExcite:
    """Channel gate: mean-pool -> linear -> SiLU -> linear -> sigmoid."""

    name: str
    channels: int
    hidden: int

    def n_params(self) -> int:
        return 2 * self.channels * self.hidden + self.hidden + self.channels

    def init(self, store: ParamStore, rng: RngState) -> None:
        c, h = self.channels, self.hidden
        store.add(f"{self.name}.fc1.weight", kaiming_uniform(rng, (h, c), c))
        store.add(f"{self.name}.fc1.bias", np.zeros(h))
        store.add(f"{self.name}.fc2.weight", kaiming_uniform(rng, (c, h), h))
        store.add(f"{self.name}.fc2.bias", np.zeros(c))

    def forward(self, store: ParamStore, x: np.ndarray):
        dt = x.dtype
        w1 = store[f"{self.name}.fc1.weight"].astype(dt, copy=False)
        b1 = store[f"{self.name}.fc1.bias"].astype(dt, copy=False)
        w2 = store[f"{self.name}.fc2.weight"].astype(dt, copy=False)
        b2 = store[f"{self.name}.fc2.bias"].astype(dt, copy=False)
        s = x.mean(axis=(2, 3))
        z1 = s @ w1.T + b1
        h = silu(z1)
        gate = sigmoid(h @ w2.T + b2)
        return x * gate[:, :, None, None], (x, s, z1, h, gate)

    def backward(self, store: ParamStore, cache, gy: np.ndarray) -> np.ndarray:
        x, s, z1, h, gate = cache
        dt = gy.dtype
        w1 = store[f"{self.name}.fc1.weight"].astype(dt, copy=False)
        w2 = store[f"{self.name}.fc2.weight"].astype(dt, copy=False)
        ggate = np.einsum("bctf,bctf->bc", gy, x)
        gz2 = ggate * gate * (1 - gate)
        store.accumulate(f"{self.name}.fc2.weight", gz2.T @ h)
        store.accumulate(f"{self.name}.fc2.bias", gz2.sum(0))
        gz1 = (gz2 @ w2) * silu_grad(z1)
        store.accumulate(f"{self.name}.fc1.weight", gz1.T @ s)
        store.accumulate(f"{self.name}.fc1.bias", gz1.sum(0))
        gs = gz1 @ w1
        return gy * gate[:, :, None, None] + gs[:, :, None, None] / (x.shape[2] * x.shape[3])


# --- attention ---------------------------------------------------------------

@dataclass(frozen=True)
class MultiHeadSelfAttention:
    """Scaled dot-product self-attention over (N, S, D) sequences.

    No positional encoding and no dropout on the attention weights.
    """

    name: str
    dim: int
    heads: int

    def __post_init__(self):
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"{self.name}: dim {self.dim} not divisible by heads {self.heads}")

    def n_params(self) -> int:
        return 4 * (self.dim * self.dim + self.dim)

    def init(self, store: ParamStore, rng: RngState) -> None:
        for p in ("q", "k", "v", "out"):
            store.add(f"{self.name}.{p}.weight", kaiming_uniform(rng, (self.dim, self.dim), self.dim))
            store.add(f"{self.name}.{p}.bias", np.zeros(self.dim))

    def _w(self, store, p, dt):
        return (store[f"{self.name}.{p}.weight"].astype(dt, copy=False),
                store[f"{self.name}.{p}.bias"].astype(dt, copy=False))

    def _split(self, a, n, s):
        return a.reshape(n, s, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def forward(self, store: ParamStore, x: np.ndarray):
        """Returns ``(y, cache)``; ``cache["attn"]`` holds the (N, H, S, S) weights."""
        if x.ndim != 3 or x.shape[2] != self.dim:
            raise ValueError(f"{self.name}: expected (N, S, {self.dim}) input, got {x.shape}")
        n, s, d = x.shape
        dt = x.dtype
        x2 = x.reshape(n * s, d)
        q, k, v = (self._split(x2 @ w + b, n, s) for w, b in (self._w(store, p, dt) for p in "qkv"))
        scale = dt.type(1.0 / np.sqrt(d // self.heads))
        scores = np.matmul(q, k.transpose(0, 1, 3, 2))
        scores *= scale
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        attn = scores
        o = np.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n * s, d)
        wo, bo = self._w(store, "out", dt)
        y = (o @ wo + bo).reshape(n, s, d)
        return y, {"x2": x2, "q": q, "k": k, "v": v, "attn": attn, "o": o, "shape": (n, s, d)}

    def backward(self, store: ParamStore, cache, gy: np.ndarray) -> np.ndarray:
        n, s, d = cache["shape"]
        dt = gy.dtype
        hd = d // self.heads
        scale = dt.type(1.0 / np.sqrt(hd))
        g2 = gy.reshape(n * s, d)
        wo, _ = self._w(store, "out", dt)
        store.accumulate(f"{self.name}.out.weight", cache["o"].T @ g2)
        store.accumulate(f"{self.name}.out.bias", g2.sum(0))
        go = self._split(g2 @ wo.T, n, s)
        attn, q, k, v = cache["attn"], cache["q"], cache["k"], cache["v"]
        gattn = np.matmul(go, v.transpose(0, 1, 3, 2))
        gv = np.matmul(attn.transpose(0, 1, 3, 2), go)
        gattn -= np.sum(gattn * attn, axis=-1, keepdims=True)
        gattn *= attn
        gattn *= scale
        gq = np.matmul(gattn, k)
        gk = np.matmul(gattn.transpose(0, 1, 3, 2), q)
        x2 = cache["x2"]
        gx = np.zeros((n * s, d), dtype=dt)
        for p, g in (("q", gq), ("k", gk), ("v", gv)):
            g = g.transpose(0, 2, 1, 3).reshape(n * s, d)
            w, _ = self._w(store, p, dt)
            store.accumulate(f"{self.name}.{p}.weight", x2.T @ g)
            store.accumulate(f"{self.name}.{p}.bias", g.sum(0))
            gx += g @ w.T
        return gx.reshape(n, s, d)


# --- dropout -----------------------------------------------------------------

def dropout_forward(x: np.ndarray, rate: float, train: bool, rng: RngState | None):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an RngState")
    keep = rng.generator.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(mask, gy: np.ndarray) -> np.ndarray:
    return gy if mask is None else gy * mask
