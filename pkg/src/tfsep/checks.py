"""Standard gradient-check battery shared by the CLI and the test suite."""
from __future__ import annotations

import numpy as np

from .gradcheck import GradCheckReport, grad_check, layer_forward
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
from .model import build, preset
from .objective import si_sdr_grad
from .signal import StftConfig, istft_adjoint, istft_array, pack_input, unpack_output, unpack_output_adjoint

LINEAR_TOL = 1e-8
NONLINEAR_TOL = 1e-3


def _init(layer, seed: int, jitter: float = 0.3) -> ParamStore:
    store = ParamStore()
    layer.init(store, RngState(seed))
    rng = np.random.default_rng(seed + 100)
    for n in store.names(trainable_only=True):
        store[n] = store[n] + jitter * rng.standard_normal(store[n].shape)
    return store


def _fn_forward(fn, grad_fn):
    def fwd(store, inputs):
        x = inputs["x"]
        return fn(x), lambda g: {"x": grad_fn(x, g)}

    return fwd


def primitive_checks(seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    """Run the per-op checks; each report carries its own tolerance."""
    rng = np.random.default_rng(seed)
    out = []

    def layer(name, lay, x, tol, **kw):
        out.append((name, grad_check(layer_forward(lay, **kw), _init(lay, seed), {"x": x}, tolerance=tol,
                                     seed=seed)))

    layer("conv.full3x3", Conv2d("c", 2, 3, "full", 3), rng.standard_normal((1, 2, 4, 5)), LINEAR_TOL)
    layer("conv.pointwise", Conv2d("c", 3, 2, "pointwise"), rng.standard_normal((2, 3, 3, 4)), LINEAR_TOL)
    layer("conv.depthwise3x3", Conv2d("c", 3, 3, "depthwise", 3), rng.standard_normal((2, 3, 4, 4)), LINEAR_TOL)
    layer("conv.depthwise1x1", Conv2d("c", 3, 3, "depthwise", 1), rng.standard_normal((2, 3, 4, 4)), LINEAR_TOL)
    layer("batchnorm.eval", BatchNorm2d("bn", 3), rng.standard_normal((2, 3, 3, 4)), LINEAR_TOL, train=False)
    layer("batchnorm.train", BatchNorm2d("bn", 3), rng.standard_normal((2, 3, 3, 4)), NONLINEAR_TOL, train=True)
    layer("layernorm", LayerNorm("ln", 5), rng.standard_normal((3, 4, 5)), NONLINEAR_TOL)
    layer("squeeze_excite", SqueezeExcite("se", 4, 2), rng.standard_normal((2, 4, 3, 3)), NONLINEAR_TOL)
    layer("mhsa", MultiHeadSelfAttention("a", 4, 2), rng.standard_normal((2, 3, 4)), NONLINEAR_TOL)

    out.append(("silu", grad_check(_fn_forward(silu, lambda x, g: g * silu_grad(x)), ParamStore(),
                                   {"x": rng.standard_normal((3, 5))}, tolerance=NONLINEAR_TOL, seed=seed)))

    x = rng.standard_normal((3, 4))
    _, mask = dropout_forward(x, 0.3, True, RngState(seed))
    out.append(("dropout", grad_check(_fn_forward(lambda v: dropout_backward(mask, v),
                                                  lambda v, g: dropout_backward(mask, g)),
                                      ParamStore(), {"x": x}, tolerance=LINEAR_TOL, seed=seed)))

    cfg = StftConfig(16, 8)
    n_frames, n = 5, 48

    def istft_real(v):
        spec = v[..., 0] + 1j * v[..., 1]
        return istft_array(spec, cfg, n)

    def istft_real_grad(v, g):
        a = istft_adjoint(g, cfg, n_frames)
        return np.stack([a.real, a.imag], axis=-1)

    out.append(("istft", grad_check(_fn_forward(istft_real, istft_real_grad), ParamStore(),
                                    {"x": rng.standard_normal((n_frames, cfg.n_bins, 2))},
                                    tolerance=LINEAR_TOL, seed=seed)))

    def unpack_real(v):
        y = unpack_output(v)
        return np.stack([y.real, y.imag])

    def unpack_real_grad(v, g):
        return unpack_output_adjoint(g[0] + 1j * g[1])

    out.append(("unpack_output", grad_check(_fn_forward(unpack_real, unpack_real_grad), ParamStore(),
                                            {"x": rng.standard_normal((4, 3, 5))}, tolerance=LINEAR_TOL,
                                            seed=seed)))
    out.append(("pack_input", grad_check(
        _fn_forward(lambda v: pack_input(v[0] + 1j * v[1]),
                    lambda v, g: np.stack([unpack_output(g).real, unpack_output(g).imag])),
        ParamStore(), {"x": rng.standard_normal((2, 2, 3, 5))}, tolerance=LINEAR_TOL, seed=seed)))

    ref = rng.standard_normal(40)
    out.append(("si_sdr", grad_check(_fn_forward(lambda v: np.array(si_sdr_grad(v, ref)[0]),
                                                 lambda v, g: g * si_sdr_grad(v, ref)[1]),
                                     ParamStore(), {"x": ref + 0.7 * rng.standard_normal(40)},
                                     tolerance=NONLINEAR_TOL, seed=seed)))
    return out


def model_check(seed: int = 0, t: int = 6, f: int = 9, max_entries: int | None = None) -> GradCheckReport:
    """End-to-end check of the micro model in eval mode with dropout off."""
    cfg = preset("gradcheck")
    store, model = build(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for n in store.names():
        if n.endswith("running_mean"):
            store[n] = rng.normal(0, 0.3, store[n].shape)
        elif n.endswith("running_var"):
            store[n] = rng.uniform(0.5, 2.0, store[n].shape)
        elif n.endswith("bias") or n.endswith("bn.weight") or n.endswith("ln.weight"):
            store[n] = store[n] + rng.normal(0, 0.3, store[n].shape)
    x = rng.standard_normal((1, 2 * cfg.M, t, f))

    def fwd(s, inputs):
        y, cache = model.forward(s, inputs["x"], train=False)
        return y, lambda g: {"x": model.backward(s, cache, g)}

    return grad_check(fwd, store, {"x": x}, tolerance=NONLINEAR_TOL, seed=seed, max_entries=max_entries)
