"""Finite-difference verification of hand-written backward rules."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import ParamStore


class GradCheckError(AssertionError):
    pass


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)
    worst: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failing(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    def summary(self) -> str:
        lines = [f"grad check: max rel err {self.max_error:.3e} (tol {self.tolerance:.1e}) "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for name, err in sorted(self.errors.items(), key=lambda kv: -kv[1]):
            flag = "" if err < self.tolerance else "  <-- FAIL"
            lines.append(f"  {name:50s} {err:.3e}{flag}")
            if err >= self.tolerance:
                for idx, a, n in self.worst[name]:
                    lines.append(f"      at {idx}: analytic {a:+.6e} numeric {n:+.6e}")
        return "\n".join(lines)

    def check(self) -> "GradCheckReport":
        if not self.passed:
            raise GradCheckError(self.summary())
        return self


def _rel_error(a: np.ndarray, n: np.ndarray, floor: float) -> float:
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), floor)
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def grad_check(
    forward: Callable,
    store: ParamStore,
    inputs: dict,
    tolerance: float = 1e-3,
    seed: int = 0,
    check_inputs: bool = True,
    max_entries: int | None = None,
    n_worst: int = 3,
    atol: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``forward(store, inputs)`` must return ``(output, backward)`` where
    ``backward(grad_output)`` accumulates parameter gradients into ``store``
    and returns a dict of input gradients. The scalar probed is
    ``sum(r * output)`` for a fixed random ``r``. The error for each tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)`` with
    ``floor = atol * max(1, |probe loss|)``, so tensors whose true gradient is
    zero (e.g. attention key biases) are judged against finite-difference
    noise rather than against zero. Step size is ``1e-5 * max(1, |value|)``.
    Everything runs in float64.

    ``max_entries`` caps the number of probed entries per tensor (sampled
    without replacement) to bound the cost on larger models.
    """
    store = store.astype(np.float64)
    inputs = {k: np.asarray(v, dtype=np.float64).copy() for k, v in inputs.items()}
    rng = np.random.default_rng(seed)

    out, backward = forward(store, inputs)
    probe = rng.standard_normal(np.shape(out))
    floor = atol * max(1.0, abs(float(np.sum(probe * out))))
    store.zero_grad()
    in_grads = backward(probe)

    def loss() -> float:
        o, _ = forward(store, inputs)
        return float(np.sum(probe * o))

    targets = []
    for name in store.names(trainable_only=True):
        targets.append((name, store[name], store.grad(name).copy()))
    if check_inputs:
        for name, g in (in_grads or {}).items():
            targets.append((f"input:{name}", inputs[name], np.asarray(g)))

    report = GradCheckReport(tolerance)
    for name, arr, analytic in targets:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            h = 1e-5 * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = loss()
            flat[i] = orig - h
            lm = loss()
            flat[i] = orig
            numeric[j] = (lp - lm) / (2 * h)
        a = analytic.reshape(-1)[idx]
        report.errors[name] = _rel_error(a, numeric, floor)
        order = np.argsort(-np.abs(a - numeric))[:n_worst]
        report.worst[name] = [(int(idx[o]), float(a[o]), float(numeric[o])) for o in order]
    return report


def layer_forward(layer, **kwargs) -> Callable:
    """Adapt a layer with ``forward(store, x, ...)``/``backward(store, cache, gy)``."""

    def fwd(store, inputs):
        y, cache = layer.forward(store, inputs["x"], **kwargs)

        def bwd(gy):
            return {"x": layer.backward(store, cache, gy)}

        return y, bwd

    return fwd
