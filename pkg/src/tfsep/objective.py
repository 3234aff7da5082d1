"""SI-SDR / SDR metrics, improvements and utterance-level PIT loss."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

CLAMP_DB = 60.0
_DB = 10.0 / np.log(10.0)


def _validate(est, ref):
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"estimate shape {est.shape} != reference shape {ref.shape}")
    if est.ndim != 1 or est.size < 2:
        raise ValueError(f"expected 1-D signals with at least 2 samples, got {est.shape}")
    return est, ref


def _ratio_db(num: float, den: float) -> float:
    if num <= 0.0:
        return -CLAMP_DB
    if den <= 0.0:
        return CLAMP_DB
    return float(np.clip(_DB * np.log(num / den), -CLAMP_DB, CLAMP_DB))


def si_sdr(est, ref, zero_mean: bool = True) -> float:
    """Scale-invariant SDR in dB, clamped to [-60, 60]."""
    return si_sdr_grad(est, ref, zero_mean)[0]


def si_sdr_grad(est, ref, zero_mean: bool = True):
    """SI-SDR and its gradient w.r.t. ``est`` (zero where the clamp is active)."""
    est, ref = _validate(est, ref)
    if zero_mean:
        est = est - est.mean()
        ref = ref - ref.mean()
    rr = ref @ ref
    if rr <= 0.0:
        raise ValueError("reference has zero energy")
    alpha = (est @ ref) / rr
    target = alpha * ref
    noise = est - target
    tt, nn = target @ target, noise @ noise
    value = _ratio_db(tt, nn)
    if abs(value) >= CLAMP_DB:
        return value, np.zeros_like(est)
    grad = _DB * (2.0 * target / tt - 2.0 * noise / nn)
    if zero_mean:
        grad = grad - grad.mean()
    return value, grad


def sdr(est, ref, zero_mean: bool = True) -> float:
    """Plain SDR (no rescaling of the reference), same clamp as :func:`si_sdr`."""
    est, ref = _validate(est, ref)
    if zero_mean:
        est = est - est.mean()
        ref = ref - ref.mean()
    if ref @ ref <= 0.0:
        raise ValueError("reference has zero energy")
    err = est - ref
    return _ratio_db(ref @ ref, err @ err)


def _permutations(n: int):
    if n > 6:
        raise ValueError(f"PIT enumeration limited to 6 sources, got {n}")
    return list(itertools.permutations(range(n)))


def pit_loss(estimates, references, with_grad: bool = False):
    """Minimum over permutations of mean negative SI-SDR.

    ``best_perm[i]`` is the reference index matched with estimate ``i``. Ties
    resolve to the lexicographically smallest permutation. With
    ``with_grad=True`` also returns d loss / d estimates for the chosen
    permutation.
    """
    est = np.asarray(estimates, dtype=np.float64)
    ref = np.asarray(references, dtype=np.float64)
    if est.ndim != 2 or ref.ndim != 2:
        raise ValueError("estimates and references must be (I, N)")
    if est.shape[0] != ref.shape[0]:
        raise ValueError(f"{est.shape[0]} estimates vs {ref.shape[0]} references")
    if not np.all(np.isfinite(est)):
        raise FloatingPointError("non-finite estimates")
    n_src = est.shape[0]
    pair = np.empty((n_src, n_src))
    grads = {}
    for i in range(n_src):
        for j in range(n_src):
            pair[i, j], grads[i, j] = si_sdr_grad(est[i], ref[j])
    best_perm, best = None, np.inf
    for perm in _permutations(n_src):
        value = -np.mean([pair[i, perm[i]] for i in range(n_src)])
        if value < best:
            best, best_perm = value, perm
    if not with_grad:
        return float(best), best_perm
    g = np.stack([-grads[i, best_perm[i]] / n_src for i in range(n_src)])
    return float(best), best_perm, g


@dataclass
class ImprovementReport:
    best_perm: tuple
    si_sdr: np.ndarray
    sdr: np.ndarray
    si_sdr_mix: np.ndarray
    sdr_mix: np.ndarray

    @property
    def si_sdri(self) -> float:
        return float(np.mean(self.si_sdr - self.si_sdr_mix))

    @property
    def sdri(self) -> float:
        return float(np.mean(self.sdr - self.sdr_mix))


def improvements(estimates, references, mixture) -> ImprovementReport:
    """Metrics per reference under the best permutation, and their mixture baselines."""
    est = np.asarray(estimates, dtype=np.float64)
    ref = np.asarray(references, dtype=np.float64)
    mix = np.asarray(mixture, dtype=np.float64)
    if mix.shape != ref.shape[1:]:
        raise ValueError(f"mixture shape {mix.shape} != reference length {ref.shape[1:]}")
    _, perm = pit_loss(est, ref)
    n = ref.shape[0]
    # reorder so that row j is the estimate assigned to reference j
    inv = [0] * n
    for i, j in enumerate(perm):
        inv[j] = i
    matched = est[inv]
    return ImprovementReport(
        best_perm=tuple(perm),
        si_sdr=np.array([si_sdr(matched[j], ref[j]) for j in range(n)]),
        sdr=np.array([sdr(matched[j], ref[j]) for j in range(n)]),
        si_sdr_mix=np.array([si_sdr(mix, ref[j]) for j in range(n)]),
        sdr_mix=np.array([sdr(mix, ref[j]) for j in range(n)]),
    )


def si_sdri(estimates, references, mixture) -> float:
    return improvements(estimates, references, mixture).si_sdri


def sdri(estimates, references, mixture) -> float:
    return improvements(estimates, references, mixture).sdri


def report_header(n_src: int) -> str:
    cols = ["id", "best_perm"]
    cols += [f"si_sdr_{j}" for j in range(n_src)] + [f"sdr_{j}" for j in range(n_src)]
    cols += ["si_sdri", "sdri"]
    return ",".join(cols)


def report_line(utt_id: str, rep: ImprovementReport) -> str:
    fields = [utt_id, "-".join(str(p) for p in rep.best_perm)]
    fields += [f"{v:.4f}" for v in rep.si_sdr] + [f"{v:.4f}" for v in rep.sdr]
    fields += [f"{rep.si_sdri:.4f}", f"{rep.sdri:.4f}"]
    return ",".join(fields)
