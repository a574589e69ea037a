"""Separation quality metrics, cost-gap density estimation and significance tests.

The BSS decomposition is the projection variant: the only allowed
distortion of the target is a gain, so

    s_target = <est, s_j> / ||s_j||^2 * s_j
    e_interf = P_all est - s_target
    e_artif  = est - P_all est

with ``P_all`` the orthogonal projector onto the span of all true sources.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dsp import SignalBuffer
from .errors import ConfigError, DecompositionError, DegenerateInputError, ShapeError
from .perm import enumerate_permutations

METRIC_CAP_DB = 200.0
_TINY = 1e-30


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _check_sources(estimate, true_sources):
    rates = {s.sample_rate for s in true_sources if isinstance(s, SignalBuffer)}
    if isinstance(estimate, SignalBuffer):
        rates.add(estimate.sample_rate)
    if len(rates) > 1:
        raise ConfigError(f"sample rates differ: {sorted(rates)}")
    est = _as_array(estimate)
    refs = np.stack([_as_array(s) for s in true_sources])
    if refs.shape[1] != est.size:
        raise ShapeError(f"estimate has {est.size} samples, sources have {refs.shape[1]}")
    return est, refs


def bss_decompose(estimate, true_sources, target_index: int):
    """Split ``estimate`` into (s_target, e_interf, e_artif) arrays."""
    est, refs = _check_sources(estimate, true_sources)
    if not 0 <= target_index < refs.shape[0]:
        raise IndexError(f"target index {target_index} out of range for {refs.shape[0]} sources")
    gram = refs @ refs.T
    if np.linalg.matrix_rank(gram, tol=1e-10 * max(np.trace(gram), _TINY)) < refs.shape[0]:
        raise DecompositionError("true sources are linearly dependent (or silent)")
    target = refs[target_index]
    s_target = (est @ target) / (target @ target) * target
    coeffs = np.linalg.solve(gram, refs @ est)
    projected = coeffs @ refs
    return s_target, projected - s_target, est - projected


def _ratio_db(num: float, den: float) -> float:
    # a silent estimate is the worst case even though its distortion is also zero
    if num < _TINY:
        return -METRIC_CAP_DB
    if den < _TINY:
        return METRIC_CAP_DB
    return float(np.clip(10.0 * np.log10(num / den), -METRIC_CAP_DB, METRIC_CAP_DB))


@dataclass(frozen=True)
class SourceMetrics:
    sdr_db: float
    sir_db: float
    sar_db: float


def sdr_sir_sar(estimate, true_sources, target_index: int) -> SourceMetrics:
    s_target, e_interf, e_artif = bss_decompose(estimate, true_sources, target_index)
    p_target = float(s_target @ s_target)
    noise = e_interf + e_artif
    return SourceMetrics(
        sdr_db=_ratio_db(p_target, float(noise @ noise)),
        sir_db=_ratio_db(p_target, float(e_interf @ e_interf)),
        sar_db=_ratio_db(float((s_target + e_interf) @ (s_target + e_interf)), float(e_artif @ e_artif)),
    )


@dataclass(frozen=True)
class EvalReport:
    """Per-target metrics under the SDR-maximising output assignment.

    ``permutation[o]`` is the target matched to estimate ``o``; metric lists
    are indexed by target.
    """

    sdr_db: tuple
    sir_db: tuple
    sar_db: tuple
    permutation: tuple

    @property
    def mean_sdr(self) -> float:
        return float(np.mean(self.sdr_db))


def eval_separation(estimates, true_sources) -> EvalReport:
    n = len(estimates)
    if n != len(true_sources):
        raise ShapeError(f"{n} estimates for {len(true_sources)} true sources")
    table = [[sdr_sir_sar(estimates[o], true_sources, t) for t in range(n)] for o in range(n)]
    best, best_perm = -math.inf, None
    for perm in enumerate_permutations(n):
        score = float(np.mean([table[o][perm[o]].sdr_db for o in range(n)]))
        if score > best:
            best, best_perm = score, perm
    by_target = [None] * n
    for o, t in enumerate(best_perm):
        by_target[t] = table[o][t]
    return EvalReport(
        sdr_db=tuple(m.sdr_db for m in by_target),
        sir_db=tuple(m.sir_db for m in by_target),
        sar_db=tuple(m.sar_db for m in by_target),
        permutation=best_perm,
    )


@dataclass(frozen=True, eq=False)
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def silverman_bandwidth(samples) -> float:
    x = _as_array(samples)
    std = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(std, (q75 - q25) / 1.349)
    if spread <= 0:
        # all-but-a-few identical samples: the IQR collapses while std does not
        spread = std
    return 1.06 * spread * x.size ** (-0.2)


def kde(samples, grid_points: int = 512, pad: float = 4.0) -> KdeCurve:
    """Gaussian KDE with Silverman bandwidth on ``[min - pad*h, max + pad*h]``."""
    x = _as_array(samples)
    if x.size < 2:
        raise DegenerateInputError("KDE needs at least two samples")
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError("KDE samples must be finite")
    if np.ptp(x) == 0:
        raise DegenerateInputError("KDE samples have zero variance")
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    h = silverman_bandwidth(x)
    grid = np.linspace(x.min() - pad * h, x.max() + pad * h, grid_points)
    z = (grid[:, None] - x[None, :]) / h
    density = np.exp(-0.5 * z**2).sum(axis=1) / (x.size * h * math.sqrt(2 * math.pi))
    return KdeCurve(grid=grid, density=density, bandwidth=h)


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-16) -> float:
    """Continued fraction for the regularised incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t_stat: float, dof: int) -> float:
    if math.isinf(t_stat):
        return 0.0
    return betainc(dof / 2.0, 0.5, dof / (dof + t_stat * t_stat))


@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    dof: int
    p_value: float
    mean_diff: float


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test of ``mean(a - b) == 0``."""
    a = _as_array(a)
    b = _as_array(b)
    if a.size != b.size:
        raise ShapeError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise DegenerateInputError("paired t-test needs at least two pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateInputError("differences have zero variance")
    n = d.size
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    return TTestResult(t_stat=t, dof=n - 1, p_value=student_t_two_sided_p(t, n - 1), mean_diff=float(np.mean(d)))
