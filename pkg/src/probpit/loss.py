"""Probabilistic PIT: a soft minimum over permutation costs.

Treating the output-to-target assignment as a latent variable with a
uniform prior and Gaussian estimation error of variance sigma^2 turns the
training objective into

    loss = -gamma * log sum_Z exp(-g(Z) / gamma),    gamma = 2 sigma^2,

with ``g(Z)`` the summed squared error under assignment ``Z`` (the
parameter-free constant of the log-likelihood is dropped).  It is evaluated
in the shifted form

    loss = g_min - gamma * log(1 + sum_{Z != Z_min} exp((g_min - g(Z)) / gamma))

whose exponents are all <= 0.  ``gamma = 0`` is plain PIT: the minimum cost.
The gradient with respect to each output is the posterior-weighted average
of the per-permutation squared-error gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .perm import PermutationCosts, _stack, costs_from_spectra


@dataclass(frozen=True, eq=False)
class LossResult:
    loss: float
    weights: np.ndarray
    min_index: int
    costs: PermutationCosts
    grad: np.ndarray | None = None

    @property
    def min_cost(self) -> float:
        return self.costs.min_cost


def gamma_from_sigma2(sigma2: float) -> float:
    """Smoothing factor for an estimation-error variance ``sigma2``."""
    if not sigma2 > 0:
        raise ValueError(f"sigma^2 must be positive, got {sigma2}")
    return 2.0 * sigma2


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if np.isnan(gamma) or gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    return gamma


def _shifted(values: np.ndarray, min_index: int, gamma: float):
    """exp((v_min - v) / gamma) and log(1 + sum over non-minimal entries)."""
    scaled = np.exp((values[min_index] - values) / gamma)
    others = np.delete(scaled, min_index)
    return scaled, np.log1p(others.sum()) if others.size else 0.0


def softmin(values, gamma: float) -> float:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("softmin of an empty sequence")
    if not np.all(np.isfinite(v)):
        raise DataError("softmin input contains NaN or Inf")
    gamma = _check_gamma(gamma)
    i = int(np.argmin(v))
    if gamma == 0.0:
        return float(v[i])
    _, log_term = _shifted(v, i, gamma)
    return float(v[i] - gamma * log_term)


def pit_loss(pc: PermutationCosts) -> LossResult:
    weights = np.zeros(pc.costs.size)
    weights[pc.min_index] = 1.0
    return LossResult(loss=pc.min_cost, weights=weights, min_index=pc.min_index, costs=pc)


def prob_pit_loss(pc: PermutationCosts, gamma: float) -> LossResult:
    gamma = _check_gamma(gamma)
    if not np.all(np.isfinite(pc.costs)):
        raise DataError("permutation costs contain NaN or Inf")
    if gamma == 0.0:
        return pit_loss(pc)
    scaled, log_term = _shifted(pc.costs, pc.min_index, gamma)
    weights = scaled / scaled.sum()
    loss = pc.min_cost - gamma * log_term
    return LossResult(loss=float(loss), weights=weights, min_index=pc.min_index, costs=pc)


def assignment_matrix(weights: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """``P[o, t]``: posterior probability that output ``o`` is matched to target ``t``."""
    n = perms.shape[1]
    p = np.zeros((n, n))
    for o in range(n):
        np.add.at(p[o], perms[:, o], weights)
    return p


def prob_pit_grad(outputs, targets, gamma: float) -> LossResult:
    """Loss, posterior weights and d(loss)/d(outputs) for one utterance.

    ``outputs`` and ``targets`` are sequences of S equally shaped magnitude
    arrays.  The returned ``grad`` has shape ``(S, *spectrum_shape)``.
    """
    out = _stack(outputs, "outputs")
    tgt = _stack(targets, "targets")
    res = prob_pit_loss(costs_from_spectra(out, tgt), gamma)
    p = assignment_matrix(res.weights, res.costs.perms)
    n = out.shape[0]
    expected = (p @ tgt.reshape(n, -1)).reshape(out.shape)
    grad = 2.0 * (out - expected)
    return LossResult(res.loss, res.weights, res.min_index, res.costs, grad)


def pit_grad(outputs, targets) -> LossResult:
    return prob_pit_grad(outputs, targets, 0.0)
