"""Output-to-target permutations and their separation costs.

A permutation is stored as a tuple ``p`` with ``p[o]`` the target index
assigned to output ``o``.  Total costs are built from the S x S pairwise
squared-error matrix, so evaluating all S! assignments is O(S! * S).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DataError, ShapeError

MAX_SOURCES = 8

Permutation = tuple


@lru_cache(maxsize=None)
def _perm_table(n_sources: int) -> np.ndarray:
    table = np.array(list(itertools.permutations(range(n_sources))), dtype=np.intp)
    table.setflags(write=False)
    return table


def enumerate_permutations(n_sources: int) -> list[Permutation]:
    """All bijections on ``range(n_sources)`` in lexicographic order, identity first."""
    if not isinstance(n_sources, (int, np.integer)) or not 1 <= n_sources <= MAX_SOURCES:
        raise ValueError(f"number of sources must be in [1, {MAX_SOURCES}], got {n_sources!r}")
    return [tuple(int(i) for i in row) for row in _perm_table(int(n_sources))]


def permutation_table(n_sources: int) -> np.ndarray:
    """Read-only (S!, S) integer array of :func:`enumerate_permutations`."""
    enumerate_permutations(n_sources)
    return _perm_table(int(n_sources))


def _stack(spectra, name: str) -> np.ndarray:
    arr = np.asarray([np.asarray(s, dtype=np.float64) for s in spectra])
    if arr.ndim < 2:
        raise ShapeError(f"{name} must be a sequence of equally shaped arrays")
    return arr


def pairwise_costs(outputs, targets) -> np.ndarray:
    """``c[o, t]`` = squared Frobenius distance between output ``o`` and target ``t``."""
    out = _stack(outputs, "outputs")
    tgt = _stack(targets, "targets")
    if out.shape != tgt.shape:
        raise ShapeError(f"outputs {out.shape} and targets {tgt.shape} differ in shape")
    n = out.shape[0]
    o = out.reshape(n, -1)
    t = tgt.reshape(n, -1)
    diff = o[:, None, :] - t[None, :, :]
    return np.einsum("otk,otk->ot", diff, diff)


@dataclass(frozen=True, eq=False)
class PermutationCosts:
    costs: np.ndarray
    perms: np.ndarray
    min_index: int

    @property
    def n_sources(self) -> int:
        return self.perms.shape[1]

    @property
    def min_cost(self) -> float:
        return float(self.costs[self.min_index])

    @property
    def best(self) -> Permutation:
        return tuple(int(i) for i in self.perms[self.min_index])


def _check_cost_matrix(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DataError("cost matrix contains NaN or Inf")
    return c


def total_costs(c: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """Sum ``c[o, p[o]]`` over outputs in index order for every row ``p``."""
    picked = c[np.arange(c.shape[0]), perms]
    total = picked[:, 0].copy()
    for o in range(1, c.shape[0]):
        total += picked[:, o]
    return total


def permutation_costs(c) -> PermutationCosts:
    c = _check_cost_matrix(c)
    perms = permutation_table(c.shape[0])
    costs = total_costs(c, perms)
    # argmin returns the first occurrence, so ties go to the lowest index
    return PermutationCosts(costs=costs, perms=perms, min_index=int(np.argmin(costs)))


def costs_from_spectra(outputs, targets) -> PermutationCosts:
    return permutation_costs(pairwise_costs(outputs, targets))


def min_cost_assignment(c) -> tuple[Permutation, float]:
    """Optimal assignment by the O(S^3) shortest-augmenting-path Hungarian method.

    The returned cost is re-summed in output order, the same arithmetic that
    :func:`permutation_costs` uses, so the two agree bit-for-bit.
    """
    c = _check_cost_matrix(c)
    n = c.shape[0]
    inf = math.inf
    # potentials u (rows) / v (cols); 1-based with a virtual column 0
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match_col = [0] * (n + 1)  # match_col[j] = row assigned to column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
    assignment = [0] * n
    for j in range(1, n + 1):
        assignment[match_col[j] - 1] = j - 1
    perm = tuple(assignment)
    cost = float(total_costs(c, np.array([perm], dtype=np.intp))[0])
    return perm, cost


def apply_permutation(outputs, perm) -> list:
    """Reorder outputs so that position ``perm[o]`` holds output ``o``."""
    reordered = [None] * len(perm)
    for o, t in enumerate(perm):
        reordered[t] = outputs[o]
    return reordered
