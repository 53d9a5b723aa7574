"""Feature-space transport costs and exact optimal transport on finite support.

The ground cost between labeled feature points is half the squared Euclidean
distance, and moving mass across labels is prohibited outright.  Prohibition
is represented by the :data:`INFEASIBLE` sentinel, never by a float infinity:
infeasible arcs are deleted before any linear program is assembled, so no Inf
ever enters LP arithmetic.

This module is a verification oracle, not a production transport solver;
supports are capped at 64 atoms.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

MAX_ATOMS = 64
_MASS_TOL = 1e-9


class _Infeasible:
    """Singleton marker for prohibited transport (label mismatch)."""

    __slots__ = ()
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INFEASIBLE"

    def __bool__(self):
        return False


INFEASIBLE = _Infeasible()


class DiscreteDistribution:
    """Finite weighted point set in feature space, with one label per atom."""

    __slots__ = ("points", "labels", "weights")

    def __init__(self, points, labels, weights):
        self.points = np.asarray(points, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValueError("points must be a (n, p) array")
        n = self.points.shape[0]
        if self.labels.shape != (n,) or self.weights.shape != (n,):
            raise ValueError("labels/weights must have one entry per atom")
        if n > MAX_ATOMS:
            raise ValueError(f"support of {n} atoms exceeds oracle cap {MAX_ATOMS}")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {self.weights.sum()!r}, not 1")

    def __len__(self):
        return self.points.shape[0]


def cost(z, y, z2, y2):
    """Ground cost: 0.5 * ||z - z2||^2 for equal labels, else INFEASIBLE."""
    z = np.asarray(z, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z.shape != z2.shape:
        raise ValueError(f"dimension mismatch: {z.shape} vs {z2.shape}")
    if int(y) != int(y2):
        return INFEASIBLE
    d = z - z2
    return 0.5 * float(d @ d)


def cost_theta(net, x, y, x2, y2):
    """Ground cost measured between the feature embeddings of two inputs."""
    from .net import features

    if int(y) != int(y2):
        return INFEASIBLE
    return cost(features(net, x), y, features(net, x2), y2)


def _pairwise_half_sq(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return 0.5 * np.einsum("ijk,ijk->ij", diff, diff)


def _solve_transport(costs, row_mass, col_mass):
    """Exact min-cost transport between matched masses (LP, HiGHS)."""
    n, k = costs.shape
    a_eq = []
    b_eq = []
    for i in range(n):
        row = np.zeros(n * k)
        row[i * k : (i + 1) * k] = 1.0
        a_eq.append(row)
        b_eq.append(row_mass[i])
    for j in range(k):
        col = np.zeros(n * k)
        col[j::k] = 1.0
        a_eq.append(col)
        b_eq.append(col_mass[j])
    res = linprog(
        costs.ravel(),
        A_eq=np.asarray(a_eq),
        b_eq=np.asarray(b_eq),
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def wasserstein(p, q):
    """Exact transport distance between two finite distributions.

    Returns INFEASIBLE when some label's marginal masses differ (mass cannot
    cross labels).  Because cross-label arcs are deleted, the problem splits
    into one independent transport LP per label.
    """
    if not isinstance(p, DiscreteDistribution) or not isinstance(q, DiscreteDistribution):
        raise TypeError("wasserstein expects DiscreteDistribution inputs")
    if p.points.shape[1] != q.points.shape[1]:
        raise ValueError("distributions live in different feature dimensions")

    total = 0.0
    for label in np.union1d(p.labels, q.labels):
        pi = np.flatnonzero(p.labels == label)
        qi = np.flatnonzero(q.labels == label)
        mass_p = float(p.weights[pi].sum())
        mass_q = float(q.weights[qi].sum())
        if abs(mass_p - mass_q) > _MASS_TOL:
            return INFEASIBLE
        if mass_p <= _MASS_TOL:
            continue
        costs = _pairwise_half_sq(p.points[pi], q.points[qi])
        total += _solve_transport(costs, p.weights[pi], q.weights[qi])
    return total


def grid_surrogate_value(q, losses, atom_index, gamma):
    """Per-atom penalized maximum over the grid: max_k { l_k - gamma c_ik }.

    Only grid points sharing the atom's label compete; cross-label points are
    excluded (their cost is INFEASIBLE).
    """
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    same = np.flatnonzero(q.labels == q.labels[atom_index])
    diff = q.points[same] - q.points[atom_index]
    costs = 0.5 * np.einsum("ij,ij->i", diff, diff)
    return float(np.max(losses[same] - gamma * costs))


def grid_penalty_reference(q, losses, gamma):
    """Weighted per-atom maxima: sum_i q_i max_k { l_k - gamma c_ik }."""
    losses = np.asarray(losses, dtype=np.float64)
    active = np.flatnonzero(q.weights > 0)
    return float(
        sum(q.weights[i] * grid_surrogate_value(q, losses, i, gamma) for i in active)
    )


def penalty_sup_oracle(losses, q, gamma):
    """Exact supremum of E_P[loss] - gamma * D(P, Q) over P on Q's grid.

    Solved as one LP over couplings whose second marginal is pinned to Q's
    weights while the first marginal ranges freely; same-label arcs only.
    This is the brute-force side of the duality check -- it never uses the
    per-atom decomposition that :func:`grid_penalty_reference` exploits.
    """
    if not isinstance(q, DiscreteDistribution):
        raise TypeError("penalty_sup_oracle expects a DiscreteDistribution grid")
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != (len(q),):
        raise ValueError("need one loss value per grid atom")

    active = np.flatnonzero(q.weights > 0)
    arcs = []  # (target_index, source_atom, gain)
    for j in active:
        same = np.flatnonzero(q.labels == q.labels[j])
        diff = q.points[same] - q.points[j]
        costs = 0.5 * np.einsum("ij,ij->i", diff, diff)
        for i, c in zip(same, costs):
            arcs.append((i, j, losses[i] - gamma * c))

    n_arcs = len(arcs)
    a_eq = np.zeros((len(active), n_arcs))
    for col, (_, j, _) in enumerate(arcs):
        a_eq[np.searchsorted(active, j), col] = 1.0
    b_eq = q.weights[active]
    gains = np.array([g for _, _, g in arcs])
    res = linprog(-gains, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"penalty LP failed: {res.message}")
    return float(-res.fun)
