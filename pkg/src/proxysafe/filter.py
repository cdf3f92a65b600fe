"""Closed-form safety filter for a single affine barrier constraint.

The quadratic program

    min  || nu - nu_d ||^2    subject to    psi0 + psi1 . nu >= 0

has exactly one affine constraint, so its solution is the Euclidean
projection of the nominal input onto a half-space: either the nominal is
already feasible and is returned untouched, or it is shifted along psi1
by exactly the violation over ||psi1||^2.  No QP library is needed.

A two-constraint variant (used when a scenario carries two safe-set
barriers and sequential filtering lands in the corner where both bind)
solves the same projection over the intersection of two half-spaces by
enumerating the possible active sets, which is still closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

__all__ = ["QpInstance", "Infeasible", "solve_cbf_qp", "solve_cbf_qp_pair",
           "EPS_PSI", "FEAS_TOL"]

EPS_PSI = 1e-10   # below this norm, psi1 is treated as zero
FEAS_TOL = 1e-9   # slack allowed on returned constraint values


class Infeasible(Exception):
    """The constraint cannot be met: psi1 is (numerically) zero while the
    constant part is negative.  Under the theory this cannot happen when
    the barrier conditions hold, so reaching it means the conditions were
    not actually satisfied or tolerances were exhausted; the simulator
    aborts the run and reports the offending values."""

    def __init__(self, psi0: float, psi1: Sequence[float]):
        self.psi0 = float(psi0)
        self.psi1 = [float(v) for v in psi1]
        super().__init__(
            f"barrier constraint infeasible: psi0={self.psi0!r}, psi1={self.psi1!r}")


@dataclass(frozen=True)
class QpInstance:
    """One filtering problem: nominal input and constraint row."""

    nu_d: tuple
    psi0: float
    psi1: tuple

    def __post_init__(self):
        object.__setattr__(self, "nu_d", tuple(float(v) for v in self.nu_d))
        object.__setattr__(self, "psi1", tuple(float(v) for v in self.psi1))
        object.__setattr__(self, "psi0", float(self.psi0))
        if len(self.nu_d) != len(self.psi1):
            raise ValueError("nu_d and psi1 must have the same length")
        values = (*self.nu_d, self.psi0, *self.psi1)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("QpInstance entries must be finite")


def _dot(a: Sequence[float], b: Sequence[float]) -> float:
    return sum(x * y for x, y in zip(a, b))


def project_halfspace(nu_d: Sequence[float], psi0: float,
                      psi1: Sequence[float]) -> list:
    """Project nu_d onto {nu : psi0 + psi1 . nu >= 0}.

    Returns the nominal values unchanged when they already satisfy the
    constraint; raises Infeasible when psi1 is numerically zero and the
    constraint is violated.
    """
    margin = psi0 + _dot(psi1, nu_d)
    if margin >= 0.0:
        return list(nu_d)
    nrm2 = _dot(psi1, psi1)
    if nrm2 <= EPS_PSI * EPS_PSI:
        raise Infeasible(psi0, psi1)
    scale = -margin / nrm2
    return [v + scale * p for v, p in zip(nu_d, psi1)]


def solve_cbf_qp(q: QpInstance) -> list:
    """Solve the single-constraint CBF-QP exactly."""
    return project_halfspace(q.nu_d, q.psi0, q.psi1)


def solve_cbf_qp_pair(nu_d: Sequence[float],
                      psi0_a: float, psi1_a: Sequence[float],
                      psi0_b: float, psi1_b: Sequence[float]) -> list:
    """Project nu_d onto the intersection of two half-space constraints.

    Active-set enumeration: the optimum either is the nominal, lies on one
    of the two boundaries (single projection), or sits in the corner where
    both constraints are tight (2x2 Gram system).  Every candidate is
    checked for primal feasibility and the feasible one closest to the
    nominal wins.  Degenerate (zero-row) constraints are constant: they
    are dropped when slack and fatal when violated.
    """
    nu_d = [float(v) for v in nu_d]
    rows = [(float(psi0_a), [float(v) for v in psi1_a]),
            (float(psi0_b), [float(v) for v in psi1_b])]

    live = []
    for a, b in rows:
        if _dot(b, b) <= EPS_PSI * EPS_PSI:
            if a + _dot(b, nu_d) < -FEAS_TOL:
                raise Infeasible(a, b)
        else:
            live.append((a, b))

    def feasible(nu):
        return all(a + _dot(b, nu) >= -FEAS_TOL for a, b in rows)

    candidates = []
    if feasible(nu_d):
        candidates.append(nu_d)
    for a, b in live:
        try:
            p = project_halfspace(nu_d, a, b)
        except Infeasible:
            continue
        if feasible(p):
            candidates.append(p)
    if len(live) == 2:
        (a1, b1), (a2, b2) = live
        g11 = _dot(b1, b1)
        g12 = _dot(b1, b2)
        g22 = _dot(b2, b2)
        det = g11 * g22 - g12 * g12
        if abs(det) > 1e-14 * g11 * g22:
            m1 = a1 + _dot(b1, nu_d)
            m2 = a2 + _dot(b2, nu_d)
            l1 = (-m1 * g22 + m2 * g12) / det
            l2 = (-m2 * g11 + m1 * g12) / det
            corner = [v + l1 * p + l2 * q for v, p, q in zip(nu_d, b1, b2)]
            if feasible(corner):
                candidates.append(corner)

    if not candidates:
        # intersection is empty (opposing constraints with no gap)
        worst = min(rows, key=lambda row: row[0] + _dot(row[1], nu_d))
        raise Infeasible(worst[0], worst[1])

    def objective(nu):
        return sum((v - w) ** 2 for v, w in zip(nu, nu_d))

    return min(candidates, key=objective)
