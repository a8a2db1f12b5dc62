"""Integer ambiguity fixing: bootstrapping, exhaustive ILS and the conditional update.

Ambiguities are in cycles.  The fixing order used throughout is the greedy
order of increasing conditional variance: at every step the ambiguity with
the smallest variance given the ones already fixed goes next.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import erf

ILS_MAX_DIM = 12
_CHUNK = 1 << 15


class AmbiguityError(ValueError):
    pass


@dataclass
class FloatAmbiguities:
    a: np.ndarray
    Qa: np.ndarray
    Qba: np.ndarray | None = None

    def __post_init__(self):
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        self.Qa = np.atleast_2d(np.asarray(self.Qa, dtype=float))
        n = self.a.size
        if self.Qa.shape != (n, n):
            raise AmbiguityError(f"Q_a has shape {self.Qa.shape}, expected {(n, n)}")
        if not np.allclose(self.Qa, self.Qa.T, rtol=1e-10, atol=0.0):
            raise AmbiguityError("Q_a is not symmetric")
        if n:
            try:
                np.linalg.cholesky(self.Qa)
            except np.linalg.LinAlgError as exc:
                raise AmbiguityError("Q_a is not positive definite") from exc
        if self.Qba is not None:
            self.Qba = np.atleast_2d(np.asarray(self.Qba, dtype=float))
            if self.Qba.shape[1] != n:
                raise AmbiguityError("Q_ba column count does not match the ambiguities")

    @property
    def dim(self) -> int:
        return self.a.size


def conditional_order(Qa: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy fixing order and the conditional standard deviations along it."""
    Q = np.array(Qa, dtype=float)
    free = list(range(Q.shape[0]))
    order, sd = [], []
    while free:
        j = free[int(np.argmin([Q[i, i] for i in free]))]
        q = Q[:, j].copy()
        order.append(j)
        sd.append(math.sqrt(max(q[j], 0.0)))
        Q -= np.outer(q, q) / q[j]
        free.remove(j)
    return np.array(order, dtype=int), np.array(sd)


def _bootstrap(a: np.ndarray, Q: np.ndarray) -> np.ndarray:
    a = a.astype(float).copy()
    Q = Q.astype(float).copy()
    out = np.zeros(a.size)
    free = list(range(a.size))
    while free:
        j = free[int(np.argmin([Q[i, i] for i in free]))]
        out[j] = np.round(a[j])
        q = Q[:, j].copy()
        a -= q / q[j] * (a[j] - out[j])
        Q -= np.outer(q, q) / q[j]
        free.remove(j)
    return out


def bootstrap_fix(fl: FloatAmbiguities) -> np.ndarray:
    """Integer bootstrapping: sequential conditional rounding."""
    return _bootstrap(fl.a, fl.Qa).astype(np.int64)


def ils_objective(a_hat: np.ndarray, Qa: np.ndarray, cands: np.ndarray) -> np.ndarray:
    """``(a_hat - a)^T Qa^-1 (a_hat - a)`` for every row of ``cands``."""
    Lc = np.linalg.cholesky(Qa)
    r = solve_triangular(Lc, (a_hat[None, :] - cands).T, lower=True)
    return np.sum(r * r, axis=0)


def ils_enumerate(fl: FloatAmbiguities, radius: int = 2) -> np.ndarray:
    """Exhaustive integer least squares over the box ``round(a) +- radius``.

    Candidates are visited in lexicographic order and only a strictly smaller
    objective replaces the incumbent, so ties go to the lexicographically
    smallest vector.
    """
    n = fl.dim
    if n > ILS_MAX_DIM:
        raise AmbiguityError(f"enumeration guard: dimension {n} exceeds {ILS_MAX_DIM}")
    if radius < 0:
        raise AmbiguityError("radius must be non-negative")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    centre = np.round(fl.a)
    offsets = np.arange(-radius, radius + 1, dtype=float)
    best_val, best = math.inf, None
    it = itertools.product(offsets, repeat=n)
    while True:
        block = np.array(list(itertools.islice(it, _CHUNK)))
        if block.size == 0:
            break
        cands = centre + block
        vals = ils_objective(fl.a, fl.Qa, cands)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val, best = float(vals[k]), cands[k]
    return best.astype(np.int64)


def ils_radius_stable(fl: FloatAmbiguities, radius: int = 2) -> bool:
    """Self-check: growing the search box by one must not move the minimiser."""
    return bool(np.array_equal(ils_enumerate(fl, radius), ils_enumerate(fl, radius + 1)))


def bootstrap_success_rate(sd: np.ndarray) -> float:
    """Success probability of bootstrapping given conditional standard deviations."""
    sd = np.asarray(sd, dtype=float)
    if sd.size == 0:
        return 1.0
    return float(np.prod(erf(1.0 / (2.0 * math.sqrt(2.0) * np.maximum(sd, 1e-300)))))


@dataclass
class BlockReport:
    block: int
    dimension: int
    success: bool
    residual: float
    success_rate: float


@dataclass
class FixReport:
    blocks: list[BlockReport] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return all(b.success for b in self.blocks)

    @property
    def residual(self) -> float:
        return float(math.sqrt(sum(b.residual ** 2 for b in self.blocks)))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "dimension", "success", "residual"])
            for b in self.blocks:
                w.writerow([b.block, b.dimension, int(b.success), repr(b.residual)])


def fix_blockwise(
    fl: FloatAmbiguities,
    block: int = ILS_MAX_DIM,
    method: str = "bootstrap",
    radius: int = 2,
    success_threshold: float = 0.99,
) -> tuple[np.ndarray, FixReport]:
    """Fix a large ambiguity vector in blocks of at most ``block`` entries.

    Blocks are consecutive runs of the conditional-variance order; each block
    is fixed conditionally on all earlier blocks.  ``method`` is
    ``"bootstrap"`` or ``"ils"``.  A block is flagged successful when its
    bootstrapped success rate reaches ``success_threshold``; the flag is only
    reported, never acted upon.
    """
    if not 1 <= block <= ILS_MAX_DIM:
        raise AmbiguityError(f"block size must lie in [1, {ILS_MAX_DIM}]")
    if method not in ("bootstrap", "ils"):
        raise AmbiguityError(f"unknown fixing method {method!r}")
    n = fl.dim
    order, _ = conditional_order(fl.Qa)
    a = fl.a.copy()
    Q = fl.Qa.copy()
    fixed = np.zeros(n)
    report = FixReport()
    for b, s in enumerate(range(0, n, block)):
        idx = order[s:s + block]
        Qb = Q[np.ix_(idx, idx)]
        Qb = 0.5 * (Qb + Qb.T)
        sub = FloatAmbiguities(a[idx], Qb)
        ints = bootstrap_fix(sub) if method == "bootstrap" else ils_enumerate(sub, radius)
        res = float(math.sqrt(ils_objective(sub.a, Qb, ints[None, :].astype(float))[0]))
        rate = bootstrap_success_rate(conditional_order(Qb)[1])
        report.blocks.append(BlockReport(b, idx.size, rate >= success_threshold, res, rate))
        fixed[idx] = ints
        # condition the remaining entries on this block
        rest = np.setdiff1d(np.arange(n), order[:s + block])
        if rest.size:
            K = np.linalg.solve(Qb, Q[np.ix_(idx, rest)]).T
            a[rest] -= K @ (a[idx] - ints)
            Q[np.ix_(rest, rest)] -= K @ Q[np.ix_(idx, rest)]
    return fixed.astype(np.int64), report


@dataclass
class FixedSolution:
    a: np.ndarray
    b: np.ndarray
    report: FixReport
    Qb: np.ndarray | None = None


def fix_solution(
    b_hat: np.ndarray,
    fl: FloatAmbiguities,
    a_check: np.ndarray,
    Qb: np.ndarray | None = None,
    report: FixReport | None = None,
) -> FixedSolution:
    """Conditional update ``b = b_hat - Q_ba Q_a^-1 (a_hat - a_check)``.

    When the float covariance ``Qb`` of the remaining states is given, the
    fixed-solution covariance ``Qb - Q_ba Q_a^-1 Q_ab`` is returned too.
    """
    a_check = np.asarray(a_check)
    if a_check.shape != fl.a.shape:
        raise AmbiguityError("fixed ambiguities do not match the float vector")
    if not np.all(a_check == np.round(a_check)):
        raise AmbiguityError("fixed ambiguities must be integers")
    b_hat = np.asarray(b_hat, dtype=float)
    if fl.Qba is None:
        raise AmbiguityError("fix_solution needs the cross-covariance Q_ba")
    if fl.Qba.shape[0] != b_hat.size:
        raise AmbiguityError("Q_ba row count does not match the remaining states")
    corr = np.linalg.solve(fl.Qa, fl.a - a_check)
    b = b_hat - fl.Qba @ corr
    Qf = None
    if Qb is not None:
        Qf = np.asarray(Qb, dtype=float) - fl.Qba @ np.linalg.solve(fl.Qa, fl.Qba.T)
    if report is None:
        res = float(math.sqrt(max((fl.a - a_check) @ corr, 0.0)))
        report = FixReport([BlockReport(0, fl.dim, True, res, math.nan)])
    return FixedSolution(a_check.astype(np.int64), b, report, Qf)
