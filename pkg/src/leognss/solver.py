"""Centralized WLS oracle, standalone baseline and momentum-accelerated gradient tracking."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla


class SolverError(RuntimeError):
    pass


class DivergenceError(SolverError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"gradient tracking diverged at iteration {iteration} (metric {value:.3e})")
        self.iteration = iteration


@dataclass
class NodeProblem:
    """Local least-squares block ``f_l(x, z) = 1/2 ||A x + B z - y||^2_{Q^-1}``.

    ``w`` holds the diagonal of ``Q^-1``.
    """

    A: np.ndarray
    B: np.ndarray
    w: np.ndarray
    y: np.ndarray
    node: int = 0
    _chol: tuple = field(init=False, repr=False)
    _AtW: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if np.any(self.w <= 0):
            raise SolverError(f"node {self.node}: covariance is not positive definite")
        self._AtW = self.A.T * self.w
        N = self._AtW @ self.A
        try:
            self._chol = sla.cho_factor(N)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"node {self.node}: local design is not full column rank") from exc
        s = np.linalg.svd(self.A * np.sqrt(self.w)[:, None], compute_uv=False)
        if s.size and s[-1] <= 1e-10 * s[0]:
            raise SolverError(f"node {self.node}: local design is not full column rank (under-observed)")

    @property
    def p(self) -> int:
        return self.B.shape[1]

    def with_B(self, B: np.ndarray) -> "NodeProblem":
        return NodeProblem(self.A, B, self.w, self.y, self.node)

    def local_solve(self, z: np.ndarray) -> np.ndarray:
        """Exact minimiser of ``f_l`` over x for fixed z."""
        return sla.cho_solve(self._chol, self._AtW @ (self.y - self.B @ z))

    def residual(self, x, z):
        return self.A @ x + self.B @ z - self.y

    def value(self, x, z) -> float:
        r = self.residual(x, z)
        return 0.5 * float(r @ (self.w * r))

    def grad_z(self, x, z) -> np.ndarray:
        return self.B.T @ (self.w * self.residual(x, z))

    def grad_x(self, x, z) -> np.ndarray:
        return self.A.T @ (self.w * self.residual(x, z))

    def reduced_hessian(self) -> np.ndarray:
        """Hessian in z of ``f_l`` after eliminating x."""
        K = sla.cho_solve(self._chol, self._AtW @ self.B)
        return self.B.T @ (self.w[:, None] * (self.B - self.A @ K))


# ---------------------------------------------------------------------------
# centralized and standalone solutions

@dataclass
class CentralSolution:
    x: list[np.ndarray]
    z: np.ndarray
    covariance: np.ndarray | None  # over [x_0, ..., x_{L-1}, z]; None on the Schur path
    offsets: np.ndarray  # start of every x_l block, then z
    Cz: np.ndarray | None = None

    def node_covariance(self, problems: list[NodeProblem], l: int) -> tuple[np.ndarray, np.ndarray]:
        """Marginal covariance of ``x_l`` and its cross-covariance with z."""
        xs = slice(int(self.offsets[l]), int(self.offsets[l + 1]))
        zs = slice(int(self.offsets[-1]), None)
        if self.covariance is not None:
            return self.covariance[xs, xs], self.covariance[xs, zs]
        pb = problems[l]
        N = pb._AtW @ pb.A
        K = sla.solve(N, pb._AtW @ pb.B, assume_a="pos")
        Cxz = -K @ self.Cz
        return sla.inv(N) + K @ self.Cz @ K.T, Cxz


DENSE_LIMIT = 6000


def _scaled_cholesky(N: np.ndarray, what: str):
    scale = np.sqrt(np.diag(N))
    if np.any(scale == 0):
        dead = np.flatnonzero(scale == 0).tolist()
        raise SolverError(f"unobservable {what} columns: {dead}")
    Ns = N / scale[:, None] / scale[None, :]
    try:
        return sla.cho_factor(Ns), scale
    except np.linalg.LinAlgError as exc:
        w, v = np.linalg.eigh(Ns)
        weak = np.flatnonzero(np.abs(v[:, 0]) > 0.1).tolist()
        raise SolverError(f"{what} normal matrix is singular; weak columns {weak}") from exc


def centralized_wls(problems: list[NodeProblem], full_covariance: bool | None = None) -> CentralSolution:
    """Exact minimiser of ``sum_l f_l`` through the arrow-shaped normal equations.

    Small problems assemble and factor the full normal matrix, which also gives
    the complete covariance.  Large ones (or ``full_covariance=False``) reduce
    onto z with a Schur complement and keep only the covariance of z.
    """
    sizes = [pb.A.shape[1] for pb in problems]
    p = problems[0].p
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offsets[-1]) + p
    for pb in problems:
        if pb.p != p:
            raise SolverError("all nodes must share the same global width")
    if full_covariance is None:
        full_covariance = n <= DENSE_LIMIT
    if not full_covariance:
        return _central_schur(problems, offsets)
    N = np.zeros((n, n))
    b = np.zeros(n)
    zs = slice(int(offsets[-1]), n)
    for l, pb in enumerate(problems):
        xs = slice(int(offsets[l]), int(offsets[l + 1]))
        BtW = pb.B.T * pb.w
        N[xs, xs] = pb._AtW @ pb.A
        N[xs, zs] = pb._AtW @ pb.B
        N[zs, xs] = N[xs, zs].T
        N[zs, zs] += BtW @ pb.B
        b[xs] = pb._AtW @ pb.y
        b[zs] += BtW @ pb.y
    c, scale = _scaled_cholesky(N, "network")
    sol = sla.cho_solve(c, b / scale) / scale
    cov = sla.cho_solve(c, np.eye(n)) / scale[:, None] / scale[None, :]
    xs_list = [sol[int(offsets[l]):int(offsets[l + 1])] for l in range(len(problems))]
    return CentralSolution(xs_list, sol[zs], cov, offsets, cov[zs, zs])


def _central_schur(problems: list[NodeProblem], offsets: np.ndarray) -> CentralSolution:
    p = problems[0].p
    S = np.zeros((p, p))
    h = np.zeros(p)
    parts = []
    for l, pb in enumerate(problems):
        BtW = pb.B.T * pb.w
        c, sc = _scaled_cholesky(pb._AtW @ pb.A, f"node {l}")
        Nxz = pb._AtW @ pb.B
        bx = pb._AtW @ pb.y
        K = sla.cho_solve(c, Nxz / sc[:, None]) / sc[:, None]
        k0 = sla.cho_solve(c, bx / sc) / sc
        S += BtW @ pb.B - Nxz.T @ K
        h += BtW @ pb.y - Nxz.T @ k0
        parts.append((K, k0))
    cz, scz = _scaled_cholesky(0.5 * (S + S.T), "global")
    z = sla.cho_solve(cz, h / scz) / scz
    Cz = sla.cho_solve(cz, np.eye(p)) / scz[:, None] / scz[None, :]
    xs = [k0 - K @ z for K, k0 in parts]
    return CentralSolution(xs, z, None, offsets, Cz)


def standalone_wls(problem: NodeProblem, z_fixed: np.ndarray) -> np.ndarray:
    """Node-only solution with the global states frozen at ``z_fixed``."""
    return problem.local_solve(np.asarray(z_fixed, dtype=float))


# ---------------------------------------------------------------------------
# consensus and gradient tracking

def consensus(values: np.ndarray, W: np.ndarray, rounds: int) -> np.ndarray:
    """Apply ``rounds`` neighbourhood-mixing steps; ``values`` has one row per node."""
    if rounds < 1:
        raise ValueError("consensus needs at least one round")
    V = np.asarray(values, dtype=float)
    if V.shape[0] != W.shape[0]:
        raise ValueError(f"expected {W.shape[0]} node rows, got {V.shape[0]}")
    for _ in range(rounds):
        V = W @ V
    return V


@dataclass(frozen=True)
class GTParams:
    gamma: float = 0.01
    theta: float = 0.7
    rounds: int = 20
    max_iter: int = 12_000
    tol: float = 0.0  # stop once the network-averaged gradient norm drops below; 0 disables
    z0: np.ndarray | None = None
    divergence_factor: float = 1e6
    record_every: int = 1

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be non-negative")
        if not 0.0 <= self.theta < 1.0:
            raise ValueError("theta must lie in [0, 1)")
        if self.rounds < 1:
            raise ValueError("consensus rounds must be at least 1")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")


@dataclass
class SolverTrace:
    iterations: list[int] = field(default_factory=list)
    msd: list[float] = field(default_factory=list)
    avg_grad_norm: list[float] = field(default_factory=list)
    disagreement: list[float] = field(default_factory=list)
    tracker_gap: list[float] = field(default_factory=list)
    z_mean: list[np.ndarray] = field(default_factory=list)
    x: list[np.ndarray] = field(default_factory=list)
    z: np.ndarray | None = None
    diverged_at: int | None = None
    converged_at: int | None = None

    def __len__(self):
        return len(self.iterations)

    def first_below(self, series: str, level: float) -> int | None:
        for k, v in zip(self.iterations, getattr(self, series)):
            if v <= level:
                return k
        return None

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "msd", "avg_grad_norm", "disagreement"])
            for row in zip(self.iterations, self.msd, self.avg_grad_norm, self.disagreement):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def metrics(Z: np.ndarray, grads: np.ndarray, reference: np.ndarray | None) -> dict[str, float]:
    """MSD against ``reference``, norm of the averaged gradient and disagreement.

    ``Z`` and ``grads`` hold one row per node.
    """
    zbar = Z.mean(axis=0)
    out = {
        "avg_grad_norm": float(np.linalg.norm(grads.mean(axis=0))),
        "disagreement": float(np.sum((Z - zbar) ** 2)),
        "msd": math.nan,
    }
    if reference is not None:
        out["msd"] = float(np.mean(np.sum((Z - reference) ** 2, axis=1)))
    return out


class _Nodes:
    """Per-node update kernels; identical arithmetic in sequential and threaded mode."""

    def __init__(self, problems, workers: int):
        self.problems = problems
        self.pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def map(self, fn, *cols):
        if self.pool is None:
            return [fn(*a) for a in zip(*cols)]
        return list(self.pool.map(fn, *cols))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def gt_solve(
    problems: list[NodeProblem],
    mixing: list[np.ndarray],
    params: GTParams = GTParams(),
    reference: np.ndarray | None = None,
    period: int | None = None,
    scaling: np.ndarray | None = None,
    workers: int = 1,
    raise_on_divergence: bool = True,
    keep_history: bool = False,
) -> SolverTrace:
    """Momentum-accelerated gradient tracking over a piecewise-static graph sequence.

    Every node ``l`` runs, with ``W`` the mixing matrix of the active snapshot::

        v_l   = z_l^k + theta (z_l^k - z_l^{k-1})
        z_l^{k+1} = C(v_l - gamma g_l^k, rounds)
        x_l^{k+1} = argmin_x f_l(x, z_l^{k+1})
        g_l^{k+1} = sum_q w_ql g_q^k + grad_z f_l^{k+1} - grad_z f_l^k

    ``scaling`` (a p-vector or p x p matrix ``D``) runs the iteration in the
    coordinates ``z = D z_hat``; reported states and metrics stay in z.
    ``period`` is the number of iterations each snapshot is active (defaults to
    an equal split of ``max_iter``).
    """
    L = len(problems)
    if L == 0:
        raise SolverError("no node problems")
    p = problems[0].p
    T = len(mixing)
    if T == 0:
        raise SolverError("no mixing matrices")
    if period is None:
        period = max(1, -(-max(params.max_iter, 1) // T))
    D = None
    if scaling is not None:
        D = np.diag(scaling) if np.ndim(scaling) == 1 else np.asarray(scaling, dtype=float)
        problems = [pb.with_B(pb.B @ D) for pb in problems]
    to_z = (lambda Zh: Zh) if D is None else (lambda Zh: Zh @ D.T)
    Dinv = None if D is None else np.linalg.inv(D)
    grad_out = (lambda G: G) if D is None else (lambda G: G @ Dinv)

    z0 = np.zeros(p) if params.z0 is None else np.asarray(params.z0, dtype=float)
    if D is not None:
        z0 = np.linalg.solve(D, z0)
    nodes = _Nodes(problems, workers)
    try:
        Z = np.tile(z0, (L, 1))
        Z_prev = Z.copy()
        X = nodes.map(lambda pb, z: pb.local_solve(z), problems, list(Z))
        grads = np.array(nodes.map(lambda pb, x, z: pb.grad_z(x, z), problems, X, list(Z)))
        Gt = grads.copy()
        trace = SolverTrace()

        def record(k):
            Zo = to_z(Z)
            m = metrics(Zo, grad_out(grads), reference)
            trace.iterations.append(k)
            trace.msd.append(m["msd"])
            trace.avg_grad_norm.append(m["avg_grad_norm"])
            trace.disagreement.append(m["disagreement"])
            trace.tracker_gap.append(float(np.abs(grad_out(Gt.mean(axis=0) - grads.mean(axis=0))).max()))
            if keep_history:
                trace.z_mean.append(Zo.mean(axis=0))
            return m

        m0 = record(0)
        start = m0["msd"] if reference is not None else m0["avg_grad_norm"]
        # absolute floor: a run that starts at the optimum must not trip on round-off
        start = max(start, 1.0)
        for k in range(params.max_iter):
            W = mixing[min(k // period, T - 1)]
            V = Z + params.theta * (Z - Z_prev)
            Zn = consensus(V - params.gamma * Gt, W, params.rounds)
            Xn = nodes.map(lambda pb, z: pb.local_solve(z), problems, list(Zn))
            gn = np.array(nodes.map(lambda pb, x, z: pb.grad_z(x, z), problems, Xn, list(Zn)))
            # tracker mixing uses column weights w_ql
            Gt = W.T @ Gt + gn - grads
            Z_prev, Z, X, grads = Z, Zn, Xn, gn
            if (k + 1) % params.record_every == 0 or k + 1 == params.max_iter:
                m = record(k + 1)
                val = m["msd"] if reference is not None else m["avg_grad_norm"]
                if not np.isfinite(val) or val > params.divergence_factor * start:
                    trace.diverged_at = k + 1
                    if raise_on_divergence:
                        raise DivergenceError(k + 1, val)
                    break
                if params.tol > 0 and m["avg_grad_norm"] < params.tol:
                    trace.converged_at = k + 1
                    break
        trace.x = [np.asarray(x) for x in X]
        trace.z = to_z(Z)
        return trace
    finally:
        nodes.close()


def hessian_whitening(problems: list[NodeProblem]) -> np.ndarray:
    """Symmetric inverse square root of the network-averaged reduced Hessian.

    In the coordinates ``z = D z_hat`` the averaged objective has identity
    Hessian.  Each node contributes its own reduced Hessian; one network
    average (an exact average consensus) is all that is shared.
    """
    H = sum(pb.reduced_hessian() for pb in problems) / len(problems)
    H = 0.5 * (H + H.T)
    w, v = np.linalg.eigh(H)
    if w[0] <= 1e-14 * w[-1]:
        raise SolverError("averaged reduced Hessian is singular; global states unobservable")
    return (v / np.sqrt(w)) @ v.T
