"""Network design matrix, S-basis construction and the full-rank estimable model.

The rank-deficient design ``A`` is assembled block by block.  The null space is
spanned by nine families of directions (one per deficiency type); the S-basis
fixes each family by constraining a set of "pivot" parameters: all clock and
hardware states of receiver 0, the ionosphere-free and geometry-free code
biases of every other receiver and satellite, and the ambiguities on the edges
of a spanning tree of the receiver/satellite visibility graph.  The kept
columns of ``A`` form ``A_tilde = A S``.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constellation import EpochGeometry
from .layout import CODE, DOPPLER, PHASE, Layout
from .observation import FrequencyPlan

RANK_RTOL = 1e-10

DEFICIENCY_TYPES = (
    "receiver/satellite clocks and hardware biases (common shift)",
    "receiver clocks vs receiver hardware biases",
    "satellite clocks vs satellite hardware biases",
    "receiver hardware biases vs ionospheric delays",
    "satellite hardware biases vs ionospheric delays",
    "receiver hardware biases vs ambiguities",
    "satellite hardware biases vs ambiguities",
)


class EstimabilityError(ValueError):
    pass


def deficiency_count(L: int, G: int, F: int) -> int:
    """Dimension of the null space of the network design matrix."""
    if L < 1 or G < 1 or F < 2:
        raise ValueError("need L >= 1, G >= 1, F >= 2")
    return 2 + 2 * F + (2 + F) * (L - 1 + G)


def mu_if(plan: FrequencyPlan) -> np.ndarray:
    mu = plan.mu
    out = np.zeros(plan.F)
    out[0], out[1] = mu[1] / (mu[1] - mu[0]), -mu[0] / (mu[1] - mu[0])
    return out


def mu_gf(plan: FrequencyPlan) -> np.ndarray:
    mu = plan.mu
    out = np.zeros(plan.F)
    out[0], out[1] = -1.0 / (mu[1] - mu[0]), 1.0 / (mu[1] - mu[0])
    return out


# ---------------------------------------------------------------------------
# design matrix

@dataclass
class DesignSystem:
    layout: Layout
    plan: FrequencyPlan
    A: sp.csr_matrix

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape

    def column_blocks(self) -> dict[str, slice]:
        lay = self.layout
        return {
            "leo_orb": slice(0, lay.off_leo_clk),
            "leo_clk": slice(lay.off_leo_clk, lay.off_gnss_clk),
            "gnss_clk": slice(lay.off_gnss_clk, lay.off_ion),
            "ion": slice(lay.off_ion, lay.off_amb),
            "amb": slice(lay.off_amb, lay.n),
        }

    def node_rows(self, l: int) -> slice:
        return self.layout.node_rows(l)

    def dense(self) -> np.ndarray:
        return self.A.toarray()


def assemble_design(geometry: EpochGeometry, plan: FrequencyPlan) -> DesignSystem:
    """Assemble the network design matrix in the stacked observation order."""
    for l, v in enumerate(geometry.visible):
        if len(v) == 0:
            raise EstimabilityError(f"LEO node {l} has an empty visibility set")
    lay = Layout.from_visibility(geometry.visible, geometry.G, plan.F)
    lam, mu = plan.lam, plan.mu
    rows, cols, vals = [], [], []

    def put(r, c, v):
        rows.append(r); cols.append(c); vals.append(v)

    for l in range(lay.L):
        U = geometry.los[l]
        for j, g in enumerate(lay.visible[l]):
            for f in range(lay.F):
                rp = lay.row(l, f, PHASE, j)
                rc = lay.row(l, f, CODE, j)
                rd = lay.row(l, f, DOPPLER, j)
                for a in range(3):
                    put(rp, lay.pos(l)[a], U[j, a])
                    put(rc, lay.pos(l)[a], U[j, a])
                    put(rd, lay.vel(l)[a], -U[j, a] / lam[f])
                put(rp, lay.rx(l, "clock"), 1.0)
                put(rp, lay.rx(l, "phase_bias", f), lam[f])
                put(rc, lay.rx(l, "clock"), 1.0)
                put(rc, lay.rx(l, "code_bias", f), 1.0)
                put(rd, lay.rx(l, "drift"), -1.0 / lam[f])
                # GNSS block carries an overall minus sign
                put(rp, lay.sat(g, "clock"), -1.0)
                put(rp, lay.sat(g, "phase_bias", f), -lam[f])
                put(rc, lay.sat(g, "clock"), -1.0)
                put(rc, lay.sat(g, "code_bias", f), -1.0)
                put(rd, lay.sat(g, "drift"), 1.0 / lam[f])
                put(rp, lay.ion(l, g), -mu[f])
                put(rc, lay.ion(l, g), mu[f])
                put(rp, lay.amb(l, g, f), lam[f])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(lay.m, lay.n))
    return DesignSystem(lay, plan, A)


# ---------------------------------------------------------------------------
# pivots

@dataclass(frozen=True)
class Pivots:
    """Datum choices: pivot receiver, a pivot satellite per other receiver, a
    pivot receiver per satellite.  Together the (receiver, pivot satellite) and
    (pivot receiver, satellite) links must form a spanning tree."""

    receiver: int
    sat_of_receiver: dict[int, int]  # g_p(l) for l != receiver
    receiver_of_sat: dict[int, int]  # l_p(g) for every g

    def tree_links(self) -> list[tuple[int, int]]:
        links = {(l, g) for l, g in self.sat_of_receiver.items()}
        links |= {(l, g) for g, l in self.receiver_of_sat.items()}
        return sorted(links)


def _components(lay: Layout) -> list[tuple[list[int], list[int]]]:
    seen_r, seen_s = set(), set()
    by_sat: dict[int, list[int]] = {}
    for l, v in enumerate(lay.visible):
        for g in v:
            by_sat.setdefault(g, []).append(l)
    comps = []
    for start in range(lay.L):
        if start in seen_r:
            continue
        rs, ss, q = [start], [], deque([("r", start)])
        seen_r.add(start)
        while q:
            kind, i = q.popleft()
            nbrs = lay.visible[i] if kind == "r" else by_sat.get(i, [])
            for j in nbrs:
                if kind == "r" and j not in seen_s:
                    seen_s.add(j); ss.append(j); q.append(("s", j))
                elif kind == "s" and j not in seen_r:
                    seen_r.add(j); rs.append(j); q.append(("r", j))
        comps.append((sorted(rs), sorted(ss)))
    unseen = sorted(set(range(lay.G)) - seen_s)
    if unseen:
        comps.append(([], unseen))
    return comps


def default_pivots(layout: Layout, receiver: int = 0) -> Pivots:
    """Breadth-first spanning tree of the visibility graph rooted at ``receiver``.

    Neighbours are scanned in ascending index order, so a satellite's pivot
    receiver is the first receiver reached that observes it and a receiver's
    pivot satellite is the lowest-index satellite on the previous tree level.
    """
    comps = _components(layout)
    if len(comps) > 1:
        detail = "; ".join(f"receivers {r} / satellites {s}" for r, s in comps)
        raise EstimabilityError(f"visibility graph is disconnected: {detail}")
    by_sat: dict[int, list[int]] = {}
    for l, v in enumerate(layout.visible):
        for g in v:
            by_sat.setdefault(g, []).append(l)
    sat_of_rx, rx_of_sat = {}, {}
    seen_r, seen_s = {receiver}, set()
    q = deque([("r", receiver)])
    while q:
        kind, i = q.popleft()
        if kind == "r":
            for g in layout.visible[i]:
                if g not in seen_s:
                    seen_s.add(g); rx_of_sat[g] = i; q.append(("s", g))
        else:
            for l in by_sat[i]:
                if l not in seen_r:
                    seen_r.add(l); sat_of_rx[l] = i; q.append(("r", l))
    return Pivots(receiver, sat_of_rx, rx_of_sat)


def validate_pivots(layout: Layout, piv: Pivots) -> None:
    L, G = layout.L, layout.G
    if set(piv.sat_of_receiver) != set(range(L)) - {piv.receiver}:
        raise EstimabilityError("every non-pivot receiver needs a pivot satellite")
    if set(piv.receiver_of_sat) != set(range(G)):
        raise EstimabilityError("every satellite needs a pivot receiver")
    links = piv.tree_links()
    for l, g in links:
        if g not in layout.visible[l]:
            raise EstimabilityError(f"pivot link ({l}, {g}) is not observed")
    if len(links) != L + G - 1:
        raise EstimabilityError("pivot links do not form a spanning tree (duplicate links)")
    # union-find acyclicity
    parent = list(range(L + G))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for l, g in links:
        a, b = find(l), find(L + g)
        if a == b:
            raise EstimabilityError(f"pivot links contain a cycle through ({l}, {g})")
        parent[a] = b


# ---------------------------------------------------------------------------
# S-basis

@dataclass
class SBasis:
    layout: Layout
    plan: FrequencyPlan
    pivots: Pivots
    V_raw: sp.csc_matrix  # n x (n - r), one column per null direction
    S: sp.csc_matrix  # n x r column selection
    Sperp_T: sp.csr_matrix  # (n - r) x n
    kept: np.ndarray  # indices of retained raw parameters
    dropped: np.ndarray
    categories: np.ndarray  # deficiency type index per column of V
    _M_lu: object = field(repr=False)

    @property
    def n(self) -> int:
        return self.layout.n

    @property
    def r(self) -> int:
        return len(self.kept)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """S-transformation of a raw parameter vector (or the columns of a matrix)."""
        x = np.asarray(x, dtype=float)
        beta = self._M_lu.solve(np.atleast_1d(self.Sperp_T @ x))
        return x - self.V_raw @ beta

    @property
    def V(self) -> np.ndarray:
        """Dense null-space basis normalised so that ``Sperp_T @ V = I``."""
        d = self.V_raw.shape[1]
        return self.V_raw @ self._M_lu.solve(np.eye(d))

    def Stransform(self) -> np.ndarray:
        """Dense n x n S-transformation matrix (desk scale only)."""
        return np.eye(self.n) - self.V @ self.Sperp_T.toarray()



def _null_directions(lay: Layout, plan: FrequencyPlan, piv: Pivots):
    lam, mu = plan.lam, plan.mu
    F = lay.F
    p0 = piv.receiver
    others = [l for l in range(lay.L) if l != p0]
    by_sat: dict[int, list[int]] = {}
    for l, v in enumerate(lay.visible):
        for g in v:
            by_sat.setdefault(g, []).append(l)
    cols: list[dict[int, float]] = []
    cats: list[int] = []

    def add(entries, cat):
        cols.append(entries); cats.append(cat)

    # common shift of every receiver and satellite clock/bias state
    for k in range(lay.clk_width):
        e = {lay.off_leo_clk + l * lay.clk_width + k: 1.0 for l in range(lay.L)}
        e.update({lay.off_gnss_clk + g * lay.clk_width + k: 1.0 for g in range(lay.G)})
        add(e, 0)

    def clock_bias(idx):
        e = {idx("clock"): -1.0}
        for f in range(F):
            e[idx("phase_bias", f)] = 1.0 / lam[f]
            e[idx("code_bias", f)] = 1.0
        return e

    for l in others:
        add(clock_bias(lambda w, f=None, l=l: lay.rx(l, w, f)), 1)
    for g in range(lay.G):
        add(clock_bias(lambda w, f=None, g=g: lay.sat(g, w, f)), 2)
    for l in others:
        e = {}
        for f in range(F):
            e[lay.rx(l, "phase_bias", f)] = mu[f] / lam[f]
            e[lay.rx(l, "code_bias", f)] = -mu[f]
        for g in lay.visible[l]:
            e[lay.ion(l, g)] = 1.0
        add(e, 3)
    for g in range(lay.G):
        e = {}
        for f in range(F):
            e[lay.sat(g, "phase_bias", f)] = -mu[f] / lam[f]
            e[lay.sat(g, "code_bias", f)] = mu[f]
        for l in by_sat.get(g, []):
            e[lay.ion(l, g)] = 1.0
        add(e, 4)
    for l in others:
        for f in range(F):
            e = {lay.rx(l, "phase_bias", f): -1.0}
            for g in lay.visible[l]:
                e[lay.amb(l, g, f)] = 1.0
            add(e, 5)
    for g in range(lay.G):
        for f in range(F):
            e = {lay.sat(g, "phase_bias", f): 1.0}
            for l in by_sat.get(g, []):
                e[lay.amb(l, g, f)] = 1.0
            add(e, 6)
    return cols, np.array(cats)


def _constraints(lay: Layout, plan: FrequencyPlan, piv: Pivots):
    F = lay.F
    p0 = piv.receiver
    others = [l for l in range(lay.L) if l != p0]
    rows: list[dict[int, float]] = []
    mif, mgf = mu_if(plan), mu_gf(plan)

    def code_combo(idx_fn, w, sign=1.0):
        return {idx_fn(f): sign * w[f] for f in range(F) if w[f] != 0.0}

    def merge(a, b):
        out = dict(a)
        for k, v in b.items():
            out[k] = out.get(k, 0.0) + v
        return out

    rx0 = lambda f: lay.rx(p0, "code_bias", f)
    for k in range(lay.clk_width):
        rows.append({lay.off_leo_clk + p0 * lay.clk_width + k: 1.0})
    for l in others:
        rows.append(merge(code_combo(lambda f: lay.rx(l, "code_bias", f), mif),
                          code_combo(rx0, mif, -1.0)))
    for g in range(lay.G):
        rows.append(merge(code_combo(lambda f: lay.sat(g, "code_bias", f), mif),
                          code_combo(rx0, mif, -1.0)))
    for l in others:
        rows.append(merge(code_combo(lambda f: lay.rx(l, "code_bias", f), mgf, -1.0),
                          code_combo(rx0, mgf, 1.0)))
    for g in range(lay.G):
        rows.append(merge(code_combo(lambda f: lay.sat(g, "code_bias", f), mgf),
                          code_combo(rx0, mgf, -1.0)))
    for l in others:
        for f in range(F):
            rows.append({lay.amb(l, piv.sat_of_receiver[l], f): 1.0})
    for g in range(lay.G):
        for f in range(F):
            rows.append({lay.amb(piv.receiver_of_sat[g], g, f): 1.0})
    return rows


def _to_sparse(entries: list[dict[int, float]], n: int, as_columns: bool):
    r, c, v = [], [], []
    for i, e in enumerate(entries):
        for k, val in e.items():
            r.append(k if as_columns else i)
            c.append(i if as_columns else k)
            v.append(val)
    shape = (n, len(entries)) if as_columns else (len(entries), n)
    return sp.coo_matrix((v, (r, c)), shape=shape)


def dropped_parameters(lay: Layout, piv: Pivots) -> np.ndarray:
    """Raw parameters removed by the S-basis (the complement of the kept columns)."""
    p0 = piv.receiver
    out = [lay.off_leo_clk + p0 * lay.clk_width + k for k in range(lay.clk_width)]
    for l in range(lay.L):
        if l != p0:
            out += [lay.rx(l, "code_bias", 0), lay.rx(l, "code_bias", 1)]
    for g in range(lay.G):
        out += [lay.sat(g, "code_bias", 0), lay.sat(g, "code_bias", 1)]
    for l, g in piv.tree_links():
        out += [lay.amb(l, g, f) for f in range(lay.F)]
    return np.array(sorted(out), dtype=int)


def build_sbasis(design: DesignSystem, pivots: Pivots | None = None) -> SBasis:
    """Null-space basis, complementary selection basis and constraint rows."""
    lay, plan = design.layout, design.plan
    if plan.F < 2:
        raise EstimabilityError("at least two frequencies are required")
    piv = pivots if pivots is not None else default_pivots(lay)
    validate_pivots(lay, piv)
    cols, cats = _null_directions(lay, plan, piv)
    V_raw = _to_sparse(cols, lay.n, as_columns=True).tocsc()
    Sperp_T = _to_sparse(_constraints(lay, plan, piv), lay.n, as_columns=False).tocsr()
    d = deficiency_count(lay.L, lay.G, lay.F)
    if V_raw.shape[1] != d or Sperp_T.shape[0] != d:
        raise EstimabilityError("internal: null-space family sizes disagree with the deficiency count")
    M = (Sperp_T @ V_raw).tocsc()
    try:
        lu = spla.splu(M)
    except RuntimeError as exc:
        raise EstimabilityError(f"S-basis constraints do not fix the null space: {exc}") from exc
    dropped = dropped_parameters(lay, piv)
    if len(dropped) != d:
        raise EstimabilityError("internal: dropped-parameter count disagrees with deficiency")
    kept = np.setdiff1d(np.arange(lay.n), dropped)
    S = sp.csc_matrix((np.ones(len(kept)), (kept, np.arange(len(kept)))),
                      shape=(lay.n, len(kept)))
    return SBasis(lay, plan, piv, V_raw, S, Sperp_T, kept, dropped, cats, lu)


# ---------------------------------------------------------------------------
# estimable parameters

def estimable_labels(lay: Layout, kept: np.ndarray) -> list[tuple[str, str, int, int, int]]:
    """(label, table row, node, sat, freq) for every kept column; -1 marks "not applicable"."""
    names = {}
    for l in range(lay.L):
        for a, ax in enumerate("xyz"):
            names[lay.pos(l)[a]] = (f"dp[{l}].{ax}", "position", l, -1, -1)
            names[lay.vel(l)[a]] = (f"dv[{l}].{ax}", "velocity", l, -1, -1)
        names[lay.rx(l, "clock")] = (f"rx_clock[{l}]", "receiver_clock", l, -1, -1)
        names[lay.rx(l, "drift")] = (f"rx_drift[{l}]", "receiver_drift", l, -1, -1)
        for f in range(lay.F):
            names[lay.rx(l, "phase_bias", f)] = (f"rx_phase_bias[{l},{f}]", "receiver_phase_bias", l, -1, f)
            names[lay.rx(l, "code_bias", f)] = (f"rx_code_bias[{l},{f}]", "receiver_code_bias", l, -1, f)
    for g in range(lay.G):
        names[lay.sat(g, "clock")] = (f"sat_clock[{g}]", "satellite_clock", -1, g, -1)
        names[lay.sat(g, "drift")] = (f"sat_drift[{g}]", "satellite_drift", -1, g, -1)
        for f in range(lay.F):
            names[lay.sat(g, "phase_bias", f)] = (f"sat_phase_bias[{g},{f}]", "satellite_phase_bias", -1, g, f)
            names[lay.sat(g, "code_bias", f)] = (f"sat_code_bias[{g},{f}]", "satellite_code_bias", -1, g, f)
    for l, g in lay.links:
        names[lay.ion(l, g)] = (f"ion[{l},{g}]", "ionosphere", l, g, -1)
        for f in range(lay.F):
            names[lay.amb(l, g, f)] = (f"amb[{l},{g},{f}]", "ambiguity", l, g, f)
    return [names[int(k)] for k in kept]


@dataclass
class EstimableVector:
    """Values of the estimable combinations, indexed like the kept raw parameters."""

    layout: Layout
    kept: np.ndarray
    full: np.ndarray  # S-transformed raw vector (zeros on dropped parameters)

    @property
    def values(self) -> np.ndarray:
        return self.full[self.kept]

    def labels(self) -> list[str]:
        return [t[0] for t in estimable_labels(self.layout, self.kept)]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.labels(), self.values.tolist()))

    # convenience accessors on the raw-index grid
    def position(self, l: int) -> np.ndarray:
        return self.full[self.layout.pos(l)]

    def velocity(self, l: int) -> np.ndarray:
        return self.full[self.layout.vel(l)]

    def rx(self, l: int, what: str, f: int | None = None) -> float:
        return float(self.full[self.layout.rx(l, what, f)])

    def sat(self, g: int, what: str, f: int | None = None) -> float:
        return float(self.full[self.layout.sat(g, what, f)])

    def ion(self, l: int, g: int) -> float:
        return float(self.full[self.layout.ion(l, g)])

    def amb(self, l: int, g: int, f: int) -> float:
        return float(self.full[self.layout.amb(l, g, f)])


def s_transform(x: np.ndarray, basis: SBasis) -> EstimableVector:
    x = np.asarray(x, dtype=float)
    if x.shape != (basis.n,):
        raise ValueError(f"expected a raw vector of length {basis.n}")
    return EstimableVector(basis.layout, basis.kept, basis.apply(x))


def write_label_table(layout: Layout, kept: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["column", "label", "table_row", "node", "sat", "freq"])
        for i, (label, row, l, g, f) in enumerate(estimable_labels(layout, kept)):
            w.writerow([i, label, row, l, g, f])


# ---------------------------------------------------------------------------
# rank helpers

def numerical_rank(M, rtol: float = RANK_RTOL) -> int:
    """Rank after scaling every column to unit max-norm."""
    D = np.asarray(M.toarray() if sp.issparse(M) else M, dtype=float)
    scale = np.abs(D).max(axis=0)
    scale[scale == 0] = 1.0
    s = np.linalg.svd(D / scale, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def null_space_dim(design: DesignSystem) -> int:
    return design.layout.n - numerical_rank(design.A)


# ---------------------------------------------------------------------------
# reduced model and node partition

@dataclass
class EstimableModel:
    design: DesignSystem
    basis: SBasis
    A_tilde: sp.csr_matrix  # m x r

    @property
    def layout(self) -> Layout:
        return self.design.layout

    @property
    def r(self) -> int:
        return self.A_tilde.shape[1]

    def labels(self) -> list[str]:
        return [t[0] for t in estimable_labels(self.layout, self.basis.kept)]

    def alpha(self, x: np.ndarray) -> np.ndarray:
        """Estimable coordinates of a raw vector."""
        return self.basis.apply(np.asarray(x, dtype=float))[self.basis.kept]


def reduce(design: DesignSystem, basis: SBasis, check_rank: bool = True) -> EstimableModel:
    if basis.layout != design.layout:
        raise EstimabilityError("basis was built for a different design")
    A_t = (design.A @ basis.S).tocsr()
    if check_rank and A_t.shape[1] <= 6000:
        rank = numerical_rank(A_t)
        if rank < A_t.shape[1]:
            raise EstimabilityError(
                f"reduced design is rank deficient ({rank} < {A_t.shape[1]}); "
                f"remaining deficiency involves: {_offending(A_t, basis)}"
            )
    return EstimableModel(design, basis, A_t)


def _offending(A_t, basis: SBasis) -> str:
    D = A_t.toarray()
    scale = np.abs(D).max(axis=0); scale[scale == 0] = 1.0
    _, s, vt = np.linalg.svd(D / scale)
    null = vt[s.size - np.sum(s <= RANK_RTOL * s[0]):] if s.size else vt
    labels = estimable_labels(basis.layout, basis.kept)
    rows = sorted({labels[i][1] for v in null for i in np.flatnonzero(np.abs(v) > 1e-6)})
    return ", ".join(rows) or "unknown"


@dataclass
class NodeBlock:
    node: int
    rows: slice
    local_cols: np.ndarray  # columns of A_tilde owned by this node
    A: np.ndarray
    B: np.ndarray
    local_labels: list[str]


@dataclass
class Partition:
    nodes: list[NodeBlock]
    global_cols: np.ndarray  # columns of A_tilde forming z
    global_labels: list[str]
    permutation: np.ndarray  # A_tilde[:, permutation] = [A_0 .. A_{L-1} | B] row-stacked

    @property
    def p(self) -> int:
        return len(self.global_cols)


def _owner(lay: Layout, raw: int) -> int:
    """Node owning a raw parameter, or -1 for GNSS (global) states."""
    if raw < lay.off_leo_clk:
        return raw // 6
    if raw < lay.off_gnss_clk:
        return (raw - lay.off_leo_clk) // lay.clk_width
    if raw < lay.off_ion:
        return -1
    if raw < lay.off_amb:
        return lay.links[raw - lay.off_ion][0]
    k = raw - lay.off_amb
    l = int(np.searchsorted(lay.link_start * lay.F, k, side="right") - 1)
    return l


def partition(model: EstimableModel) -> Partition:
    """Split the reduced model into node-local blocks ``A_l`` and shared blocks ``B_l``."""
    lay = model.layout
    kept = model.basis.kept
    owners = np.array([_owner(lay, int(k)) for k in kept])
    labels = model.labels()
    global_cols = np.flatnonzero(owners == -1)
    A_t = model.A_tilde.tocsc()
    nodes = []
    for l in range(lay.L):
        cols = np.flatnonzero(owners == l)
        rows = lay.node_rows(l)
        nodes.append(NodeBlock(
            l, rows, cols,
            A_t[:, cols][rows].toarray(),
            A_t[:, global_cols][rows].toarray(),
            [labels[i] for i in cols],
        ))
    perm = np.concatenate([n.local_cols for n in nodes] + [global_cols])
    return Partition(nodes, global_cols, [labels[i] for i in global_cols], perm)
