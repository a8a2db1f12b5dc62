"""Shared builders for the test-suite (not a test module)."""

from __future__ import annotations

import numpy as np

from leognss.constellation import EpochGeometry, SatelliteState, visibility
from leognss.estimability import mu_gf, mu_if
from leognss.observation import FrequencyPlan

R_LEO = 6_921_000.0
R_GNSS = 26_571_000.0


def _random_states(rng, count, radius):
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    v = np.cross(d, rng.normal(size=(count, 3)))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return [SatelliteState(i, radius * d[i], 7000.0 * v[i]) for i in range(count)]


def full_geometry(rng, L, G) -> EpochGeometry:
    """Random positions with every GNSS satellite visible from every node."""
    leo = _random_states(rng, L, R_LEO)
    gnss = _random_states(rng, G, R_GNSS)
    vis, los, el = [], [], []
    for s in leo:
        u = np.array([(s.position - g.position) / np.linalg.norm(s.position - g.position) for g in gnss])
        vis.append(np.arange(G))
        los.append(u)
        el.append(np.zeros(G))
    return EpochGeometry(0.0, leo, gnss, vis, los, el)


def blocked_geometry(rng, L, G, minimum=1, tries=200) -> EpochGeometry:
    """Random positions with Earth-blockage visibility and a connected link graph."""
    from leognss.estimability import _components
    from leognss.layout import Layout

    for _ in range(tries):
        geo = visibility(_random_states(rng, L, R_LEO), _random_states(rng, G, R_GNSS), -90.0)
        if geo.counts.min() < minimum:
            continue
        lay = Layout.from_visibility(geo.visible, G, 2)
        if len(_components(lay)) == 1:
            return geo
    raise RuntimeError("no connected geometry found")


def table2(x_truth, lay, plan: FrequencyPlan, piv):
    """Closed-form estimable combinations, evaluated from raw truth without the null space.

    Returns a dict keyed like the estimable labels.  Biases are combined with
    the ionosphere-free and geometry-free weights of the first two
    frequencies; ambiguities are resolved along the pivot tree.
    """
    lam, mu = plan.lam, plan.mu
    F = lay.F
    mif, mgf = mu_if(plan), mu_gf(plan)
    p0 = piv.receiver
    X = lambda i: float(x_truth[i])
    rx = lambda l, w, f=None: X(lay.rx(l, w, f))
    sat = lambda g, w, f=None: X(lay.sat(g, w, f))
    b_rx = lambda l: np.array([rx(l, "code_bias", f) for f in range(F)])
    b_sat = lambda g: np.array([sat(g, "code_bias", f) for f in range(F)])
    out = {}
    for l in range(lay.L):
        for a, ax in enumerate("xyz"):
            out[f"dp[{l}].{ax}"] = X(lay.pos(l)[a])
            out[f"dv[{l}].{ax}"] = X(lay.vel(l)[a])

    # ambiguity datum amounts along the pivot tree
    a_rx = {p0: np.zeros(F)}
    a_sat: dict[int, np.ndarray] = {}
    edges = [(l, piv.sat_of_receiver[l]) for l in range(lay.L) if l != p0]
    edges += [(piv.receiver_of_sat[g], g) for g in range(lay.G)]
    zraw = lambda l, g: np.array([X(lay.amb(l, g, f)) for f in range(F)])
    while len(a_rx) < lay.L or len(a_sat) < lay.G:
        progress = False
        for l, g in edges:
            if l in a_rx and g not in a_sat:
                a_sat[g] = -zraw(l, g) - a_rx[l]
                progress = True
            elif g in a_sat and l not in a_rx:
                a_rx[l] = -zraw(l, g) - a_sat[g]
                progress = True
        if not progress:
            raise AssertionError("pivot tree does not reach every node")

    b0 = b_rx(p0)
    for l in range(lay.L):
        beta = b_rx(l) - b0
        if l != p0:
            out[f"rx_clock[{l}]"] = rx(l, "clock") - rx(p0, "clock") + mif @ beta
            out[f"rx_drift[{l}]"] = rx(l, "drift") - rx(p0, "drift")
            for f in range(F):
                out[f"rx_phase_bias[{l},{f}]"] = (rx(l, "phase_bias", f) - rx(p0, "phase_bias", f)
                                                  + (mu[f] * (mgf @ beta) - mif @ beta) / lam[f]
                                                  - a_rx[l][f])
            for f in range(2, F):
                out[f"rx_code_bias[{l},{f}]"] = None  # not exercised for F = 2
    for g in range(lay.G):
        gamma = b_sat(g) - b0
        out[f"sat_clock[{g}]"] = sat(g, "clock") - rx(p0, "clock") + mif @ gamma
        out[f"sat_drift[{g}]"] = sat(g, "drift") - rx(p0, "drift")
        for f in range(F):
            out[f"sat_phase_bias[{g},{f}]"] = (sat(g, "phase_bias", f) - rx(p0, "phase_bias", f)
                                               + (mu[f] * (mgf @ gamma) - mif @ gamma) / lam[f]
                                               + a_sat[g][f])
    for l, g in lay.links:
        out[f"ion[{l},{g}]"] = X(lay.ion(l, g)) + mgf @ b_rx(l) - mgf @ b_sat(g)
        for f in range(F):
            out[f"amb[{l},{g},{f}]"] = X(lay.amb(l, g, f)) + a_rx[l][f] + a_sat[g][f]
    return out


# acceptance verdicts, echoed in the terminal summary by conftest.py
VERDICTS: list[str] = []


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)
