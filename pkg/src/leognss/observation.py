"""Ground-truth sampling and synthesis of linearized phase/code/Doppler observations."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constellation import EpochGeometry
from .layout import CODE, DOPPLER, OBS_TYPES, PHASE, Layout

C_LIGHT = 299_792_458.0
GPS_L1 = 1575.42e6
GPS_L2 = 1227.60e6


class ObservationError(ValueError):
    pass


@dataclass(frozen=True)
class FrequencyPlan:
    wavelengths: tuple[float, ...]

    def __post_init__(self):
        lam = np.asarray(self.wavelengths, dtype=float)
        if lam.ndim != 1 or lam.size < 1 or np.any(lam <= 0):
            raise ObservationError("wavelengths must be positive")
        if np.any(np.diff(lam) <= 0):
            raise ObservationError("wavelengths must be strictly increasing")

    @classmethod
    def gps_l1_l2(cls) -> "FrequencyPlan":
        return cls((C_LIGHT / GPS_L1, C_LIGHT / GPS_L2))

    @classmethod
    def from_frequencies(cls, freqs_hz) -> "FrequencyPlan":
        return cls(tuple(C_LIGHT / f for f in freqs_hz))

    @property
    def F(self) -> int:
        return len(self.wavelengths)

    @property
    def lam(self) -> np.ndarray:
        return np.asarray(self.wavelengths, dtype=float)

    @property
    def mu(self) -> np.ndarray:
        lam = self.lam
        return lam**2 / lam[0] ** 2


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement noise and a-priori clock uncertainties.

    Phase and code sigmas are in meters, Doppler in Hz (cycles/s), clock sigmas
    in seconds.  Zero sigmas switch the corresponding noise off; observation
    weights then fall back to ``weight_*`` values.
    """

    sigma_phase: float = 1e-3
    sigma_code: float = 0.10
    sigma_doppler: float = 0.5
    sigma_clock_rx: float = 100e-9
    sigma_clock_gnss: float = 10e-9
    rng_seed: int = 0
    weight_phase: float = 1e-3
    weight_code: float = 0.10
    weight_doppler: float = 0.5

    def __post_init__(self):
        for name in ("sigma_phase", "sigma_code", "sigma_doppler", "sigma_clock_rx",
                     "sigma_clock_gnss"):
            if getattr(self, name) < 0:
                raise ObservationError(f"{name} must be non-negative")
        for name in ("weight_phase", "weight_code", "weight_doppler"):
            if getattr(self, name) <= 0:
                raise ObservationError(f"{name} must be positive")

    def scaled(self, factor: float) -> "NoiseSpec":
        return NoiseSpec(
            self.sigma_phase * factor, self.sigma_code * factor, self.sigma_doppler * factor,
            self.sigma_clock_rx * factor, self.sigma_clock_gnss * factor, self.rng_seed,
            self.weight_phase * factor, self.weight_code * factor, self.weight_doppler * factor,
        )

    def observation_sigmas(self) -> tuple[float, float, float]:
        """Sigmas used for weighting: the noise sigma, or the fallback when it is zero."""
        return (
            self.sigma_phase or self.weight_phase,
            self.sigma_code or self.weight_code,
            self.sigma_doppler or self.weight_doppler,
        )


@dataclass(frozen=True)
class TruthSpec:
    """Magnitudes of the simulated truth that the noise model does not cover."""

    ambiguity_span: int = 100  # cycles, uniform integers in [-span, span]
    iono_sigma: float = 2.0  # m, |N(0, sigma)| at f=1
    drift_sigma: float = 0.1  # m/s, receiver and satellite clock drifts
    phase_bias_sigma: float = 0.5  # cycles
    code_bias_sigma: float = 1.0  # m
    position_sigma: float = 5.0  # m, a-priori orbit error
    velocity_sigma: float = 0.05  # m/s


@dataclass
class TruthState:
    """Raw-parameter truth; clocks in meters, drifts in m/s, phase biases in cycles."""

    dp: np.ndarray  # (L, 3)
    dv: np.ndarray  # (L, 3)
    rx_clock: np.ndarray  # (L,)
    rx_drift: np.ndarray
    rx_phase_bias: np.ndarray  # (L, F)
    rx_code_bias: np.ndarray  # (L, F)
    sat_clock: np.ndarray  # (G,)
    sat_drift: np.ndarray
    sat_phase_bias: np.ndarray  # (G, F)
    sat_code_bias: np.ndarray  # (G, F)
    iono: list[np.ndarray]  # per node, (G_l,)
    ambiguity: list[np.ndarray]  # per node, (F, G_l) integer

    @classmethod
    def zeros(cls, layout: Layout) -> "TruthState":
        L, G, F = layout.L, layout.G, layout.F
        return cls(
            np.zeros((L, 3)), np.zeros((L, 3)), np.zeros(L), np.zeros(L),
            np.zeros((L, F)), np.zeros((L, F)), np.zeros(G), np.zeros(G),
            np.zeros((G, F)), np.zeros((G, F)),
            [np.zeros(c) for c in layout.counts],
            [np.zeros((F, c), dtype=np.int64) for c in layout.counts],
        )

    def to_vector(self, layout: Layout) -> np.ndarray:
        x = np.zeros(layout.n)
        F = layout.F
        for l in range(layout.L):
            x[layout.pos(l)] = self.dp[l]
            x[layout.vel(l)] = self.dv[l]
            x[layout.rx(l, "clock")] = self.rx_clock[l]
            x[layout.rx(l, "drift")] = self.rx_drift[l]
            for f in range(F):
                x[layout.rx(l, "phase_bias", f)] = self.rx_phase_bias[l, f]
                x[layout.rx(l, "code_bias", f)] = self.rx_code_bias[l, f]
        for g in range(layout.G):
            x[layout.sat(g, "clock")] = self.sat_clock[g]
            x[layout.sat(g, "drift")] = self.sat_drift[g]
            for f in range(F):
                x[layout.sat(g, "phase_bias", f)] = self.sat_phase_bias[g, f]
                x[layout.sat(g, "code_bias", f)] = self.sat_code_bias[g, f]
        s = layout.link_start
        x[layout.off_ion:layout.off_amb] = np.concatenate(self.iono) if self.iono else []
        for l in range(layout.L):
            a0 = layout.off_amb + F * int(s[l])
            x[a0:a0 + F * int(layout.counts[l])] = self.ambiguity[l].reshape(-1)
        return x


@dataclass
class ObservationSet:
    """Stacked observations ``y`` with per-node views and diagonal covariances."""

    layout: Layout
    y: np.ndarray
    sigmas: np.ndarray  # per-row standard deviation used for weighting

    def y_node(self, l: int) -> np.ndarray:
        return self.y[self.layout.node_rows(l)]

    def Q_node(self, l: int) -> np.ndarray:
        return np.diag(self.sigmas[self.layout.node_rows(l)] ** 2)

    def Qinv_diag(self, l: int) -> np.ndarray:
        return 1.0 / self.sigmas[self.layout.node_rows(l)] ** 2

    def records(self):
        """Yield ``(node, sat, freq, type, value)`` in stacking order."""
        lay = self.layout
        for l in range(lay.L):
            for f in range(lay.F):
                for kind in (PHASE, CODE, DOPPLER):
                    for j, g in enumerate(lay.visible[l]):
                        yield l, g, f, OBS_TYPES[kind], float(self.y[lay.row(l, f, kind, j)])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "sat", "freq", "type", "value"])
            for rec in self.records():
                w.writerow([rec[0], rec[1], rec[2], rec[3], repr(rec[4])])

    def save(self, path: str | Path) -> None:
        """Compact binary round-trip (npz)."""
        lay = self.layout
        vis = np.concatenate([np.asarray(v, dtype=np.int64) for v in lay.visible])
        with open(path, "wb") as fh:
            np.savez(fh, y=self.y, sigmas=self.sigmas, visible=vis, counts=lay.counts,
                     dims=np.array([lay.L, lay.G, lay.F]))

    @classmethod
    def load(cls, path: str | Path) -> "ObservationSet":
        with np.load(path) as d:
            L, G, F = (int(v) for v in d["dims"])
            splits = np.cumsum(d["counts"])[:-1]
            visible = np.split(d["visible"], splits)
            lay = Layout.from_visibility(visible, G, F)
            return cls(lay, d["y"].copy(), d["sigmas"].copy())


def _seeds(seed: int) -> tuple[np.random.SeedSequence, ...]:
    # independent truth-node, truth-satellite and noise streams
    return tuple(np.random.SeedSequence(seed).spawn(3))


def _node_rngs(seq: np.random.SeedSequence, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in seq.spawn(count)]


def sample_truth(
    geometry: EpochGeometry,
    plan: FrequencyPlan,
    noise: NoiseSpec,
    spec: TruthSpec = TruthSpec(),
) -> TruthState:
    """Draw a reproducible truth state for every node, satellite and visible link."""
    L, G, F = geometry.L, geometry.G, plan.F
    node_seq, sat_seq, _ = _seeds(noise.rng_seed)
    node_streams = _node_rngs(node_seq, L)
    sig_rx = noise.sigma_clock_rx * C_LIGHT
    sig_sat = noise.sigma_clock_gnss * C_LIGHT

    dp = np.zeros((L, 3)); dv = np.zeros((L, 3))
    rx_clock = np.zeros(L); rx_drift = np.zeros(L)
    rx_pb = np.zeros((L, F)); rx_cb = np.zeros((L, F))
    iono, amb = [], []
    for l in range(L):
        r = node_streams[l]
        dp[l] = r.normal(0.0, spec.position_sigma, 3)
        dv[l] = r.normal(0.0, spec.velocity_sigma, 3)
        rx_clock[l] = r.normal(0.0, sig_rx) if sig_rx > 0 else 0.0
        rx_drift[l] = r.normal(0.0, spec.drift_sigma)
        rx_pb[l] = r.normal(0.0, spec.phase_bias_sigma, F)
        rx_cb[l] = r.normal(0.0, spec.code_bias_sigma, F)
        G_l = len(geometry.visible[l])
        iono.append(np.abs(r.normal(0.0, spec.iono_sigma, G_l)))
        amb.append(r.integers(-spec.ambiguity_span, spec.ambiguity_span + 1, (F, G_l)))
    s = np.random.default_rng(sat_seq)
    sat_clock = s.normal(0.0, sig_sat, G) if sig_sat > 0 else np.zeros(G)
    sat_drift = s.normal(0.0, spec.drift_sigma, G)
    sat_pb = s.normal(0.0, spec.phase_bias_sigma, (G, F))
    sat_cb = s.normal(0.0, spec.code_bias_sigma, (G, F))
    return TruthState(dp, dv, rx_clock, rx_drift, rx_pb, rx_cb, sat_clock, sat_drift,
                      sat_pb, sat_cb, iono, amb)


def covariance(plan: FrequencyPlan, noise: NoiseSpec, G_l: int) -> np.ndarray:
    """Diagonal covariance of one node's observation block (phase, code, Doppler per frequency)."""
    if G_l < 1:
        raise ObservationError("a node needs at least one visible satellite")
    sp, sc, sd = noise.observation_sigmas()
    block = np.concatenate([np.full(G_l, sp**2), np.full(G_l, sc**2), np.full(G_l, sd**2)])
    return np.diag(np.tile(block, plan.F))


def expected_observations(truth: TruthState, geometry: EpochGeometry,
                          plan: FrequencyPlan) -> np.ndarray:
    """Noise-free observation vector evaluated link by link from the observation equations."""
    lay = Layout.from_visibility(geometry.visible, geometry.G, plan.F)
    if len(truth.iono) != lay.L or len(truth.ambiguity) != lay.L:
        raise ObservationError("truth does not cover every LEO node")
    lam, mu = plan.lam, plan.mu
    y = np.zeros(lay.m)
    for l in range(lay.L):
        vis = lay.visible[l]
        if truth.iono[l].shape != (len(vis),) or truth.ambiguity[l].shape != (plan.F, len(vis)):
            raise ObservationError(f"truth is missing link entries for node {l}")
        for j, g in enumerate(vis):
            u = geometry.los[l][j]
            geo = float(u @ truth.dp[l])
            rate = float(u @ truth.dv[l])
            I = truth.iono[l][j]
            for f in range(plan.F):
                y[lay.row(l, f, PHASE, j)] = (
                    geo + truth.rx_clock[l] + lam[f] * truth.rx_phase_bias[l, f]
                    - truth.sat_clock[g] - lam[f] * truth.sat_phase_bias[g, f]
                    - mu[f] * I + lam[f] * truth.ambiguity[l][f, j]
                )
                y[lay.row(l, f, CODE, j)] = (
                    geo + truth.rx_clock[l] + truth.rx_code_bias[l, f]
                    - truth.sat_clock[g] - truth.sat_code_bias[g, f] + mu[f] * I
                )
                y[lay.row(l, f, DOPPLER, j)] = (
                    -rate / lam[f] - (truth.rx_drift[l] - truth.sat_drift[g]) / lam[f]
                )
    return y


def synthesize_epoch(truth: TruthState, geometry: EpochGeometry, plan: FrequencyPlan,
                     noise: NoiseSpec) -> ObservationSet:
    """Observations of one epoch with additive Gaussian noise.

    The noise stream of each node is derived from ``noise.rng_seed`` independently
    of the truth stream, so node order does not affect the draws.
    """
    lay = Layout.from_visibility(geometry.visible, geometry.G, plan.F)
    y = expected_observations(truth, geometry, plan)
    node_streams = _node_rngs(_seeds(noise.rng_seed)[2], lay.L)
    true_sig = np.array([noise.sigma_phase, noise.sigma_code, noise.sigma_doppler])
    sigmas = np.zeros(lay.m)
    wsig = np.array(noise.observation_sigmas())
    for l in range(lay.L):
        G_l = int(lay.counts[l])
        per_row = np.tile(np.repeat(true_sig, G_l), lay.F)
        rows = lay.node_rows(l)
        y[rows] += node_streams[l].standard_normal(3 * lay.F * G_l) * per_row
        sigmas[rows] = np.tile(np.repeat(wsig, G_l), lay.F)
    return ObservationSet(lay, y, sigmas)
