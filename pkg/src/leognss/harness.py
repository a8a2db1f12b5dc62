"""End-to-end experiment runner: configuration, pipelines and report emission.

Configuration files are YAML (JSON is a subset, so ``report.json`` reads back
through the same loader).  Every key carries its unit in the name and unknown
keys are rejected.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .ambiguity import FloatAmbiguities, FixReport, fix_blockwise, fix_solution
from .constellation import (
    EpochGeometry,
    GeometryError,
    WalkerConfig,
    build_walker,
    propagate_all,
    visibility,
    write_geometry_csv,
)
from .estimability import (
    EstimabilityError,
    assemble_design,
    build_sbasis,
    partition,
    reduce,
    s_transform,
    write_label_table,
)
from .observation import C_LIGHT, FrequencyPlan, NoiseSpec, ObservationError, TruthSpec, sample_truth, synthesize_epoch
from .solver import (
    GTParams,
    NodeProblem,
    SolverError,
    SolverTrace,
    centralized_wls,
    gt_solve,
    hessian_whitening,
    standalone_wls,
)
from .topology import TopologyError, check_mixing, graph_sequence, metropolis, period_length

SCHEMA_VERSION = 1
STRATEGIES = ("standalone", "network_float", "network_fixed")
VARIANTS = ("vanilla", "momentum", "consensus", "combined")


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration

_DESK: dict[str, Any] = {
    "seed": 0,
    "leo": {"planes": 4, "sats_per_plane": 5, "altitude_km": 550.0, "inclination_deg": 53.0,
            "phasing": 1, "raan0_deg": 0.0},
    "gnss": {"planes": 2, "sats_per_plane": 5, "altitude_km": 20200.0, "inclination_deg": 55.0,
             "phasing": 1, "raan0_deg": 120.0},
    "scenario": {"epoch_s": 0.0, "elevation_mask_deg": -90.0,
                 "frequencies_mhz": [1575.42, 1227.60]},
    "noise": {"sigma_phase_mm": 1.0, "sigma_code_cm": 10.0, "sigma_doppler_hz": 0.5,
              "sigma_clock_rx_ns": 100.0, "sigma_clock_gnss_ns": 10.0},
    "truth": {"ambiguity_span_cycles": 100, "iono_sigma_m": 2.0, "drift_sigma_mps": 0.1,
              "phase_bias_sigma_cycles": 0.5, "code_bias_sigma_m": 1.0,
              "position_sigma_m": 5.0, "velocity_sigma_mps": 0.05},
    "topology": {"k_neighbors": 4, "graphs": 3, "horizon_s": 5700.0},
    "solver": {"gamma": 0.01, "theta": 0.7, "rounds": 20, "max_iter": 4000, "tol": 0.0,
               "whitening": True, "workers": 1, "divergence_factor": 1e6},
    "ablation": {"max_iter": 12000, "vanilla_gamma_factor": 0.25, "record_every": 1},
    "fixing": {"method": "bootstrap", "block": 12, "radius": 2, "scope": "network"},
}

_PAPER = copy.deepcopy(_DESK)
_PAPER["leo"].update({"planes": 20, "sats_per_plane": 25})
_PAPER["gnss"].update({"planes": 6, "sats_per_plane": 5, "raan0_deg": 0.0})
_PAPER["scenario"]["elevation_mask_deg"] = 0.0
_PAPER["solver"]["max_iter"] = 12000
_PAPER["fixing"]["scope"] = "node"

SCALES = {"desk": _DESK, "paper": _PAPER}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown configuration key '{where}'")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"'{where}' must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def _num(d: dict, key: str, section: str, kind=float, positive=False, nonneg=False):
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"'{section}.{key}' must be a number, got {v!r}")
    if kind is int and float(v) != int(v):
        raise ConfigError(f"'{section}.{key}' must be an integer, got {v!r}")
    v = kind(v)
    if not math.isfinite(v):
        raise ConfigError(f"'{section}.{key}' must be finite")
    if positive and not v > 0:
        raise ConfigError(f"'{section}.{key}' must be positive")
    if nonneg and v < 0:
        raise ConfigError(f"'{section}.{key}' must be non-negative")
    return v


@dataclass(frozen=True)
class FixingConfig:
    method: str = "bootstrap"
    block: int = 12
    radius: int = 2
    scope: str = "network"


@dataclass(frozen=True)
class AblationConfig:
    max_iter: int = 12000
    vanilla_gamma_factor: float = 0.25
    record_every: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    scale: str
    leo: WalkerConfig
    gnss: WalkerConfig
    epoch: float
    mask_deg: float
    plan: FrequencyPlan
    noise: NoiseSpec
    truth: TruthSpec
    k_neighbors: int
    graphs: int
    horizon: float
    gt: GTParams
    whitening: bool
    workers: int
    ablation: AblationConfig
    fixing: FixingConfig
    raw: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def L(self) -> int:
        return self.leo.total_satellites

    @property
    def G(self) -> int:
        return self.gnss.total_satellites

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _walker(d: dict, section: str) -> WalkerConfig:
    planes = _num(d, "planes", section, int, positive=True)
    per = _num(d, "sats_per_plane", section, int, positive=True)
    try:
        return WalkerConfig(
            planes * per, planes, per,
            _num(d, "altitude_km", section, positive=True) * 1e3,
            _num(d, "inclination_deg", section),
            _num(d, "phasing", section, int, nonneg=True),
            math.radians(_num(d, "raan0_deg", section)),
        )
    except GeometryError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def build_config(overrides: dict | None = None, scale: str = "desk", seed: int | None = None) -> ExperimentConfig:
    """Validated configuration from a scale preset plus user overrides."""
    if scale not in SCALES:
        raise ConfigError(f"unknown scale '{scale}' (expected one of {sorted(SCALES)})")
    raw = _merge(SCALES[scale], overrides or {})
    if seed is not None:
        raw["seed"] = seed
    s = _num(raw, "seed", "", int, nonneg=True)
    if s >= 2 ** 64:
        raise ConfigError("'seed' must fit in 64 bits")
    raw["seed"] = s

    sc, nz, tr, tp = raw["scenario"], raw["noise"], raw["truth"], raw["topology"]
    sv, ab, fx = raw["solver"], raw["ablation"], raw["fixing"]
    freqs = sc["frequencies_mhz"]
    if not isinstance(freqs, list) or not freqs:
        raise ConfigError("'scenario.frequencies_mhz' must be a non-empty list")
    try:
        plan = FrequencyPlan.from_frequencies([_num({"f": f}, "f", "scenario.frequencies_mhz", positive=True) * 1e6
                                               for f in freqs])
        noise = NoiseSpec(
            sigma_phase=_num(nz, "sigma_phase_mm", "noise", nonneg=True) * 1e-3,
            sigma_code=_num(nz, "sigma_code_cm", "noise", nonneg=True) * 1e-2,
            sigma_doppler=_num(nz, "sigma_doppler_hz", "noise", nonneg=True),
            sigma_clock_rx=_num(nz, "sigma_clock_rx_ns", "noise", nonneg=True) * 1e-9,
            sigma_clock_gnss=_num(nz, "sigma_clock_gnss_ns", "noise", nonneg=True) * 1e-9,
            rng_seed=s,
        )
    except ObservationError as exc:
        raise ConfigError(str(exc)) from exc
    if plan.F < 2:
        raise ConfigError("at least two frequencies are required")
    truth = TruthSpec(
        ambiguity_span=_num(tr, "ambiguity_span_cycles", "truth", int, nonneg=True),
        iono_sigma=_num(tr, "iono_sigma_m", "truth", nonneg=True),
        drift_sigma=_num(tr, "drift_sigma_mps", "truth", nonneg=True),
        phase_bias_sigma=_num(tr, "phase_bias_sigma_cycles", "truth", nonneg=True),
        code_bias_sigma=_num(tr, "code_bias_sigma_m", "truth", nonneg=True),
        position_sigma=_num(tr, "position_sigma_m", "truth", nonneg=True),
        velocity_sigma=_num(tr, "velocity_sigma_mps", "truth", nonneg=True),
    )
    try:
        gt = GTParams(
            gamma=_num(sv, "gamma", "solver", positive=True),
            theta=_num(sv, "theta", "solver", nonneg=True),
            rounds=_num(sv, "rounds", "solver", int, positive=True),
            max_iter=_num(sv, "max_iter", "solver", int, positive=True),
            tol=_num(sv, "tol", "solver", nonneg=True),
            divergence_factor=_num(sv, "divergence_factor", "solver", positive=True),
        )
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from exc
    if not isinstance(sv["whitening"], bool):
        raise ConfigError("'solver.whitening' must be true or false")
    ablation = AblationConfig(
        _num(ab, "max_iter", "ablation", int, positive=True),
        _num(ab, "vanilla_gamma_factor", "ablation", positive=True),
        _num(ab, "record_every", "ablation", int, positive=True),
    )
    if fx["method"] not in ("bootstrap", "ils"):
        raise ConfigError("'fixing.method' must be 'bootstrap' or 'ils'")
    if fx["scope"] not in ("network", "node"):
        raise ConfigError("'fixing.scope' must be 'network' or 'node'")
    block = _num(fx, "block", "fixing", int, positive=True)
    if block > 12:
        raise ConfigError("'fixing.block' must not exceed 12")
    fixing = FixingConfig(fx["method"], block, _num(fx, "radius", "fixing", int, nonneg=True), fx["scope"])
    leo = _walker(raw["leo"], "leo")
    k = _num(tp, "k_neighbors", "topology", int, positive=True)
    if k >= leo.total_satellites:
        raise ConfigError("'topology.k_neighbors' must be smaller than the number of LEO satellites")
    mask = _num(sc, "elevation_mask_deg", "scenario")
    if not -90.0 <= mask <= 90.0:
        raise ConfigError("'scenario.elevation_mask_deg' must lie in [-90, 90]")
    return ExperimentConfig(
        seed=s, scale=scale, leo=leo, gnss=_walker(raw["gnss"], "gnss"),
        epoch=_num(sc, "epoch_s", "scenario"), mask_deg=mask, plan=plan, noise=noise, truth=truth,
        k_neighbors=k, graphs=_num(tp, "graphs", "topology", int, positive=True),
        horizon=_num(tp, "horizon_s", "topology", nonneg=True), gt=gt, whitening=sv["whitening"],
        workers=_num(sv, "workers", "solver", int, positive=True), ablation=ablation, fixing=fixing,
        raw=raw,
    )


def read_structured(path: str | Path) -> Any:
    """Load a YAML or JSON document."""
    try:
        with open(path) as fh:
            return yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed document: {exc}") from exc


def load_config(path: str | Path | None, scale: str = "desk", seed: int | None = None) -> ExperimentConfig:
    data = {} if path is None else read_structured(path)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(data, scale, seed)


# ---------------------------------------------------------------------------
# scenario

@dataclass
class Scenario:
    config: ExperimentConfig
    geometry: EpochGeometry
    truth: Any
    observations: Any
    design: Any
    basis: Any
    model: Any
    partition: Any
    problems: list[NodeProblem]
    graphs: list
    mixing: list[np.ndarray]
    alpha_truth: np.ndarray

    @property
    def labels(self) -> list[str]:
        return self.model.labels()


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    """Constellation, observations and the partitioned estimable model for one epoch."""
    leo_el = build_walker(cfg.leo)
    gnss_el = build_walker(cfg.gnss)
    geo = visibility(propagate_all(leo_el, cfg.epoch), propagate_all(gnss_el, cfg.epoch), cfg.mask_deg, cfg.epoch)
    geo.require_min_visible(4)
    truth = sample_truth(geo, cfg.plan, cfg.noise, cfg.truth)
    obs = synthesize_epoch(truth, geo, cfg.plan, cfg.noise)
    design = assemble_design(geo, cfg.plan)
    basis = build_sbasis(design)
    model = reduce(design, basis)
    part = partition(model)
    problems = [NodeProblem(nb.A, nb.B, obs.Qinv_diag(nb.node), obs.y_node(nb.node), nb.node)
                for nb in part.nodes]
    graphs = graph_sequence(leo_el, cfg.horizon, cfg.graphs, cfg.k_neighbors, cfg.epoch)
    mixing = [metropolis(g) for g in graphs]
    for g, W in zip(graphs, mixing):
        check_mixing(W, g)
    alpha = s_transform(truth.to_vector(design.layout), basis).values
    return Scenario(cfg, geo, truth, obs, design, basis, model, part, problems, graphs, mixing, alpha)


def _split(sc: Scenario, full: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    return [full[nb.local_cols] for nb in sc.partition.nodes], full[sc.partition.global_cols]


def _assemble(sc: Scenario, xs: list[np.ndarray], z: np.ndarray) -> np.ndarray:
    out = np.zeros(sc.model.r)
    for nb, x in zip(sc.partition.nodes, xs):
        out[nb.local_cols] = x
    out[sc.partition.global_cols] = z
    return out


def _label_index(labels: list[str], prefix: str) -> np.ndarray:
    return np.array([i for i, s in enumerate(labels) if s.startswith(prefix)], dtype=int)


def node_errors(sc: Scenario, est_xs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-node position error norm (m) and estimable clock error (s).

    The pivot receiver's clock is the datum; its entry is NaN.
    """
    truth_xs, _ = _split(sc, sc.alpha_truth)
    orbit = np.zeros(len(est_xs))
    clock = np.full(len(est_xs), np.nan)
    for l, (nb, x, t) in enumerate(zip(sc.partition.nodes, est_xs, truth_xs)):
        ip = _label_index(nb.local_labels, "dp[")
        orbit[l] = float(np.linalg.norm(x[ip] - t[ip]))
        ic = _label_index(nb.local_labels, "rx_clock[")
        if ic.size:
            clock[l] = float(x[ic[0]] - t[ic[0]]) / C_LIGHT
    return orbit, clock


def rmse(values: np.ndarray) -> float:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    return float(math.sqrt(np.mean(v ** 2))) if v.size else math.nan


def standalone_prior(sc: Scenario) -> np.ndarray:
    """Broadcast-like global states: the estimable truth with satellite clock errors added."""
    _, z_true = _split(sc, sc.alpha_truth)
    z = z_true.copy()
    idx = _label_index(sc.partition.global_labels, "sat_clock[")
    sigma = sc.config.noise.sigma_clock_gnss * C_LIGHT
    if sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([sc.config.seed, 0x5A7E]))
        z[idx] += rng.normal(0.0, sigma, idx.size)
    return z


def _scaling(cfg: ExperimentConfig, problems: list[NodeProblem]):
    return hessian_whitening(problems) if cfg.whitening else None


# ---------------------------------------------------------------------------
# comparison

@dataclass
class ComparisonResult:
    scenario: Scenario
    central: Any
    trace: SolverTrace
    estimates: dict[str, list[np.ndarray]]
    z: dict[str, np.ndarray]
    node_orbit: dict[str, np.ndarray]
    node_clock: dict[str, np.ndarray]
    fix_report: FixReport
    fixed_ambiguities: np.ndarray
    runtime: dict[str, float]

    def orbit_rmse(self, strategy: str) -> float:
        return rmse(self.node_orbit[strategy])

    def clock_rmse(self, strategy: str) -> float:
        return rmse(self.node_clock[strategy])


def _fix_network(sc: Scenario, central, xs: list[np.ndarray], z: np.ndarray):
    cfg = sc.config.fixing
    est = _assemble(sc, xs, z)
    labels = sc.labels
    if cfg.scope == "network":
        if central.covariance is None:
            raise NumericalFailure("network-scope fixing needs the full covariance; use scope 'node'")
        perm = sc.partition.permutation
        C = np.empty_like(central.covariance)
        C[np.ix_(perm, perm)] = central.covariance
        ia = _label_index(labels, "amb[")
        ib = np.setdiff1d(np.arange(len(labels)), ia)
        Qa = 0.5 * (C[np.ix_(ia, ia)] + C[np.ix_(ia, ia)].T)
        fl = FloatAmbiguities(est[ia], Qa, C[np.ix_(ib, ia)])
        ints, rep = fix_blockwise(fl, cfg.block, cfg.method, cfg.radius)
        sol = fix_solution(est[ib], fl, ints, report=rep)
        out = est.copy()
        out[ia] = ints
        out[ib] = sol.b
        fxs, fz = _split(sc, out)
        return fxs, fz, rep, ints
    # node scope: every node fixes its own ambiguities with its marginal covariance
    fxs, all_ints, rep = [], [], FixReport()
    for l, (nb, x) in enumerate(zip(sc.partition.nodes, xs)):
        Cx, _ = central.node_covariance(sc.problems, l)
        ia = _label_index(nb.local_labels, "amb[")
        ib = np.setdiff1d(np.arange(len(nb.local_labels)), ia)
        fl = FloatAmbiguities(x[ia], 0.5 * (Cx[np.ix_(ia, ia)] + Cx[np.ix_(ia, ia)].T), Cx[np.ix_(ib, ia)])
        ints, r = fix_blockwise(fl, cfg.block, cfg.method, cfg.radius)
        for b in r.blocks:
            b.block = len(rep.blocks)
            rep.blocks.append(b)
        sol = fix_solution(x[ib], fl, ints, report=r)
        xn = x.copy()
        xn[ia] = ints
        xn[ib] = sol.b
        fxs.append(xn)
        all_ints.append(ints)
    return fxs, z.copy(), rep, np.concatenate(all_ints) if all_ints else np.zeros(0, np.int64)


def run_comparison(cfg: ExperimentConfig) -> ComparisonResult:
    """Standalone, network-float (gradient tracking) and network-fixed solutions for one epoch."""
    t0 = time.perf_counter()
    sc = build_scenario(cfg)
    t1 = time.perf_counter()
    central = centralized_wls(sc.problems, full_covariance=None if cfg.fixing.scope == "node" else True)
    t2 = time.perf_counter()

    prior = standalone_prior(sc)
    alone = [standalone_wls(pb, prior) for pb in sc.problems]

    period = period_length(cfg.gt.max_iter, cfg.graphs)
    trace = gt_solve(sc.problems, sc.mixing, cfg.gt, reference=central.z, period=period,
                     scaling=_scaling(cfg, sc.problems), workers=cfg.workers)
    t3 = time.perf_counter()
    # every node reports its own state; the fix uses the node-averaged z
    float_xs = trace.x
    z_float = trace.z.mean(axis=0)
    fxs, z_fixed, rep, ints = _fix_network(sc, central, float_xs, z_float)
    t4 = time.perf_counter()

    estimates = {"standalone": alone, "network_float": float_xs, "network_fixed": fxs}
    zs = {"standalone": prior, "network_float": z_float, "network_fixed": z_fixed}
    orbit, clock = {}, {}
    for k, xs in estimates.items():
        orbit[k], clock[k] = node_errors(sc, xs)
    runtime = {"scenario_s": t1 - t0, "central_s": t2 - t1, "gt_s": t3 - t2, "fixing_s": t4 - t3}
    return ComparisonResult(sc, central, trace, estimates, zs, orbit, clock, rep, ints, runtime)


# ---------------------------------------------------------------------------
# ablation

def variant_params(cfg: ExperimentConfig, name: str) -> GTParams:
    g, a = cfg.gt, cfg.ablation
    quarter = g.gamma * a.vanilla_gamma_factor
    table = {
        "vanilla": (quarter, 0.0, 1),
        "momentum": (quarter, g.theta, 1),
        "consensus": (g.gamma, 0.0, g.rounds),
        "combined": (g.gamma, g.theta, g.rounds),
    }
    if name not in table:
        raise ValueError(f"unknown variant {name!r}")
    gamma, theta, rounds = table[name]
    return GTParams(gamma=gamma, theta=theta, rounds=rounds, max_iter=a.max_iter, tol=0.0,
                    divergence_factor=g.divergence_factor, record_every=a.record_every)


@dataclass
class AblationResult:
    scenario: Scenario
    central: Any
    traces: dict[str, SolverTrace]
    params: dict[str, GTParams]
    runtime: dict[str, float]

    def iterations_to(self, variant: str, level: float) -> int | None:
        return self.traces[variant].first_below("msd", level)


def run_ablation(cfg: ExperimentConfig, variants=VARIANTS) -> AblationResult:
    """Run the GT variants on identical data; divergence is recorded, not raised."""
    sc = build_scenario(cfg)
    central = centralized_wls(sc.problems, full_covariance=False)
    D = _scaling(cfg, sc.problems)
    period = period_length(cfg.ablation.max_iter, cfg.graphs)
    traces, params, runtime = {}, {}, {}
    for name in variants:
        prm = variant_params(cfg, name)
        t = time.perf_counter()
        traces[name] = gt_solve(sc.problems, sc.mixing, prm, reference=central.z, period=period,
                                scaling=D, workers=cfg.workers, raise_on_divergence=False)
        runtime[f"{name}_s"] = time.perf_counter() - t
        params[name] = prm
    return AblationResult(sc, central, traces, params, runtime)


# ---------------------------------------------------------------------------
# report emission

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def trace_csv(trace: SolverTrace) -> str:
    rows = ([k, _fmt(m), _fmt(g), _fmt(d)]
            for k, m, g, d in zip(trace.iterations, trace.msd, trace.avg_grad_norm, trace.disagreement))
    return _csv_text(["k", "msd", "avg_grad_norm", "disagreement"], rows)


def _clean(obj):
    """JSON-safe copy: NaN becomes null, numpy scalars become Python scalars."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def _scenario_summary(sc: Scenario) -> dict:
    counts = sc.geometry.counts
    return {
        "L": sc.geometry.L, "G": sc.geometry.G, "F": sc.config.plan.F,
        "raw_parameters": sc.design.layout.n, "estimable_parameters": sc.model.r,
        "global_states": sc.partition.p, "observations": sc.design.layout.m,
        "visible_min": int(counts.min()), "visible_mean": float(counts.mean()),
        "graph_sigma2": [float(np.linalg.svd(W - 1.0 / W.shape[0], compute_uv=False)[0]) for W in sc.mixing],
    }


def _trace_summary(trace: SolverTrace) -> dict:
    return {
        "iterations": trace.iterations[-1] if trace.iterations else 0,
        "final_msd": trace.msd[-1] if trace.msd else None,
        "final_avg_grad_norm": trace.avg_grad_norm[-1] if trace.avg_grad_norm else None,
        "iterations_to_msd_1e-6": trace.first_below("msd", 1e-6),
        "iterations_to_msd_1e-10": trace.first_below("msd", 1e-10),
        "diverged_at": trace.diverged_at,
    }


def emit_comparison(res: ComparisonResult, directory: str | Path) -> dict:
    """Write report.json, trace_combined.csv, errors.csv, topology.csv, states.csv and fix_report.csv."""
    out = Path(directory)
    sc = res.scenario
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "compare",
        "seed": sc.config.seed,
        "scale": sc.config.scale,
        "config": sc.config.to_dict(),
        "scenario": _scenario_summary(sc),
        "strategies": {s: {"orbit_rmse_m": res.orbit_rmse(s), "clock_rmse_s": res.clock_rmse(s)}
                       for s in STRATEGIES},
        "solver": {"variant": "combined", **_trace_summary(res.trace)},
        "fixing": {"dimension": int(res.fixed_ambiguities.size), "blocks": len(res.fix_report.blocks),
                   "blocks_flagged_successful": sum(b.success for b in res.fix_report.blocks),
                   "residual": res.fix_report.residual},
    }
    rows = []
    for s in STRATEGIES:
        for l in range(sc.geometry.L):
            rows.append([s, l, _fmt(res.node_orbit[s][l]),
                         _fmt(res.node_clock[s][l]) if np.isfinite(res.node_clock[s][l]) else ""])
    truth = sc.alpha_truth
    est = {s: _assemble(sc, res.estimates[s], res.z[s]) for s in STRATEGIES}
    state_rows = ([lab, _fmt(truth[i])] + [_fmt(est[s][i]) for s in STRATEGIES]
                  for i, lab in enumerate(sc.labels))
    fix_rows = ([b.block, b.dimension, int(b.success), _fmt(b.residual)] for b in res.fix_report.blocks)
    _atomic_write(out / "trace_combined.csv", trace_csv(res.trace))
    _atomic_write(out / "errors.csv", _csv_text(["strategy", "node", "orbit_error_m", "clock_error_s"], rows))
    _atomic_write(out / "topology.csv", topology_csv(sc))
    _atomic_write(out / "states.csv", _csv_text(["label", "truth"] + list(STRATEGIES), state_rows))
    _atomic_write(out / "fix_report.csv", _csv_text(["block", "dimension", "success", "residual"], fix_rows))
    _atomic_write(out / "runtime.json", json.dumps(_clean(res.runtime), indent=2, sort_keys=True) + "\n")
    report = _clean(report)
    _atomic_write(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def topology_csv(sc: Scenario) -> str:
    rows = []
    for t, (g, W) in enumerate(zip(sc.graphs, sc.mixing)):
        for l in range(g.L):
            for q in range(g.L):
                if W[l, q] != 0.0:
                    rows.append([t, l, q, _fmt(W[l, q])])
    return _csv_text(["t", "l", "q", "weight"], rows)


def emit_ablation(res: AblationResult, directory: str | Path) -> dict:
    out = Path(directory)
    sc = res.scenario
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "ablate",
        "seed": sc.config.seed,
        "scale": sc.config.scale,
        "config": sc.config.to_dict(),
        "scenario": _scenario_summary(sc),
        "variants": {
            name: {"gamma": res.params[name].gamma, "theta": res.params[name].theta,
                   "rounds": res.params[name].rounds, **_trace_summary(tr)}
            for name, tr in res.traces.items()
        },
    }
    for name, tr in res.traces.items():
        _atomic_write(out / f"trace_{name}.csv", trace_csv(tr))
    _atomic_write(out / "topology.csv", topology_csv(sc))
    _atomic_write(out / "runtime.json", json.dumps(_clean(res.runtime), indent=2, sort_keys=True) + "\n")
    report = _clean(report)
    _atomic_write(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def emit_geometry(cfg: ExperimentConfig, directory: str | Path) -> dict:
    """Geometry, observations (CSV and npz) and the estimable-parameter label table."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    sc = build_scenario(cfg)
    for name, writer in (
        ("geometry.csv", lambda p: write_geometry_csv(sc.geometry, p)),
        ("observations.csv", lambda p: sc.observations.write_csv(p)),
        ("estimable_labels.csv", lambda p: write_label_table(sc.design.layout, sc.basis.kept, p)),
        ("topology.csv", lambda p: Path(p).write_text(topology_csv(sc))),
    ):
        _replace_via(out / name, writer)
    _replace_via(out / "observations.npz", lambda p: sc.observations.save(p), suffix=".npz")
    write = _clean({"schema_version": SCHEMA_VERSION, "command": "geometry", "seed": cfg.seed,
                    "scale": cfg.scale, "config": cfg.to_dict(), "scenario": _scenario_summary(sc)})
    _atomic_write(out / "report.json", json.dumps(write, indent=2, sort_keys=True) + "\n")
    return write


def _replace_via(path: Path, writer, suffix: str = ".tmp") -> None:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=suffix, dir=path.parent)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# errors that mean "the numbers did not work out" rather than "bad input"
NUMERICAL_ERRORS = (SolverError, NumericalFailure, EstimabilityError, TopologyError, GeometryError,
                    np.linalg.LinAlgError)
