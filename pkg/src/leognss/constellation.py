"""Walker-Delta constellations, two-body propagation and LEO-to-GNSS visibility."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MU_EARTH = 398600.4418e9  # m^3/s^2
R_EARTH = 6_371_000.0  # m, spherical Earth used for blockage


class GeometryError(ValueError):
    """Invalid constellation configuration or degenerate geometry."""


@dataclass(frozen=True)
class WalkerConfig:
    """Walker-Delta shell i:T/P/F, circular orbits."""

    total_satellites: int
    planes: int
    sats_per_plane: int
    altitude: float  # m
    inclination: float  # deg
    phasing: int = 1
    raan0: float = 0.0  # rad
    epoch0: float = 0.0  # s

    def __post_init__(self):
        if self.planes <= 0 or self.sats_per_plane <= 0:
            raise GeometryError("planes and sats_per_plane must be positive")
        if self.total_satellites % self.planes != 0:
            raise GeometryError(
                f"total_satellites={self.total_satellites} not divisible by planes={self.planes}"
            )
        if self.total_satellites != self.planes * self.sats_per_plane:
            raise GeometryError(
                f"total_satellites={self.total_satellites} != "
                f"planes*sats_per_plane={self.planes * self.sats_per_plane}"
            )
        if not self.altitude > 0:
            raise GeometryError("altitude must be positive")
        if not 0.0 <= self.inclination <= 180.0:
            raise GeometryError("inclination must lie in [0, 180] degrees")


@dataclass(frozen=True)
class OrbitalElements:
    """Circular two-body orbit: radius, inclination, RAAN and argument of latitude at epoch0."""

    radius: float
    inclination: float  # rad
    raan: float  # rad
    arg_latitude: float  # rad, at epoch0
    epoch0: float = 0.0
    plane: int = 0
    slot: int = 0

    @property
    def mean_motion(self) -> float:
        return math.sqrt(MU_EARTH / self.radius**3)

    @property
    def period(self) -> float:
        return 2.0 * math.pi / self.mean_motion


@dataclass(frozen=True)
class SatelliteState:
    id: int
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        if np.linalg.norm(self.position) <= R_EARTH:
            raise GeometryError(f"satellite {self.id} is inside the Earth sphere")


@dataclass
class EpochGeometry:
    """Geometry of one processing epoch.

    ``visible[l]`` holds the ascending GNSS indices seen by LEO node ``l`` and
    ``los[l]`` the matching ``(G_l, 3)`` unit vectors pointing from each GNSS
    satellite toward the receiver.
    """

    epoch: float
    leo_states: list[SatelliteState]
    gnss_states: list[SatelliteState]
    visible: list[np.ndarray]
    los: list[np.ndarray]
    elevation: list[np.ndarray] = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.leo_states)

    @property
    def G(self) -> int:
        return len(self.gnss_states)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(v) for v in self.visible], dtype=int)

    def leo_positions(self) -> np.ndarray:
        return np.array([s.position for s in self.leo_states])

    def require_min_visible(self, minimum: int = 4) -> None:
        low = [l for l, v in enumerate(self.visible) if len(v) < minimum]
        if low:
            raise GeometryError(
                f"LEO nodes {low} see fewer than {minimum} GNSS satellites "
                f"(counts {[len(self.visible[l]) for l in low]})"
            )


def build_walker(config: WalkerConfig) -> list[OrbitalElements]:
    """Element sets for every satellite of a Walker-Delta shell, plane-major order."""
    T, P, S = config.total_satellites, config.planes, config.sats_per_plane
    radius = R_EARTH + config.altitude
    inc = math.radians(config.inclination)
    elements = []
    for p in range(P):
        raan = (config.raan0 + 2.0 * math.pi * p / P) % (2.0 * math.pi)
        for s in range(S):
            u = 2.0 * math.pi * s / S + config.phasing * 2.0 * math.pi * p / T
            elements.append(
                OrbitalElements(radius, inc, raan, u % (2.0 * math.pi), config.epoch0, p, s)
            )
    return elements


def _rotation(el: OrbitalElements) -> np.ndarray:
    cO, sO = math.cos(el.raan), math.sin(el.raan)
    ci, si = math.cos(el.inclination), math.sin(el.inclination)
    # columns: in-plane x (ascending node), in-plane y
    return np.array(
        [
            [cO, -sO * ci],
            [sO, cO * ci],
            [0.0, si],
        ]
    )


def propagate(elements: OrbitalElements, epoch: float, id: int = 0) -> SatelliteState:
    """Two-body state of a circular orbit at ``epoch`` (inertial frame)."""
    if epoch < elements.epoch0:
        raise GeometryError("epoch precedes element epoch0")
    n = elements.mean_motion
    u = elements.arg_latitude + n * (epoch - elements.epoch0)
    r = elements.radius
    R = _rotation(elements)
    pos = R @ np.array([r * math.cos(u), r * math.sin(u)])
    vel = R @ np.array([-r * n * math.sin(u), r * n * math.cos(u)])
    return SatelliteState(id, pos, vel)


def propagate_all(elements: list[OrbitalElements], epoch: float) -> list[SatelliteState]:
    return [propagate(el, epoch, i) for i, el in enumerate(elements)]


def segment_clears_earth(a: np.ndarray, b: np.ndarray, radius: float = R_EARTH) -> bool:
    """True when the closed segment a-b stays strictly outside the sphere."""
    d = b - a
    dd = float(d @ d)
    t = 0.0 if dd == 0.0 else min(1.0, max(0.0, -float(a @ d) / dd))
    closest = a + t * d
    return float(np.linalg.norm(closest)) > radius


def visibility(
    leo_states: list[SatelliteState],
    gnss_states: list[SatelliteState],
    mask: float = 0.0,
    epoch: float = 0.0,
) -> EpochGeometry:
    """Visible GNSS sets and line-of-sight vectors for every LEO node.

    A GNSS satellite is visible when the straight segment to the receiver misses
    the Earth sphere and its elevation above the receiver's local horizontal
    plane is at least ``mask`` degrees.
    """
    sin_mask = math.sin(math.radians(mask))
    visible, los, elev = [], [], []
    for leo in leo_states:
        p = leo.position
        up = p / np.linalg.norm(p)
        ids, us, els = [], [], []
        for g, sat in enumerate(gnss_states):
            d = sat.position - p
            rng = float(np.linalg.norm(d))
            if rng == 0.0:
                raise GeometryError(f"LEO {leo.id} and GNSS {g} coincide")
            s_el = float(d @ up) / rng
            if s_el < sin_mask or not segment_clears_earth(p, sat.position):
                continue
            ids.append(g)
            us.append(-d / rng)
            els.append(math.degrees(math.asin(max(-1.0, min(1.0, s_el)))))
        visible.append(np.array(ids, dtype=int))
        los.append(np.array(us, dtype=float).reshape(-1, 3))
        elev.append(np.array(els, dtype=float))
    return EpochGeometry(epoch, list(leo_states), list(gnss_states), visible, los, elev)


def default_gnss_config(total: int = 30, planes: int = 6) -> WalkerConfig:
    """GPS-like Walker shell used when no GNSS elements are given."""
    return WalkerConfig(
        total_satellites=total,
        planes=planes,
        sats_per_plane=total // planes,
        altitude=20_200_000.0,
        inclination=55.0,
        phasing=1,
    )


def write_geometry_csv(geometry: EpochGeometry, path: str | Path) -> None:
    """Dump LEO then GNSS states as ``epoch,kind,id,x,y,z,vx,vy,vz`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "kind", "id", "x", "y", "z", "vx", "vy", "vz"])
        for kind, states in (("leo", geometry.leo_states), ("gnss", geometry.gnss_states)):
            for s in states:
                w.writerow([repr(geometry.epoch), kind, s.id]
                           + [repr(float(v)) for v in s.position]
                           + [repr(float(v)) for v in s.velocity])
