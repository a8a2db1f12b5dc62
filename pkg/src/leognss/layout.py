"""Index bookkeeping for the raw parameter vector and the stacked observation vector.

Parameter order: LEO orbit (dp, dv per node), LEO clock blocks
``[dt, dt_dot, delta_1..F, b_1..F]`` per node, GNSS clock blocks (same layout),
ionospheric delays per link, ambiguities per node/frequency/link.  Observation
order: node, frequency, then phase/code/Doppler blocks over the node's visible
satellites in ascending index.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

PHASE, CODE, DOPPLER = 0, 1, 2
OBS_TYPES = ("phase", "code", "doppler")


@dataclass(frozen=True)
class Layout:
    L: int
    G: int
    F: int
    visible: tuple[tuple[int, ...], ...]

    @classmethod
    def from_visibility(cls, visible, G: int, F: int) -> "Layout":
        vis = tuple(tuple(int(g) for g in v) for v in visible)
        for l, v in enumerate(vis):
            if not v:
                raise ValueError(f"LEO node {l} has an empty visibility set")
            if list(v) != sorted(set(v)):
                raise ValueError(f"visibility set of node {l} is not strictly ascending")
            if v[-1] >= G or v[0] < 0:
                raise ValueError(f"visibility set of node {l} references unknown GNSS index")
        return cls(len(vis), G, F, vis)

    # -- sizes -------------------------------------------------------------
    @property
    def clk_width(self) -> int:
        return 2 + 2 * self.F

    @cached_property
    def counts(self) -> np.ndarray:
        return np.array([len(v) for v in self.visible], dtype=int)

    @cached_property
    def link_start(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)])

    @property
    def n_links(self) -> int:
        return int(self.link_start[-1])

    @cached_property
    def links(self) -> list[tuple[int, int]]:
        return [(l, g) for l, v in enumerate(self.visible) for g in v]

    @cached_property
    def link_index(self) -> dict[tuple[int, int], int]:
        return {lg: k for k, lg in enumerate(self.links)}

    @property
    def off_orb(self) -> int:
        return 0

    @property
    def off_leo_clk(self) -> int:
        return 6 * self.L

    @property
    def off_gnss_clk(self) -> int:
        return self.off_leo_clk + self.L * self.clk_width

    @property
    def off_ion(self) -> int:
        return self.off_gnss_clk + self.G * self.clk_width

    @property
    def off_amb(self) -> int:
        return self.off_ion + self.n_links

    @property
    def n(self) -> int:
        return self.off_amb + self.F * self.n_links

    @cached_property
    def row_start(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(3 * self.F * self.counts)])

    @property
    def m(self) -> int:
        return int(self.row_start[-1])

    def block_widths(self) -> dict[str, int]:
        return {
            "leo_orb": 6 * self.L,
            "leo_clk": self.L * self.clk_width,
            "gnss_clk": self.G * self.clk_width,
            "ion": self.n_links,
            "amb": self.F * self.n_links,
        }

    # -- parameter indices -------------------------------------------------
    def pos(self, l: int) -> np.ndarray:
        return np.arange(6 * l, 6 * l + 3)

    def vel(self, l: int) -> np.ndarray:
        return np.arange(6 * l + 3, 6 * l + 6)

    def _clk(self, base: int, i: int, what: str, f: int | None) -> int:
        o = base + i * self.clk_width
        if what == "clock":
            return o
        if what == "drift":
            return o + 1
        if what == "phase_bias":
            return o + 2 + f
        if what == "code_bias":
            return o + 2 + self.F + f
        raise KeyError(what)

    def rx(self, l: int, what: str, f: int | None = None) -> int:
        return self._clk(self.off_leo_clk, l, what, f)

    def sat(self, g: int, what: str, f: int | None = None) -> int:
        return self._clk(self.off_gnss_clk, g, what, f)

    def ion(self, l: int, g: int) -> int:
        return self.off_ion + self.link_index[(l, g)]

    def amb(self, l: int, g: int, f: int) -> int:
        j = self.visible[l].index(g)
        return self.off_amb + self.F * int(self.link_start[l]) + f * int(self.counts[l]) + j

    def param_labels(self) -> list[str]:
        labels = []
        for l in range(self.L):
            labels += [f"dp[{l}].{a}" for a in "xyz"] + [f"dv[{l}].{a}" for a in "xyz"]
        for tag, count in (("rx", self.L), ("sat", self.G)):
            for i in range(count):
                labels += [f"{tag}[{i}].clock", f"{tag}[{i}].drift"]
                labels += [f"{tag}[{i}].phase_bias[{f}]" for f in range(self.F)]
                labels += [f"{tag}[{i}].code_bias[{f}]" for f in range(self.F)]
        labels += [f"ion[{l},{g}]" for l, g in self.links]
        for l in range(self.L):
            for f in range(self.F):
                labels += [f"amb[{l},{g}][{f}]" for g in self.visible[l]]
        return labels

    # -- observation indices ---------------------------------------------
    def row(self, l: int, f: int, kind: int, j: int) -> int:
        """Row of the j-th visible satellite of node l, frequency f, observable kind."""
        G_l = int(self.counts[l])
        return int(self.row_start[l]) + (3 * f + kind) * G_l + j

    def node_rows(self, l: int) -> slice:
        return slice(int(self.row_start[l]), int(self.row_start[l + 1]))
