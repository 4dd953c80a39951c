"""Occupancy events, scene PET, the exponential risk criterion, collisions,
and the statistical-realism metric suite.

PET (post-encroachment time) for a scene: rasterize every vehicle footprint
onto a grid, collect per-cell occupancy intervals, and take the smallest
time gap between one vehicle leaving a cell and another entering it. Two
vehicles occupying a cell at the same time give PET 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GridSpec, corners_from_pose, corners_overlap, rasterize_corners
from .scene import JointTrajectory, SceneConfig, VehicleDims

Cell = tuple[int, int]


@dataclass(frozen=True)
class OccupancyEvent:
    """Maximal contiguous interval during which one vehicle covers one cell."""

    cell: Cell
    vehicle: int
    t_enter: float
    t_exit: float

    def __post_init__(self):
        if self.t_exit < self.t_enter:
            raise ValueError("t_exit must be >= t_enter")


@dataclass(frozen=True)
class PetResult:
    """Scene PET with the cell and vehicle pair realizing it; value is None
    when no cell is ever visited by two distinct vehicles."""

    value: float | None
    cell: Cell | None = None
    pair: tuple[int, int] | None = None

    def __post_init__(self):
        if self.value is not None and self.value < 0:
            raise ValueError("PET must be >= 0")


@dataclass(frozen=True)
class RiskParams:
    """Constants of the exponential PET-to-risk map."""

    gain: float = 5.0
    bias: float = 0.05
    pet_limit: float = 3.2

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if not self.pet_limit > 0:
            raise ValueError("pet_limit must be positive")
        if not 0 <= self.bias < 1:
            raise ValueError("bias must be in [0, 1)")


def _dims_array(dims, n: int) -> np.ndarray:
    if isinstance(dims, VehicleDims):
        return np.tile([dims.length, dims.width], (n, 1)).astype(float)
    if isinstance(dims, (list, tuple)) and dims and isinstance(dims[0], VehicleDims):
        return np.array([[d.length, d.width] for d in dims], dtype=float)
    arr = np.asarray(dims, dtype=float)
    if arr.shape != (n, 2):
        raise ValueError(f"dims must resolve to shape ({n}, 2)")
    return arr


def footprint_cells(
    jt: JointTrajectory, dims, grid: GridSpec
) -> list[list[frozenset | None]]:
    """Rasterized cell set per (agent, step); None where the agent is absent."""
    dims_arr = _dims_array(dims, jt.n_agents)
    out: list[list[frozenset | None]] = []
    for i in range(jt.n_agents):
        length, width = dims_arr[i]
        row: list[frozenset | None] = []
        for t in range(jt.n_steps):
            if not jt.mask[i, t]:
                row.append(None)
                continue
            x, y, c, s = jt.data[i, t]
            norm = math.hypot(c, s)
            if norm < 1e-12:
                c, s = 1.0, 0.0
            else:
                c, s = c / norm, s / norm
            corners = corners_from_pose(x, y, c, s, length, width)
            row.append(frozenset(rasterize_corners(corners, grid)))
        out.append(row)
    return out


def occupancy_intervals(jt: JointTrajectory, dims, grid: GridSpec) -> list[OccupancyEvent]:
    """Maximal contiguous per-cell occupancy intervals, discretized at dt."""
    cells = footprint_cells(jt, dims, grid)
    events: list[OccupancyEvent] = []
    for i in range(jt.n_agents):
        open_runs: dict[Cell, int] = {}
        for t in range(jt.n_steps + 1):
            now = cells[i][t] if t < jt.n_steps and cells[i][t] is not None else frozenset()
            for cell in list(open_runs):
                if cell not in now:
                    start = open_runs.pop(cell)
                    events.append(
                        OccupancyEvent(cell, i, start * jt.dt, (t - 1) * jt.dt)
                    )
            for cell in now:
                open_runs.setdefault(cell, t)
    events.sort(key=lambda e: (e.vehicle, e.cell, e.t_enter))
    return events


def scene_pet(events: list[OccupancyEvent]) -> PetResult:
    """Minimum PET over all cells and ordered pairs of events from distinct
    vehicles; simultaneous occupancy counts as PET 0."""
    by_cell: dict[Cell, list[OccupancyEvent]] = {}
    for ev in events:
        by_cell.setdefault(ev.cell, []).append(ev)

    best: PetResult = PetResult(None)
    for cell in sorted(by_cell):
        evs = sorted(by_cell[cell], key=lambda e: (e.t_enter, e.t_exit, e.vehicle))
        for a_idx in range(len(evs)):
            for b_idx in range(a_idx + 1, len(evs)):
                a, b = evs[a_idx], evs[b_idx]
                if a.vehicle == b.vehicle:
                    continue
                if b.t_enter <= a.t_exit and a.t_enter <= b.t_exit:
                    gap = 0.0
                elif b.t_enter >= a.t_exit:
                    gap = b.t_enter - a.t_exit
                else:
                    gap = a.t_enter - b.t_exit
                if best.value is None or gap < best.value:
                    best = PetResult(gap, cell, (a.vehicle, b.vehicle))
    return best


def risk_from_pet(pet, params: RiskParams = RiskParams()) -> float:
    """Exponential risk in (0, 1] from a PET value; undefined PET is capped
    at the normalized limit, giving the floor risk."""
    if isinstance(pet, PetResult):
        value = pet.value
    else:
        value = pet
    if value is None:
        value = params.pet_limit
    if value < 0:
        raise ValueError("PET must be >= 0")
    return math.exp(-params.gain * max(0.0, value / params.pet_limit - params.bias))


def detect_collisions(jt: JointTrajectory, dims) -> list[tuple[int, int, int]]:
    """All (step, i, j) with overlapping boxes among present vehicles, i < j.

    A vehicle inserted mid-sequence does not participate in checks on its
    first present step, so instantaneous insertion cannot register contact.
    """
    dims_arr = _dims_array(dims, jt.n_agents)
    half_diag = 0.5 * np.hypot(dims_arr[:, 0], dims_arr[:, 1])
    first_present = np.full(jt.n_agents, -1)
    for i in range(jt.n_agents):
        present = np.flatnonzero(jt.mask[i])
        if present.size:
            first_present[i] = present[0]

    out: list[tuple[int, int, int]] = []
    for t in range(jt.n_steps):
        idx = np.flatnonzero(jt.mask[:, t] & ~((first_present == t) & (first_present > 0)))
        if idx.size < 2:
            continue
        pos = jt.data[idx, t, :2]
        corners = {}
        for a_pos in range(idx.size):
            for b_pos in range(a_pos + 1, idx.size):
                i, j = int(idx[a_pos]), int(idx[b_pos])
                reach = half_diag[i] + half_diag[j]
                if np.hypot(*(pos[a_pos] - pos[b_pos])) > reach:
                    continue
                for k, p in ((i, a_pos), (j, b_pos)):
                    if k not in corners:
                        x, y, c, s = jt.data[k, t]
                        n = math.hypot(c, s)
                        c, s = (c / n, s / n) if n > 1e-12 else (1.0, 0.0)
                        corners[k] = corners_from_pose(x, y, c, s, *dims_arr[k])
                if corners_overlap(corners[i], corners[j]):
                    out.append((t, i, j))
    return out


# ---------------------------------------------------------------------------
# Fast per-window PET
# ---------------------------------------------------------------------------

def _cell_gap_candidates(cells: list[list[frozenset | None]]):
    """All adjacent same-cell step pairs from distinct vehicles.

    Returns arrays (gap_steps, t_first, t_second). Within any step window
    the minimum inter-vehicle gap in a cell is realized by a pair adjacent
    in that cell's time-sorted visit list, so windowed PET reduces to a
    filter over these candidates.
    """
    by_cell: dict[Cell, list[tuple[int, int]]] = {}
    for veh, rows in enumerate(cells):
        for t, cset in enumerate(rows):
            if cset:
                for cell in cset:
                    by_cell.setdefault(cell, []).append((t, veh))
    gaps, t_first, t_second = [], [], []
    for entries in by_cell.values():
        entries.sort()
        # the minimum inter-vehicle gap is always realized by an adjacent pair
        # (ties at equal steps are adjacent too, yielding gap 0)
        for (ta, va), (tb, vb) in zip(entries, entries[1:]):
            if va != vb:
                gaps.append(tb - ta)
                t_first.append(ta)
                t_second.append(tb)
    return (
        np.asarray(gaps, dtype=int),
        np.asarray(t_first, dtype=int),
        np.asarray(t_second, dtype=int),
    )


def window_pet_values(
    jt: JointTrajectory, dims, grid: GridSpec, window_steps: int
) -> list[float | None]:
    """Scene PET of every sliding window of the given length (stride 1)."""
    if window_steps < 1 or window_steps > jt.n_steps:
        raise ValueError("window_steps out of range")
    cells = footprint_cells(jt, dims, grid)
    gaps, t_first, t_second = _cell_gap_candidates(cells)
    out: list[float | None] = []
    for t0 in range(jt.n_steps - window_steps + 1):
        t1 = t0 + window_steps - 1
        sel = (t_first >= t0) & (t_second <= t1)
        if sel.any():
            out.append(float(gaps[sel].min()) * jt.dt)
        else:
            out.append(None)
    return out


# ---------------------------------------------------------------------------
# Realism metrics
# ---------------------------------------------------------------------------

# Fixed bin edges keep golden reports bit-stable; rounding makes every edge
# survive the 9-significant-digit file representation unchanged.
METRIC_EDGES = {
    "distance": np.round(np.arange(0.0, 50.0 + 1e-9, 1.0), 9),
    "speed": np.round(np.arange(0.0, 15.0 + 1e-9, 0.5), 9),
    "yield_distance": np.round(np.arange(0.0, 50.0 + 1e-9, 1.0), 9),
    "yield_speed": np.round(np.arange(0.0, 15.0 + 1e-9, 0.5), 9),
    "pet": np.round(np.arange(0.0, 3.2 + 1e-9, 0.2), 9),
}

YIELD_SPEED_MAX = 0.5  # m/s, below this a stopped entrant counts as yielding
YIELD_CONFLICT_RANGE = 25.0  # m, search radius for the conflicting vehicle


@dataclass
class Histogram:
    """Fixed-edge histogram; out-of-range samples are clamped to the end bins."""

    edges: np.ndarray
    counts: np.ndarray
    n_samples: int

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=int)
        if self.counts.shape[0] != self.edges.shape[0] - 1:
            raise ValueError("counts must have len(edges) - 1 entries")

    @property
    def density(self) -> np.ndarray:
        widths = np.diff(self.edges)
        total = self.counts.sum()
        if total == 0:
            return np.zeros_like(widths)
        return self.counts / (total * widths)

    def merge(self, other: "Histogram") -> "Histogram":
        if not np.array_equal(self.edges, other.edges):
            raise ValueError("histogram bin edges differ")
        return Histogram(
            self.edges, self.counts + other.counts, self.n_samples + other.n_samples
        )


def histogram(values, edges) -> Histogram:
    values = np.asarray(list(values), dtype=float)
    edges = np.asarray(edges, dtype=float)
    n = values.size
    if n:
        lo, hi = edges[0], edges[-1]
        span = hi - lo
        clipped = np.clip(values, lo, hi - 1e-12 * max(span, 1.0))
        counts, _ = np.histogram(clipped, bins=edges)
    else:
        counts = np.zeros(edges.size - 1, dtype=int)
    return Histogram(edges, counts, n)


def wasserstein(a: Histogram, b: Histogram) -> float | None:
    """1-Wasserstein distance between two same-edge histograms.

    Returns None when exactly one histogram is empty (incomparable), 0.0
    when both are empty.
    """
    if not np.array_equal(a.edges, b.edges):
        raise ValueError("histogram bin edges differ")
    ta, tb = a.counts.sum(), b.counts.sum()
    if ta == 0 and tb == 0:
        return 0.0
    if ta == 0 or tb == 0:
        return None
    pa = a.counts / ta
    pb = b.counts / tb
    widths = np.diff(a.edges)
    return float(np.sum(np.abs(np.cumsum(pa - pb)) * widths))


@dataclass
class MetricSource:
    """Everything realism metrics need from one episode or recording."""

    jt: JointTrajectory
    dims: np.ndarray
    pet_windows: list = field(default_factory=list)
    crashed: bool = False


def metric_source_from(jt: JointTrajectory, dims, scene: SceneConfig) -> MetricSource:
    """Wrap a raw joint trajectory, computing PET windows and crash status."""
    from .geometry import grid_from_bounds

    dims_arr = _dims_array(dims, jt.n_agents)
    grid = grid_from_bounds(scene.bounds, scene.grid_cell)
    win = min(scene.horizon_steps, jt.n_steps)
    pets = window_pet_values(jt, dims_arr, grid, win)
    crashed = bool(detect_collisions(jt, dims_arr))
    return MetricSource(jt, dims_arr, pets, crashed)


def _speeds(jt: JointTrajectory) -> np.ndarray:
    """Per (agent, step) speed from first differences; NaN where undefined."""
    pos = jt.data[:, :, :2]
    sp = np.full(jt.mask.shape, np.nan)
    both = jt.mask[:, 1:] & jt.mask[:, :-1]
    delta = np.linalg.norm(pos[:, 1:] - pos[:, :-1], axis=2) / jt.dt
    sp[:, 1:][both] = delta[both]
    return sp


def collect_samples(source: MetricSource, scene: SceneConfig) -> dict[str, list]:
    """Raw metric samples for one source: distances, speeds, yielding, PET."""
    jt = source.jt
    speeds = _speeds(jt)
    out: dict[str, list] = {
        "distance": [],
        "speed": [],
        "yield_distance": [],
        "yield_speed": [],
        "pet": [v for v in source.pet_windows if v is not None],
    }
    out["speed"] = speeds[np.isfinite(speeds)].tolist()

    for t in range(jt.n_steps):
        idx = np.flatnonzero(jt.mask[:, t])
        if idx.size >= 2:
            pos = jt.data[idx, t, :2]
            diff = np.linalg.norm(pos[:, None] - pos[None, :], axis=2)
            np.fill_diagonal(diff, np.inf)
            out["distance"].extend(diff.min(axis=1).tolist())

        if not scene.entry_zones or idx.size < 2:
            continue
        pos = jt.data[idx, t, :2]
        in_entry = np.zeros(idx.size, dtype=bool)
        for zone in scene.entry_zones:
            in_entry |= np.hypot(pos[:, 0] - zone.px, pos[:, 1] - zone.py) <= zone.radius
        for a_pos in np.flatnonzero(in_entry):
            i = int(idx[a_pos])
            sp = speeds[i, t]
            if not (np.isfinite(sp) and sp < YIELD_SPEED_MAX):
                continue
            best_d, best_speed = None, None
            for b_pos in np.flatnonzero(~in_entry):
                j = int(idx[b_pos])
                d = float(np.hypot(*(pos[a_pos] - pos[b_pos])))
                if d <= YIELD_CONFLICT_RANGE and (best_d is None or d < best_d):
                    other_speed = speeds[j, t]
                    if np.isfinite(other_speed):
                        best_d, best_speed = d, float(other_speed)
            if best_d is not None:
                out["yield_distance"].append(best_d)
                out["yield_speed"].append(best_speed)
    return out


def build_histograms(sources: list[MetricSource], scene: SceneConfig) -> dict[str, Histogram]:
    """Pooled fixed-edge histograms over a list of metric sources."""
    pooled: dict[str, list] = {name: [] for name in METRIC_EDGES}
    for src in sources:
        for name, vals in collect_samples(src, scene).items():
            pooled[name].extend(vals)
    return {name: histogram(pooled[name], METRIC_EDGES[name]) for name in METRIC_EDGES}


def crash_rate(sources: list[MetricSource]) -> float:
    if not sources:
        raise ValueError("crash rate needs at least one episode")
    return sum(1 for s in sources if s.crashed) / len(sources)


def realism_report(
    sources: list[MetricSource],
    reference: dict[str, Histogram] | None,
    scene: SceneConfig,
    risk_level: float | None = None,
    seeds: list[int] | None = None,
) -> dict:
    """Histogram report with crash rate and Wasserstein distances to a reference."""
    if not sources:
        raise ValueError("realism report needs at least one source")
    hists = build_histograms(sources, scene)
    metrics = {}
    for name, hist in hists.items():
        entry = {
            "bin_edges": hist.edges.tolist(),
            "counts": hist.counts.tolist(),
            "density": hist.density.tolist(),
            "n_samples": int(hist.n_samples),
        }
        if reference is not None:
            if name not in reference:
                raise ValueError(f"reference lacks metric {name!r}")
            entry["wasserstein_to_reference"] = wasserstein(hist, reference[name])
        metrics[name] = entry
    return {
        "version": 1,
        "episodes": len(sources),
        "crash_rate": crash_rate(sources),
        "risk_level": risk_level,
        "seeds": list(seeds) if seeds else [],
        "metrics": metrics,
    }


def histograms_from_report(report: dict) -> dict[str, Histogram]:
    """Rebuild Histogram objects from a report dictionary."""
    out = {}
    for name, entry in report["metrics"].items():
        out[name] = Histogram(
            np.asarray(entry["bin_edges"], dtype=float),
            np.asarray(entry["counts"], dtype=int),
            int(entry["n_samples"]),
        )
    return out
