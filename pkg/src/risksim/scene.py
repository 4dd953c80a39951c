"""Scene data model: vehicle states, trajectories, joint state tensors, scene configuration.

All positions are in meters, headings in radians, time steps in seconds.
Headings are stored internally as (cos, sin) pairs and written to files as
radians; the conversion is lossless to well below the file precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNIT_NORM_TOL = 1e-6

# Canonical trajectory file schema (one row per frame and vehicle).
TRAJECTORY_HEADER = "frame,track_id,x,y,heading,length,width"


class SchemaError(ValueError):
    """A file or in-memory structure violates its documented schema."""


def fmt9(x: float) -> str:
    """Format a float with 9 significant digits (canonical numeric output)."""
    return format(float(x), ".9g")


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(theta, math.tau)
    if wrapped <= -math.pi:
        wrapped += math.tau
    return wrapped


def heading_to_vec(theta: float) -> tuple[float, float]:
    """Convert a heading angle to its (cos, sin) unit vector."""
    if not math.isfinite(theta):
        raise ValueError(f"heading must be finite, got {theta!r}")
    return math.cos(theta), math.sin(theta)


def vec_to_heading(cos_h: float, sin_h: float) -> float:
    """Recover the heading angle in (-pi, pi] from its (cos, sin) vector."""
    return math.atan2(sin_h, cos_h)


@dataclass(frozen=True)
class VehicleState:
    """Planar vehicle state: position plus heading as a unit vector."""

    px: float
    py: float
    cos_h: float
    sin_h: float

    def __post_init__(self):
        if not (math.isfinite(self.px) and math.isfinite(self.py)):
            raise ValueError("position must be finite")
        norm = math.hypot(self.cos_h, self.sin_h)
        if not math.isfinite(norm) or norm < 1e-12:
            raise ValueError("heading vector must have nonzero finite norm")
        object.__setattr__(self, "cos_h", self.cos_h / norm)
        object.__setattr__(self, "sin_h", self.sin_h / norm)

    @classmethod
    def from_pose(cls, px: float, py: float, heading: float) -> "VehicleState":
        c, s = heading_to_vec(heading)
        return cls(px, py, c, s)

    @property
    def heading(self) -> float:
        return vec_to_heading(self.cos_h, self.sin_h)

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.cos_h, self.sin_h], dtype=float)


@dataclass(frozen=True)
class VehicleDims:
    """Bounding-box dimensions of a vehicle."""

    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("vehicle dimensions must be positive")


# One consistent box for every vehicle unless a data file says otherwise.
DEFAULT_DIMS = VehicleDims(3.6, 1.8)


@dataclass(frozen=True)
class Trajectory:
    """Single-vehicle state sequence at a fixed time step."""

    states: tuple[VehicleState, ...]
    dt: float

    def __post_init__(self):
        if len(self.states) == 0:
            raise ValueError("trajectory must be non-empty")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "states", tuple(self.states))

    def __len__(self) -> int:
        return len(self.states)

    def as_array(self) -> np.ndarray:
        return np.stack([s.as_array() for s in self.states])


@dataclass(frozen=True)
class RiskLevel:
    """Desired scene risk in [0, 1], or the unconditional marker.

    The unconditional marker (value is None) selects the model branch that
    ignores risk conditioning entirely; it is distinct from risk 0.
    """

    value: float | None

    def __post_init__(self):
        if self.value is not None:
            v = float(self.value)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"risk level must be in [0, 1], got {self.value!r}")
            object.__setattr__(self, "value", v)

    @classmethod
    def unconditional(cls) -> "RiskLevel":
        return cls(None)

    @property
    def is_unconditional(self) -> bool:
        return self.value is None


@dataclass
class JointTrajectory:
    """All-agent state tensor with a presence mask.

    data has shape (n_agents, n_steps, 4) storing [px, py, cos_h, sin_h];
    mask has shape (n_agents, n_steps). Masked-out entries are zero-filled
    and carry no meaning; per agent the mask must be contiguous in time.
    """

    data: np.ndarray
    mask: np.ndarray
    dt: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.data.ndim != 3 or self.data.shape[2] != 4:
            raise ValueError(f"data must have shape (N, T, 4), got {self.data.shape}")
        if self.mask.shape != self.data.shape[:2]:
            raise ValueError("mask shape must match data (N, T)")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def n_agents(self) -> int:
        return self.data.shape[0]

    @property
    def n_steps(self) -> int:
        return self.data.shape[1]

    def state(self, agent: int, step: int) -> VehicleState:
        if not self.mask[agent, step]:
            raise ValueError(f"agent {agent} absent at step {step}")
        px, py, c, s = self.data[agent, step]
        return VehicleState(px, py, c, s)

    def copy(self) -> "JointTrajectory":
        return JointTrajectory(self.data.copy(), self.mask.copy(), self.dt)

    @classmethod
    def empty(cls, n_agents: int, n_steps: int, dt: float) -> "JointTrajectory":
        return cls(
            np.zeros((n_agents, n_steps, 4)),
            np.zeros((n_agents, n_steps), dtype=bool),
            dt,
        )


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by validate_joint."""

    agent: int
    step: int | None
    rule: str


def validate_joint(jt: JointTrajectory) -> list[Violation]:
    """Check masked-in states and mask contiguity; return all violations."""
    out: list[Violation] = []
    finite = np.isfinite(jt.data).all(axis=2)
    norms = np.hypot(jt.data[:, :, 2], jt.data[:, :, 3])
    bad_finite = jt.mask & ~finite
    bad_norm = jt.mask & finite & (np.abs(norms - 1.0) > UNIT_NORM_TOL)
    for i, t in np.argwhere(bad_finite):
        out.append(Violation(int(i), int(t), "finite"))
    for i, t in np.argwhere(bad_norm):
        out.append(Violation(int(i), int(t), "unit-norm"))
    for i in range(jt.n_agents):
        present = np.flatnonzero(jt.mask[i])
        if present.size and present[-1] - present[0] + 1 != present.size:
            gaps = np.flatnonzero(~jt.mask[i, present[0] : present[-1] + 1])
            out.append(Violation(int(i), int(present[0] + gaps[0]), "contiguity"))
    return out


def slice_window(jt: JointTrajectory, t0: int, length: int) -> JointTrajectory:
    """Copy out the window [t0, t0 + length) of a joint trajectory."""
    if length < 1:
        raise ValueError("window length must be >= 1")
    if t0 < 0 or t0 + length > jt.n_steps:
        raise ValueError(
            f"window [{t0}, {t0 + length}) out of range for {jt.n_steps} steps"
        )
    return JointTrajectory(
        jt.data[:, t0 : t0 + length].copy(),
        jt.mask[:, t0 : t0 + length].copy(),
        jt.dt,
    )


@dataclass(frozen=True)
class EntryZone:
    """Spawn pose of an entry lane plus the circular region used to detect
    vehicles holding at that entrance."""

    px: float
    py: float
    heading: float
    radius: float = 6.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("entry zone radius must be positive")

    def contains(self, x: float, y: float) -> bool:
        return math.hypot(x - self.px, y - self.py) <= self.radius


@dataclass
class SceneConfig:
    """Static description of the simulated scene."""

    dt: float = 0.4
    horizon_steps: int = 8
    max_agents: int = 12
    entry_zones: list[EntryZone] = field(default_factory=list)
    exit_zones: list[np.ndarray] = field(default_factory=list)
    default_dims: VehicleDims = DEFAULT_DIMS
    grid_cell: float = 0.5
    bounds: tuple[float, float, float, float] = (-30.0, -30.0, 30.0, 30.0)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon_steps < 2:
            raise ValueError("horizon_steps must be >= 2")
        if self.max_agents < 1:
            raise ValueError("max_agents must be >= 1")
        if not self.grid_cell > 0:
            raise ValueError("grid_cell must be positive")
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("bounds must span a positive area")
        self.exit_zones = [np.asarray(z, dtype=float) for z in self.exit_zones]
        for z in self.exit_zones:
            if z.ndim != 2 or z.shape[1] != 2 or z.shape[0] < 3:
                raise ValueError("exit zones must be (V, 2) polygons with V >= 3")


@dataclass
class Recording:
    """A trajectory file in memory: joint trajectory plus per-track metadata."""

    jt: JointTrajectory
    dims: np.ndarray  # (N, 2) length, width
    track_ids: list[int]
    frame0: int = 0

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=float)
        if self.dims.shape != (self.jt.n_agents, 2):
            raise SchemaError("dims must have shape (n_agents, 2)")
        if len(self.track_ids) != self.jt.n_agents:
            raise SchemaError("track_ids must match the number of agents")

    def vehicle_trajectories(self) -> list[Trajectory]:
        """Per-vehicle contiguous state sequences."""
        out = []
        for i in range(self.jt.n_agents):
            present = np.flatnonzero(self.jt.mask[i])
            if present.size == 0:
                continue
            states = tuple(self.jt.state(i, int(t)) for t in present)
            out.append(Trajectory(states, self.jt.dt))
        return out


def read_trajectory_csv(path, dt: float) -> Recording:
    """Read a canonical trajectory table (frame,track_id,x,y,heading,length,width)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != TRAJECTORY_HEADER:
            raise SchemaError(f"bad trajectory header in {path}: {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise SchemaError(f"{path}:{lineno}: expected 7 columns")
            try:
                frame = int(parts[0])
                track = int(parts[1])
                vals = [float(v) for v in parts[2:]]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            if not all(math.isfinite(v) for v in vals):
                raise SchemaError(f"{path}:{lineno}: non-finite value")
            rows.append((frame, track, *vals))
    if not rows:
        raise SchemaError(f"{path}: empty trajectory file")

    frames = sorted({r[0] for r in rows})
    frame0, frame_last = frames[0], frames[-1]
    n_steps = frame_last - frame0 + 1
    track_ids = sorted({r[1] for r in rows})
    index = {tid: i for i, tid in enumerate(track_ids)}

    jt = JointTrajectory.empty(len(track_ids), n_steps, dt)
    dims = np.zeros((len(track_ids), 2))
    seen_dims: dict[int, tuple[float, float]] = {}
    for frame, track, x, y, heading, length, width in rows:
        i = index[track]
        t = frame - frame0
        if jt.mask[i, t]:
            raise SchemaError(f"{path}: duplicate row for frame {frame}, track {track}")
        c, s = heading_to_vec(heading)
        jt.data[i, t] = (x, y, c, s)
        jt.mask[i, t] = True
        if track in seen_dims and seen_dims[track] != (length, width):
            raise SchemaError(f"{path}: inconsistent dims for track {track}")
        seen_dims[track] = (length, width)
        dims[i] = (length, width)
    if any(d <= 0 for pair in seen_dims.values() for d in pair):
        raise SchemaError(f"{path}: non-positive vehicle dims")

    rec = Recording(jt, dims, track_ids, frame0)
    bad = [v for v in validate_joint(jt) if v.rule == "contiguity"]
    if bad:
        raise SchemaError(f"{path}: track presence has gaps (agent {bad[0].agent})")
    return rec


def write_trajectory_csv(rec: Recording, path) -> None:
    """Write a recording in canonical form: rows sorted by (frame, track_id)."""
    lines = [TRAJECTORY_HEADER]
    agent_order = sorted(range(rec.jt.n_agents), key=lambda i: rec.track_ids[i])
    for t in range(rec.jt.n_steps):
        for i in agent_order:
            if not rec.jt.mask[i, t]:
                continue
            x, y, c, s = rec.jt.data[i, t]
            lines.append(
                ",".join(
                    (
                        str(rec.frame0 + t),
                        str(rec.track_ids[i]),
                        fmt9(x),
                        fmt9(y),
                        fmt9(vec_to_heading(c, s)),
                        fmt9(rec.dims[i, 0]),
                        fmt9(rec.dims[i, 1]),
                    )
                )
            )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
