"""Scripted roundabout world: the bundled data source for training and
evaluation.

Kinematic agents enter along blended approach paths, yield at the ring
entrance under a gap-acceptance rule, circulate with bounded-deceleration
car following, and leave via exit spokes. The gap-acceptance threshold is
the risk knob: small thresholds make entering vehicles cut into tight gaps
that followers cannot fully absorb, producing low-PET windows and contact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import (
    DEFAULT_DIMS,
    EntryZone,
    JointTrajectory,
    Recording,
    SceneConfig,
    heading_to_vec,
)

# Geometry offsets relative to the ring radius.
SPAWN_OFFSET = 9.0
DESPAWN_OFFSET = 7.0
ENTRY_ZONE_RADIUS = 6.5
BLEND_PULL = 1.5  # Bezier control-point distance along the ring tangent
EXIT_BAND = (3.5, 9.0)  # radial extent of exit polygons beyond the ring
EXIT_HALF_WIDTH = 2.5

# Driving model constants.
FOLLOW_SPACE = 4.2  # m, center-to-center spacing floor behind a leader
FOLLOW_HEADWAY = 0.9  # s, speed-dependent part of the desired spacing
ACCEL_MAX = 3.0  # m/s^2, bounded acceleration and braking
BRAKE_COMFORT = 1.8  # m/s^2, derated envelope so discrete steps never overshoot
GAP_CHECK_DIST = 5.0  # m before the merge point where gaps are evaluated
STOP_MARGIN = 4.2  # m, held back so waiting boxes share no cells with ring traffic
MERGE_OCCUPY_ARC = 2.5  # m of ring arc around the merge point treated as occupied
MERGE_DOWNSTREAM_CLEAR = 6.5  # m of free arc needed beyond the merge point
SPAWN_CLEAR = 7.0  # m, required clearance at the spawn point

# The gap threshold doubles as a driver-aggressiveness knob: small thresholds
# shrink headways, downstream slotting room, and the entrant's own estimate
# of how long it needs to clear the merge, and raise cruising speeds.
AGGRESSION_REF_GAP = 2.5  # s of gap threshold mapping to fully calm driving
AGGRESSION_FLOOR = 0.12
SPEED_AGGRESSION = 0.30  # fractional speed increase at full aggression


@dataclass(frozen=True)
class SyntheticWorldParams:
    """Knobs of the scripted roundabout."""

    ring_radius: float = 16.0
    entry_count: int = 4
    speed: float = 7.0
    gap_threshold: float = 2.0
    arrival_rate: float = 0.12  # vehicles/s per entry spoke
    speed_noise: float = 0.08  # per-vehicle preference spread and m/s step jitter
    lateral_noise: float = 0.05  # m
    heading_noise: float = 0.01  # rad
    duration: float = 300.0
    dt: float = 0.4
    seed: int = 0
    max_vehicles: int = 12

    def __post_init__(self):
        if not (self.ring_radius > 0 and self.speed > 0):
            raise ValueError("ring_radius and speed must be positive")
        if self.gap_threshold < 0:
            raise ValueError("gap_threshold must be >= 0")
        if self.entry_count < 1:
            raise ValueError("entry_count must be >= 1")
        if not (self.duration > 0 and self.dt > 0):
            raise ValueError("duration and dt must be positive")
        if self.arrival_rate < 0:
            raise ValueError("arrival_rate must be >= 0")

    @property
    def entry_angles(self) -> list[float]:
        return [2 * math.pi * j / self.entry_count for j in range(self.entry_count)]

    @property
    def exit_angles(self) -> list[float]:
        half = math.pi / self.entry_count
        return [a + half for a in self.entry_angles]


def _bezier_lut(p0, p1, p2, n=120):
    """Quadratic Bezier sampled as (points, cumulative length, headings)."""
    u = np.linspace(0.0, 1.0, n)[:, None]
    pts = (1 - u) ** 2 * p0 + 2 * (1 - u) * u * p1 + u**2 * p2
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    headings = np.arctan2(seg[:, 1], seg[:, 0])
    headings = np.concatenate([headings, headings[-1:]])
    return pts, cum, headings


class _Path:
    def __init__(self, pts, cum, headings):
        self.pts = pts
        self.cum = cum
        self.headings = headings
        self.length = float(cum[-1])

    def at(self, s: float):
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(i, len(self.cum) - 2)
        span = self.cum[i + 1] - self.cum[i]
        frac = 0.0 if span == 0 else (s - self.cum[i]) / span
        p = self.pts[i] * (1 - frac) + self.pts[i + 1] * frac
        return float(p[0]), float(p[1]), float(self.headings[i])


def _entry_path(params: SyntheticWorldParams, angle: float) -> _Path:
    R = params.ring_radius
    merge = np.array([R * math.cos(angle), R * math.sin(angle)])
    tangent = np.array([-math.sin(angle), math.cos(angle)])
    spawn = np.array(
        [(R + SPAWN_OFFSET) * math.cos(angle), (R + SPAWN_OFFSET) * math.sin(angle)]
    )
    control = merge - BLEND_PULL * tangent
    return _Path(*_bezier_lut(spawn, control, merge))


def _exit_path(params: SyntheticWorldParams, angle: float) -> _Path:
    R = params.ring_radius
    start = np.array([R * math.cos(angle), R * math.sin(angle)])
    tangent = np.array([-math.sin(angle), math.cos(angle)])
    end = np.array(
        [(R + DESPAWN_OFFSET) * math.cos(angle), (R + DESPAWN_OFFSET) * math.sin(angle)]
    )
    control = start + BLEND_PULL * tangent
    return _Path(*_bezier_lut(start, control, end))


def roundabout_scene(
    params: SyntheticWorldParams,
    horizon_steps: int = 8,
    grid_cell: float = 0.5,
) -> SceneConfig:
    """Scene configuration matching the synthetic world geometry."""
    entries = []
    for angle in params.entry_angles:
        path = _entry_path(params, angle)
        x, y, heading = path.at(0.0)
        entries.append(EntryZone(x, y, heading, radius=ENTRY_ZONE_RADIUS))
    exits = []
    R = params.ring_radius
    for angle in params.exit_angles:
        u = np.array([math.cos(angle), math.sin(angle)])
        w = np.array([-math.sin(angle), math.cos(angle)])
        lo, hi = R + EXIT_BAND[0], R + EXIT_BAND[1]
        exits.append(
            np.array(
                [
                    lo * u - EXIT_HALF_WIDTH * w,
                    hi * u - EXIT_HALF_WIDTH * w,
                    hi * u + EXIT_HALF_WIDTH * w,
                    lo * u + EXIT_HALF_WIDTH * w,
                ]
            )
        )
    extent = R + max(SPAWN_OFFSET, DESPAWN_OFFSET) + 3.0
    return SceneConfig(
        dt=params.dt,
        horizon_steps=horizon_steps,
        max_agents=params.max_vehicles,
        entry_zones=entries,
        exit_zones=exits,
        default_dims=DEFAULT_DIMS,
        grid_cell=grid_cell,
        bounds=(-extent, -extent, extent, extent),
    )


class _Vehicle:
    __slots__ = (
        "vid", "spoke", "phase", "s", "theta", "speed", "pref",
        "exit_angle", "exit_idx", "committed", "states",
    )

    def __init__(self, vid, spoke, pref, exit_quads, params):
        self.vid = vid
        self.spoke = spoke
        self.phase = "approach"
        self.s = 0.0
        self.theta = params.entry_angles[spoke]
        self.speed = pref
        self.pref = pref
        half = math.pi / params.entry_count
        arc = half + (exit_quads - 1) * 2 * half  # radians to travel on the ring
        self.exit_angle = params.entry_angles[spoke] + arc
        self.exit_idx = (spoke + exit_quads - 1) % params.entry_count
        self.committed = False  # merge decision, latched once taken
        self.states = []


def _ccw_gap(from_angle: float, to_angle: float) -> float:
    """Counterclockwise angular distance in (0, 2*pi]."""
    gap = (to_angle - from_angle) % (2 * math.pi)
    return gap if gap > 0 else 2 * math.pi


def _calmness(params: SyntheticWorldParams) -> float:
    """Driver calmness in (0, 1]: 1 is defensive, small values tailgate."""
    return float(np.clip(params.gap_threshold / AGGRESSION_REF_GAP, AGGRESSION_FLOOR, 1.0))


def _follow_cap(
    own_speed: float, leader_speed: float, gap: float, dt: float, calm: float
) -> float:
    """Fastest speed from which the follower can still match the leader
    without closing below its desired spacing."""
    want = FOLLOW_SPACE + calm * FOLLOW_HEADWAY * own_speed
    free = max(0.0, gap - want - own_speed * dt)
    return leader_speed + math.sqrt(2.0 * BRAKE_COMFORT * free)


def generate_recording(params: SyntheticWorldParams) -> Recording:
    """Run the scripted world and return its trajectory recording."""
    rng = np.random.default_rng(params.seed)
    n_steps = int(round(params.duration / params.dt))
    entry_paths = [_entry_path(params, a) for a in params.entry_angles]
    exit_paths = [_exit_path(params, a) for a in params.exit_angles]
    R = params.ring_radius
    dt = params.dt

    vehicles: list[_Vehicle] = []
    active: list[_Vehicle] = []
    next_id = 1
    calm = _calmness(params)

    for step in range(n_steps):
        # --- speed targets -------------------------------------------------
        ring = [v for v in active if v.phase == "ring"]
        targets = {}
        for v in active:
            if v.phase == "approach":
                path = entry_paths[v.spoke]
                remaining = path.length - v.s
                if not v.committed and remaining <= GAP_CHECK_DIST:
                    v.committed = _gap_ok(v, remaining, ring, params)
                if v.committed:
                    target = v.pref
                else:
                    # approach under a comfortable-stop envelope so the yield
                    # line can always be held despite the discrete time step
                    stop_dist = max(0.0, remaining - STOP_MARGIN - v.speed * dt)
                    target = min(v.pref, math.sqrt(2.0 * BRAKE_COMFORT * stop_dist))
                # stay behind a queued leader on the same spoke
                for other in active:
                    if (
                        other is not v
                        and other.phase == "approach"
                        and other.spoke == v.spoke
                        and other.s > v.s
                    ):
                        cap = _follow_cap(v.speed, other.speed, other.s - v.s, dt, calm)
                        target = min(target, cap)
                targets[v.vid] = target
            elif v.phase == "ring":
                leader = None
                gap_arc = None
                for other in ring:
                    if other is v:
                        continue
                    gap = _ccw_gap(v.theta, other.theta) * R
                    if gap_arc is None or gap < gap_arc:
                        gap_arc, leader = gap, other
                target = v.pref
                if leader is not None:
                    target = min(target, _follow_cap(v.speed, leader.speed, gap_arc, dt, calm))
                targets[v.vid] = target
            else:
                targets[v.vid] = v.pref

        # --- advance --------------------------------------------------------
        done = []
        for v in active:
            jitter = params.speed_noise * rng.standard_normal()
            accel = np.clip(targets[v.vid] - v.speed, -ACCEL_MAX * dt, ACCEL_MAX * dt)
            v.speed = float(np.clip(v.speed + accel + jitter * dt, 0.0, 2.0 * params.speed))
            dist = v.speed * dt
            if v.phase == "approach":
                path = entry_paths[v.spoke]
                v.s += dist
                if v.s >= path.length:
                    overshoot = v.s - path.length
                    v.phase = "ring"
                    v.theta = params.entry_angles[v.spoke] + overshoot / R
            elif v.phase == "ring":
                v.theta += dist / R
                if v.theta >= v.exit_angle:
                    overshoot = (v.theta - v.exit_angle) * R
                    v.phase = "exit"
                    v.s = overshoot
            else:
                v.s += dist

            # pose with noise
            if v.phase == "approach":
                x, y, heading = entry_paths[v.spoke].at(v.s)
            elif v.phase == "ring":
                x = R * math.cos(v.theta)
                y = R * math.sin(v.theta)
                heading = v.theta + math.pi / 2
            else:
                path = exit_paths[v.exit_idx]
                if v.s >= path.length:
                    done.append(v)
                    continue
                x, y, heading = path.at(v.s)
            lat = params.lateral_noise * rng.standard_normal()
            x += -math.sin(heading) * lat
            y += math.cos(heading) * lat
            heading += params.heading_noise * rng.standard_normal()
            v.states.append((step, x, y, heading))
        for v in done:
            active.remove(v)

        # --- arrivals -------------------------------------------------------
        spawned_now: list[tuple[float, float]] = []
        for spoke in range(params.entry_count):
            count = rng.poisson(params.arrival_rate * dt)
            for _ in range(count):
                if len(active) >= params.max_vehicles:
                    continue
                sx, sy, _ = entry_paths[spoke].at(0.0)
                blocked = any(
                    math.hypot(ox - sx, oy - sy) < SPAWN_CLEAR for ox, oy in spawned_now
                )
                for other in active:
                    if blocked:
                        break
                    if other.states and other.states[-1][0] == step:
                        _, ox, oy, _ = other.states[-1]
                        if math.hypot(ox - sx, oy - sy) < SPAWN_CLEAR:
                            blocked = True
                if blocked:
                    continue
                pref = params.speed * (1.0 + SPEED_AGGRESSION * (1.0 - calm)) * float(
                    np.clip(1.0 + params.speed_noise * rng.standard_normal(), 0.6, 1.4)
                )
                quads = int(rng.integers(1, max(2, params.entry_count)))
                veh = _Vehicle(next_id, spoke, pref, quads, params)
                # spawn no faster than the stop envelope or queue allows
                spawn_cap = math.sqrt(
                    2.0 * BRAKE_COMFORT
                    * max(0.0, entry_paths[spoke].length - STOP_MARGIN)
                )
                for other in active:
                    if other.phase == "approach" and other.spoke == spoke:
                        spawn_cap = min(
                            spawn_cap, _follow_cap(0.0, other.speed, other.s, dt, calm)
                        )
                veh.speed = min(pref, spawn_cap)
                next_id += 1
                vehicles.append(veh)
                active.append(veh)
                spawned_now.append((sx, sy))

    return _to_recording(vehicles, n_steps, params)


def _clearing_time(v0: float, vmax: float, dist: float) -> float:
    """Time to cover dist starting at v0 under full acceleration, capped at vmax."""
    t_acc = max(0.0, (vmax - v0) / ACCEL_MAX)
    d_acc = v0 * t_acc + 0.5 * ACCEL_MAX * t_acc * t_acc
    if d_acc >= dist:
        return (-v0 + math.sqrt(v0 * v0 + 2.0 * ACCEL_MAX * dist)) / ACCEL_MAX
    return t_acc + (dist - d_acc) / vmax


def _gap_ok(
    v: _Vehicle, remaining: float, ring: list[_Vehicle], params: SyntheticWorldParams
) -> bool:
    """Accept the merge when every circulating vehicle reaches the merge point
    at least gap_threshold seconds after this vehicle believes it will clear.

    Aggressive drivers (small thresholds) underestimate their clearing time
    and accept slimmer downstream slots, which is what creates cut-ins."""
    merge_angle = params.entry_angles[v.spoke] % (2 * math.pi)
    R = params.ring_radius
    calm = _calmness(params)
    t_clear = calm * _clearing_time(v.speed, v.pref, remaining + MERGE_DOWNSTREAM_CLEAR)
    downstream_need = max(MERGE_OCCUPY_ARC, calm * MERGE_DOWNSTREAM_CLEAR)
    for other in ring:
        upstream_arc = _ccw_gap(other.theta % (2 * math.pi), merge_angle) * R
        downstream_arc = 2 * math.pi * R - upstream_arc
        if upstream_arc <= MERGE_OCCUPY_ARC or downstream_arc <= MERGE_OCCUPY_ARC:
            return False  # someone is straddling the merge point
        if downstream_arc <= downstream_need:
            return False  # no room to slot in behind the vehicle just ahead
        time_to_merge = upstream_arc / max(other.speed, 0.5)
        if time_to_merge < t_clear + params.gap_threshold:
            return False
    return True


def _to_recording(vehicles, n_steps, params) -> Recording:
    tracked = [v for v in vehicles if v.states]
    n = len(tracked)
    jt = JointTrajectory.empty(n, n_steps, params.dt)
    for i, v in enumerate(tracked):
        for step, x, y, heading in v.states:
            c, s = heading_to_vec(heading)
            jt.data[i, step] = (x, y, c, s)
            jt.mask[i, step] = True
    dims = np.tile([DEFAULT_DIMS.length, DEFAULT_DIMS.width], (n, 1))
    return Recording(jt, dims, [v.vid for v in tracked])
