"""Motion token vocabulary: greedy disk-coverage construction, nearest-token
lookup under the corner-distance metric, and the auto-regressive dynamics
check that snaps raw trajectories onto vocabulary transitions.

A motion token is a one-step state transition expressed in the ego frame of
the departing state: longitudinal and lateral displacement plus heading
change. Because tokens are pose-invariant, transitions harvested anywhere in
a scene apply everywhere.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import pose_corners
from .scene import (
    DEFAULT_DIMS,
    JointTrajectory,
    Trajectory,
    VehicleDims,
    VehicleState,
    fmt9,
)

# Sanity bound on one-step displacement, expressed as a speed.
MAX_TOKEN_SPEED = 30.0  # m/s


@dataclass(frozen=True)
class MotionToken:
    """Ego-frame state transition over one time step."""

    dx: float
    dy: float
    dtheta: float

    def __post_init__(self):
        if not all(map(math.isfinite, (self.dx, self.dy, self.dtheta))):
            raise ValueError("token components must be finite")
        wrapped = math.remainder(self.dtheta, math.tau)
        if wrapped <= -math.pi:
            wrapped += math.tau
        object.__setattr__(self, "dtheta", wrapped)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dtheta)


@dataclass(frozen=True)
class KDisksParams:
    """Greedy disk-coverage settings for vocabulary construction."""

    vocab_size: int = 1024
    candidates_per_round: int = 32
    coverage_eps: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1 or self.candidates_per_round < 1:
            raise ValueError("vocab_size and candidates_per_round must be positive")
        if not self.coverage_eps > 0:
            raise ValueError("coverage_eps must be positive")


@dataclass
class Vocabulary:
    """Immutable token set plus the metadata needed to reproduce lookups."""

    tokens: tuple[MotionToken, ...]
    dt: float
    box_dims: VehicleDims = DEFAULT_DIMS
    coverage_eps: float = 0.05
    source_hash: str = ""
    _corners: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.tokens = tuple(self.tokens)
        if not self.tokens:
            raise ValueError("vocabulary must be non-empty")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        arr = self.token_array()
        bound = MAX_TOKEN_SPEED * self.dt
        if (np.abs(arr[:, :2]) > bound + 1e-9).any():
            raise ValueError(f"token displacement exceeds {bound} m sanity bound")
        self._corners = pose_corners(arr, self.box_dims)
        # no two tokens may coincide under the corner metric
        flat = self._corners.reshape(len(self.tokens), -1)
        diff = flat[:, None, :] - flat[None, :, :]
        dist = np.linalg.norm(diff.reshape(len(self.tokens), len(self.tokens), 4, 2), axis=3).mean(axis=2)
        np.fill_diagonal(dist, np.inf)
        if (dist <= 0.0).any():
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def token_array(self) -> np.ndarray:
        return np.array([t.as_tuple() for t in self.tokens], dtype=float)


def transition_between(a: VehicleState, b: VehicleState) -> tuple[float, float, float]:
    """Ego-frame (dx, dy, dtheta) mapping state a onto state b."""
    wx = b.px - a.px
    wy = b.py - a.py
    dx = a.cos_h * wx + a.sin_h * wy
    dy = -a.sin_h * wx + a.cos_h * wy
    cos_d = a.cos_h * b.cos_h + a.sin_h * b.sin_h
    sin_d = a.cos_h * b.sin_h - a.sin_h * b.cos_h
    return dx, dy, math.atan2(sin_d, cos_d)


def extract_transitions(trajectories: list[Trajectory]) -> list[MotionToken]:
    """All consecutive-state transitions from a set of same-dt trajectories."""
    if not trajectories:
        raise ValueError("no trajectories given")
    dt = trajectories[0].dt
    out: list[MotionToken] = []
    for traj in trajectories:
        if traj.dt != dt:
            raise ValueError(f"dt mismatch: {traj.dt} != {dt}")
        if len(traj) < 2:
            raise ValueError("each trajectory needs at least 2 states")
        for a, b in zip(traj.states, traj.states[1:]):
            out.append(MotionToken(*transition_between(a, b)))
    return out


def build_vocabulary(
    transitions: list[MotionToken],
    params: KDisksParams,
    dt: float,
    box_dims: VehicleDims = DEFAULT_DIMS,
) -> Vocabulary:
    """Greedy disk coverage over observed transitions.

    Each round samples candidate transitions from the uncovered pool, keeps
    the one whose coverage disk (corner distance <= coverage_eps) captures
    the most uncovered transitions, and repeats until the pool is exhausted
    or the vocabulary is full. Deterministic for a fixed seed.
    """
    if not transitions:
        raise ValueError("no transitions to cluster")
    pool = np.array([t.as_tuple() for t in transitions], dtype=float)
    corners = pose_corners(pool, box_dims).reshape(len(pool), 8)
    rng = np.random.default_rng(params.seed)
    covered = np.zeros(len(pool), dtype=bool)
    chosen: list[int] = []

    while len(chosen) < params.vocab_size:
        uncovered = np.flatnonzero(~covered)
        if uncovered.size == 0:
            break
        n_cand = min(params.candidates_per_round, uncovered.size)
        cand = rng.choice(uncovered, size=n_cand, replace=False)
        # mean corner distance from each candidate to every uncovered transition
        diff = corners[cand][:, None, :] - corners[uncovered][None, :, :]
        dist = np.linalg.norm(diff.reshape(n_cand, uncovered.size, 4, 2), axis=3).mean(axis=2)
        in_disk = dist <= params.coverage_eps
        best = int(np.argmax(in_disk.sum(axis=1)))
        chosen.append(int(cand[best]))
        covered[uncovered[in_disk[best]]] = True

    tokens = tuple(MotionToken(*pool[i]) for i in chosen)
    digest = hashlib.sha256(np.ascontiguousarray(pool).tobytes()).hexdigest()[:16]
    return Vocabulary(tokens, dt, box_dims, params.coverage_eps, digest)


def coverage_gap(vocab: Vocabulary, transitions: list[MotionToken]) -> float:
    """Largest distance from any transition to its nearest vocabulary token."""
    poses = np.array([t.as_tuple() for t in transitions], dtype=float)
    corners = pose_corners(poses, vocab.box_dims)
    vocab_flat = vocab._corners.reshape(len(vocab), 8)
    worst = 0.0
    for lo in range(0, len(poses), 256):
        chunk = corners[lo : lo + 256].reshape(-1, 8)
        diff = chunk[:, None, :] - vocab_flat[None, :, :]
        d = np.linalg.norm(diff.reshape(len(chunk), len(vocab), 4, 2), axis=3).mean(axis=2)
        worst = max(worst, float(d.min(axis=1).max()))
    return worst


def nearest_token(proposed: MotionToken, vocab: Vocabulary) -> tuple[MotionToken, float]:
    """Exhaustive nearest-token search; ties break to the lowest token index."""
    c = pose_corners(np.array([proposed.as_tuple()]), vocab.box_dims)[0]
    d = np.linalg.norm(vocab._corners - c[None], axis=2).mean(axis=1)
    idx = int(np.argmin(d))
    return vocab.tokens[idx], float(d[idx])


def apply_token(state: VehicleState, token: MotionToken) -> VehicleState:
    """Advance a state by an ego-frame transition."""
    wx = state.cos_h * token.dx - state.sin_h * token.dy
    wy = state.sin_h * token.dx + state.cos_h * token.dy
    cos_d = math.cos(token.dtheta)
    sin_d = math.sin(token.dtheta)
    return VehicleState(
        state.px + wx,
        state.py + wy,
        state.cos_h * cos_d - state.sin_h * sin_d,
        state.sin_h * cos_d + state.cos_h * sin_d,
    )


def dynamics_check(raw: JointTrajectory, vocab: Vocabulary) -> JointTrajectory:
    """Snap every transition of a raw trajectory onto the vocabulary.

    Per agent, the first present state is kept as-is; each later state is
    re-proposed from the already-corrected previous state toward the raw
    target, snapped to the nearest token, and re-applied. Masked-out entries
    pass through untouched. Applying the check twice is a no-op.
    """
    if raw.n_steps < 2:
        raise ValueError("dynamics check needs at least 2 steps")
    if raw.dt != vocab.dt:
        raise ValueError(f"dt mismatch: trajectory {raw.dt}, vocabulary {vocab.dt}")
    out = raw.copy()
    for i in range(raw.n_agents):
        present = np.flatnonzero(raw.mask[i])
        if present.size < 2:
            continue
        state = _state_from_row(out.data[i, present[0]])
        for t_prev, t_next in zip(present, present[1:]):
            target = _state_from_row(raw.data[i, t_next])
            proposed = MotionToken(*transition_between(state, target))
            token, _ = nearest_token(proposed, vocab)
            state = apply_token(state, token)
            out.data[i, t_next] = (state.px, state.py, state.cos_h, state.sin_h)
    return out


def _state_from_row(row: np.ndarray) -> VehicleState:
    x, y, c, s = row
    n = math.hypot(c, s)
    if n < 1e-12:
        c, s = 1.0, 0.0
    return VehicleState(float(x), float(y), float(c), float(s))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_vocabulary(vocab: Vocabulary, path) -> None:
    doc = {
        "version": 1,
        "dt": float(fmt9(vocab.dt)),
        "box_length": float(fmt9(vocab.box_dims.length)),
        "box_width": float(fmt9(vocab.box_dims.width)),
        "coverage_eps": float(fmt9(vocab.coverage_eps)),
        "source_hash": vocab.source_hash,
        "tokens": [
            [float(fmt9(t.dx)), float(fmt9(t.dy)), float(fmt9(t.dtheta))]
            for t in vocab.tokens
        ],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_vocabulary(path) -> Vocabulary:
    from .scene import SchemaError

    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        tokens = tuple(MotionToken(*triple) for triple in doc["tokens"])
        return Vocabulary(
            tokens,
            float(doc["dt"]),
            VehicleDims(float(doc["box_length"]), float(doc["box_width"])),
            float(doc["coverage_eps"]),
            str(doc.get("source_hash", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: invalid vocabulary file ({exc})") from exc
