"""Closed-loop episode engine: warmup replay, per-step joint diffusion
sampling with dynamics checks, Poisson arrivals with spawn rejection, exit
removal, crash labeling, and multi-episode experiment aggregation.

Each simulation step samples a joint future window conditioned on the
desired risk, snaps it onto the motion vocabulary, and executes only the
window's second state. Arrivals enter at the scene's entry zones and
vehicles reaching an exit polygon are removed.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoisePredictor, NoiseSchedule, SamplerConfig, sample
from .geometry import (
    corners_from_pose,
    corners_overlap,
    grid_from_bounds,
    point_in_convex_polygon,
)
from .safety import MetricSource, build_histograms, detect_collisions, window_pet_values
from .scene import (
    JointTrajectory,
    Recording,
    RiskLevel,
    SceneConfig,
    read_trajectory_csv,
    write_trajectory_csv,
)
from .vocab import Vocabulary, dynamics_check

VOLUME_MODES = ("consistent", "risk-scaled")
RISK_SCALED_RANGE = (0.3, 1.0)


@dataclass(frozen=True)
class EpisodeConfig:
    """One closed-loop episode: timing, risk condition, and arrival process."""

    duration: float = 30.0
    init_clip: float = 2.0
    risk: RiskLevel = RiskLevel(0.3)
    arrival_rates: tuple[float, ...] = ()
    volume_mode: str = "consistent"
    seed: int = 0

    def __post_init__(self):
        if not (self.duration > self.init_clip >= 0):
            raise ValueError("need duration > init_clip >= 0")
        if any(r < 0 for r in self.arrival_rates):
            raise ValueError("arrival rates must be >= 0")
        if self.volume_mode not in VOLUME_MODES:
            raise ValueError(f"unknown volume mode {self.volume_mode!r}")
        if self.risk.is_unconditional:
            raise ValueError("episodes need a concrete risk level")
        object.__setattr__(self, "arrival_rates", tuple(self.arrival_rates))


def volume_multiplier(risk_value: float, mode: str) -> float:
    """Arrival-rate scaling: 1 for consistent volume, linear from 0.5x at the
    low end of the risk range to 1.5x at the high end otherwise."""
    if mode not in VOLUME_MODES:
        raise ValueError(f"unknown volume mode {mode!r}")
    if mode == "consistent":
        return 1.0
    lo, hi = RISK_SCALED_RANGE
    if not lo <= risk_value <= hi:
        raise ValueError(f"risk-scaled volume needs risk in [{lo}, {hi}]")
    return 0.5 + (risk_value - lo) / (hi - lo)


def spawn_arrivals(rng: np.random.Generator, rates, dt: float) -> np.ndarray:
    """Per-zone Poisson arrival counts for one step."""
    rates = np.asarray(rates, dtype=float)
    if (rates < 0).any():
        raise ValueError("arrival rates must be >= 0")
    return rng.poisson(rates * dt)


@dataclass
class EpisodeLog:
    """Full record of one closed-loop episode on per-track axes."""

    jt: JointTrajectory
    dims: np.ndarray
    track_ids: list[int]
    arrivals: list[tuple[int, int]]  # (step, track index)
    exits: list[tuple[int, int]]
    collisions: list[tuple[int, int, int]]  # (step, i, j)
    dropped_arrivals: int
    pet_windows: list
    risk: float
    seed: int
    config: dict

    @property
    def crashed(self) -> bool:
        return bool(self.collisions)

    def as_metric_source(self) -> MetricSource:
        return MetricSource(self.jt, self.dims, self.pet_windows, self.crashed)

    def save(self, directory, stem: str) -> None:
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_trajectory_csv(
            Recording(self.jt, self.dims, self.track_ids), directory / f"{stem}.csv"
        )
        sidecar = {
            "version": 1,
            "seed": self.seed,
            "risk": self.risk,
            "config": self.config,
            "track_ids": self.track_ids,
            "arrivals": [list(a) for a in self.arrivals],
            "exits": [list(e) for e in self.exits],
            "collisions": [list(c) for c in self.collisions],
            "dropped_arrivals": self.dropped_arrivals,
            "pet_windows": self.pet_windows,
            "crashed": self.crashed,
            "n_steps": self.jt.n_steps,
        }
        with open(directory / f"{stem}.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(sidecar, fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, directory, stem: str, dt: float) -> "EpisodeLog":
        from pathlib import Path

        directory = Path(directory)
        with open(directory / f"{stem}.json", "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        rec = read_trajectory_csv(directory / f"{stem}.csv", dt)
        order = [rec.track_ids.index(t) for t in doc["track_ids"]]
        jt = JointTrajectory(rec.jt.data[order], rec.jt.mask[order], dt)
        return cls(
            jt=jt,
            dims=rec.dims[order],
            track_ids=doc["track_ids"],
            arrivals=[tuple(a) for a in doc["arrivals"]],
            exits=[tuple(e) for e in doc["exits"]],
            collisions=[tuple(c) for c in doc["collisions"]],
            dropped_arrivals=doc["dropped_arrivals"],
            pet_windows=doc["pet_windows"],
            risk=doc["risk"],
            seed=doc["seed"],
            config=doc["config"],
        )


class _Track:
    __slots__ = ("dims", "first_step", "states")

    def __init__(self, dims, first_step):
        self.dims = dims
        self.first_step = int(first_step)
        self.states: list[np.ndarray] = []

    @property
    def last_step(self) -> int:
        return self.first_step + len(self.states) - 1


def _boxes_of(states, dims):
    out = []
    for row, (length, width) in zip(states, dims):
        x, y, c, s = row
        n = math.hypot(c, s)
        c, s = (c / n, s / n) if n > 1e-12 else (1.0, 0.0)
        out.append(corners_from_pose(x, y, c, s, length, width))
    return out


def _pick_init_clip(rng, init_source, warm_steps, max_agents):
    """Sample a warmup window with at least one fully-present vehicle."""
    for _ in range(16):
        rec = init_source[int(rng.integers(len(init_source)))]
        if rec.jt.n_steps < warm_steps:
            continue
        t0 = int(rng.integers(0, rec.jt.n_steps - warm_steps + 1))
        full = np.flatnonzero(rec.jt.mask[:, t0 : t0 + warm_steps].all(axis=1))
        if full.size:
            return rec, t0, full[:max_agents]
    return None, 0, np.array([], dtype=int)


def run_episode(
    pred: NoisePredictor,
    vocab: Vocabulary,
    scene: SceneConfig,
    cfg: EpisodeConfig,
    sched: NoiseSchedule,
    sampler_cfg: SamplerConfig,
    init_source: list[Recording] | None = None,
) -> EpisodeLog:
    """Run one closed-loop episode; deterministic given cfg.seed."""
    if vocab.dt != scene.dt:
        raise ValueError("vocabulary and scene dt differ")
    dt = scene.dt
    steps_total = int(round(cfg.duration / dt))
    warm_steps = int(round(cfg.init_clip / dt))
    rng = np.random.default_rng(cfg.seed)
    mult = volume_multiplier(cfg.risk.value, cfg.volume_mode)
    rates = np.asarray(cfg.arrival_rates, dtype=float) * mult
    if cfg.arrival_rates and len(cfg.arrival_rates) != len(scene.entry_zones):
        raise ValueError("arrival_rates must match the number of entry zones")

    tracks: list[_Track] = []
    active: list[int] = []
    arrivals: list[tuple[int, int]] = []
    exits: list[tuple[int, int]] = []
    dropped = 0
    retry_queue: list[int] = []

    # ground-truth warmup clip; arrivals are frozen while it plays
    if init_source and warm_steps > 0:
        rec, t0, chosen = _pick_init_clip(rng, init_source, warm_steps, scene.max_agents)
        for agent in chosen:
            track = _Track(tuple(rec.dims[agent]), 0)
            track.states = [rec.jt.data[agent, t0 + s].copy() for s in range(warm_steps)]
            tracks.append(track)
            active.append(len(tracks) - 1)

    for step in range(warm_steps, steps_total):
        # 1-2: sample a joint future and snap it to the vocabulary
        if active:
            current = np.stack([tracks[i].states[-1] for i in active])
            future = sample(
                pred,
                current,
                np.ones(len(active), dtype=bool),
                cfg.risk,
                sampler_cfg,
                sched,
                scene.horizon_steps,
                dt,
                seed=rng,
            )
            checked = dynamics_check(future, vocab)
            # 3: execute only the second state of the corrected horizon
            for row, i in enumerate(active):
                tracks[i].states.append(checked.data[row, 1].copy())

        # 4: arrivals, retrying last step's rejected spawns once
        requests = [(z, True) for z in retry_queue]
        retry_queue = []
        if rates.size:
            for zone_idx, count in enumerate(spawn_arrivals(rng, rates, dt)):
                requests.extend([(zone_idx, False)] * int(count))
        if requests:
            boxes = _boxes_of(
                [tracks[i].states[-1] for i in active],
                [tracks[i].dims for i in active],
            )
            default = (scene.default_dims.length, scene.default_dims.width)
            for zone_idx, is_retry in requests:
                if len(active) >= scene.max_agents:
                    dropped += 1
                    continue
                zone = scene.entry_zones[zone_idx]
                c, s = math.cos(zone.heading), math.sin(zone.heading)
                corners = corners_from_pose(zone.px, zone.py, c, s, *default)
                if any(corners_overlap(corners, b) for b in boxes):
                    if is_retry:
                        dropped += 1
                    else:
                        retry_queue.append(zone_idx)
                    continue
                track = _Track(default, step)
                track.states = [np.array([zone.px, zone.py, c, s])]
                tracks.append(track)
                idx = len(tracks) - 1
                active.append(idx)
                arrivals.append((step, idx))
                boxes.append(corners)

        # 5: remove vehicles that reached an exit zone
        still = []
        for i in active:
            x, y = tracks[i].states[-1][:2]
            if any(point_in_convex_polygon(x, y, poly) for poly in scene.exit_zones):
                exits.append((step, i))
            else:
                still.append(i)
        active = still

    # assemble the per-track joint trajectory
    n = len(tracks)
    jt = JointTrajectory.empty(n, steps_total, dt)
    dims = np.zeros((n, 2))
    for i, track in enumerate(tracks):
        dims[i] = track.dims
        for offset, state in enumerate(track.states):
            t = track.first_step + offset
            jt.data[i, t] = state
            jt.mask[i, t] = True

    grid = grid_from_bounds(scene.bounds, scene.grid_cell)
    win = min(scene.horizon_steps, steps_total)
    pets = window_pet_values(jt, dims, grid, win) if n else []
    collisions = detect_collisions(jt, dims) if n else []

    return EpisodeLog(
        jt=jt,
        dims=dims,
        track_ids=list(range(1, n + 1)),
        arrivals=arrivals,
        exits=exits,
        collisions=collisions,
        dropped_arrivals=dropped,
        pet_windows=pets,
        risk=cfg.risk.value,
        seed=cfg.seed,
        config={
            "duration": cfg.duration,
            "init_clip": cfg.init_clip,
            "volume_mode": cfg.volume_mode,
            "arrival_rates": list(cfg.arrival_rates),
        },
    )


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def episode_seed(group_seed: int, risk_index: int, episode_index: int) -> int:
    """Stable per-episode seed derived from the experiment seed schedule."""
    ss = np.random.SeedSequence([int(group_seed), int(risk_index), int(episode_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def two_proportion_one_sided(k1: int, n1: int, k2: int, n2: int) -> tuple[float, float]:
    """z statistic and p-value for H1: rate2 > rate1 (pooled two-proportion)."""
    if n1 < 1 or n2 < 1:
        raise ValueError("sample sizes must be positive")
    p1, p2 = k1 / n1, k2 / n2
    pooled = (k1 + k2) / (n1 + n2)
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    if se == 0:
        return 0.0, 1.0
    z = (p2 - p1) / se
    return z, 0.5 * math.erfc(z / math.sqrt(2))


_WORKER = {}


def _init_worker(payload):
    _WORKER.update(payload)


def _episode_task(cfg: EpisodeConfig) -> EpisodeLog:
    return run_episode(
        _WORKER["pred"],
        _WORKER["vocab"],
        _WORKER["scene"],
        cfg,
        _WORKER["sched"],
        _WORKER["sampler_cfg"],
        _WORKER["init_source"],
    )


def run_experiment(
    pred: NoisePredictor,
    vocab: Vocabulary,
    scene: SceneConfig,
    sched: NoiseSchedule,
    sampler_cfg: SamplerConfig,
    base_cfg: EpisodeConfig,
    risk_grid: list[float],
    episodes_per_risk: int,
    seeds: list[int],
    init_source: list[Recording] | None = None,
    workers: int = 1,
    keep_logs: bool = False,
) -> dict:
    """Grid of episodes over risk levels and seed groups, with deterministic
    per-episode seeds and an order-free aggregation."""
    if not risk_grid:
        raise ValueError("risk grid must be non-empty")
    if episodes_per_risk < 1 or not seeds:
        raise ValueError("need at least one episode and one seed group")

    cfgs = []
    index = []
    for gi, group_seed in enumerate(seeds):
        for ri, risk in enumerate(risk_grid):
            for e in range(episodes_per_risk):
                cfgs.append(
                    dataclasses.replace(
                        base_cfg,
                        risk=RiskLevel(risk),
                        seed=episode_seed(group_seed, ri, e),
                    )
                )
                index.append((gi, ri))

    if workers > 1:
        payload = {
            "pred": pred,
            "vocab": vocab,
            "scene": scene,
            "sched": sched,
            "sampler_cfg": sampler_cfg,
            "init_source": init_source,
        }
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(payload,)
        ) as pool:
            logs = list(pool.map(_episode_task, cfgs, chunksize=1))
    else:
        logs = [
            run_episode(pred, vocab, scene, cfg, sched, sampler_cfg, init_source)
            for cfg in cfgs
        ]

    per_risk = []
    for ri, risk in enumerate(risk_grid):
        group_rates = []
        risk_logs = []
        for gi in range(len(seeds)):
            group_logs = [
                log for log, (g, r) in zip(logs, index) if g == gi and r == ri
            ]
            group_rates.append(
                sum(1 for log in group_logs if log.crashed) / len(group_logs)
            )
            risk_logs.extend(group_logs)
        sources = [log.as_metric_source() for log in risk_logs]
        hists = build_histograms(sources, scene)
        n_windows = sum(len(log.pet_windows) for log in risk_logs)
        n_low_pet = sum(
            1
            for log in risk_logs
            for v in log.pet_windows
            if v is not None and v < 1.0
        )
        per_risk.append(
            {
                "risk": risk,
                "episodes": len(risk_logs),
                "crash_rate": float(np.mean(group_rates)),
                "crash_rate_min": float(np.min(group_rates)),
                "crash_rate_max": float(np.max(group_rates)),
                "crash_rates_by_group": group_rates,
                "crashes": sum(1 for log in risk_logs if log.crashed),
                "pet_windows": n_windows,
                "pet_below_1s_mass": (n_low_pet / n_windows) if n_windows else 0.0,
                "dropped_arrivals": sum(log.dropped_arrivals for log in risk_logs),
                "metrics": {
                    name: {
                        "bin_edges": h.edges.tolist(),
                        "counts": h.counts.tolist(),
                        "density": h.density.tolist(),
                        "n_samples": int(h.n_samples),
                    }
                    for name, h in hists.items()
                },
            }
        )

    report = {
        "version": 1,
        "risk_grid": list(risk_grid),
        "episodes_per_risk": episodes_per_risk,
        "seeds": list(seeds),
        "volume_mode": base_cfg.volume_mode,
        "duration": base_cfg.duration,
        "init_clip": base_cfg.init_clip,
        "arrival_rates": list(base_cfg.arrival_rates),
        "per_risk": per_risk,
    }
    if keep_logs:
        report["_logs"] = logs
    return report
