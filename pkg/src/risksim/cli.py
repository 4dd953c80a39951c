"""Command-line surface: synthetic data generation, vocabulary building,
risk labeling, training, sampling, closed-loop simulation, and evaluation.

Exit codes: 0 success, 2 usage error, 3 schema or validation error,
4 numerical failure. Errors print one machine-parsable line to stderr:
``risksim: error: [kind] message``. All randomness is controlled by --seed
and every output is deterministic given inputs and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .diffusion import (
    DivergenceError,
    SamplerConfig,
    ToyPredictor,
    TrainingConfig,
    fit_codec,
    label_recording,
    load_model,
    make_schedule,
    sample,
    save_model,
    train,
    window_at,
)
from .safety import (
    RiskParams,
    histograms_from_report,
    metric_source_from,
    realism_report,
)
from .scene import (
    Recording,
    RiskLevel,
    SchemaError,
    fmt9,
    read_trajectory_csv,
    write_trajectory_csv,
)
from .simulate import EpisodeConfig, EpisodeLog, run_experiment
from .synthetic import SyntheticWorldParams, generate_recording, roundabout_scene
from .vocab import (
    KDisksParams,
    build_vocabulary,
    dynamics_check,
    extract_transitions,
    load_vocabulary,
    save_vocabulary,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_NUMERIC = 4

WORLD_FILE = "world.json"
WORLD_KEYS = ("ring_radius", "entry_count", "speed", "dt", "max_vehicles")


def round9(obj):
    """Canonicalize every float to 9 significant digits, recursively."""
    if isinstance(obj, float):
        return float(fmt9(obj))
    if isinstance(obj, dict):
        return {k: round9(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round9(v) for v in obj]
    return obj


def write_json(doc, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(round9(doc), fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_histogram_csvs(metrics: dict, directory: Path, prefix: str) -> None:
    for name, entry in metrics.items():
        lines = ["bin_left,bin_right,count,density"]
        edges = entry["bin_edges"]
        for i, (count, dens) in enumerate(zip(entry["counts"], entry["density"])):
            lines.append(
                f"{fmt9(edges[i])},{fmt9(edges[i + 1])},{int(count)},{fmt9(dens)}"
            )
        with open(directory / f"{prefix}{name}.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Config files (line-based key=value)
# ---------------------------------------------------------------------------

KNOWN_CONFIG_KEYS = {
    "data_dir",
    "episode.duration",
    "episode.init_clip",
    "episode.arrival_rate",
    "volume.mode",
    "risk.grid",
    "episodes_per_risk",
    "seeds",
    "sampler.omega",
    "sampler.alpha",
    "workers",
    "grid_cell",
}


def read_config(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in KNOWN_CONFIG_KEYS:
                raise SchemaError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# Data directory helpers
# ---------------------------------------------------------------------------

def world_from_params(params: SyntheticWorldParams) -> dict:
    return {
        "version": 1,
        "ring_radius": params.ring_radius,
        "entry_count": params.entry_count,
        "speed": params.speed,
        "dt": params.dt,
        "max_vehicles": params.max_vehicles,
    }


def load_world(data_dir: Path) -> dict:
    path = data_dir / WORLD_FILE
    if not path.exists():
        raise SchemaError(f"{path}: missing world description")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    missing = [k for k in WORLD_KEYS if k not in doc]
    if missing:
        raise SchemaError(f"{path}: missing keys {missing}")
    return doc


def world_params(doc: dict, **overrides) -> SyntheticWorldParams:
    kwargs = {k: doc[k] for k in WORLD_KEYS}
    kwargs["entry_count"] = int(kwargs["entry_count"])
    kwargs["max_vehicles"] = int(kwargs["max_vehicles"])
    kwargs.update(overrides)
    return SyntheticWorldParams(**kwargs)


def load_recordings(data_dir: Path, dt: float) -> list[Recording]:
    files = sorted(data_dir.glob("*.csv"))
    if not files:
        raise SchemaError(f"{data_dir}: no trajectory files")
    return [read_trajectory_csv(f, dt) for f in files]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = SyntheticWorldParams(
        ring_radius=args.ring_radius,
        entry_count=args.entries,
        speed=args.speed,
        gap_threshold=args.gap_threshold,
        arrival_rate=args.arrival_rate,
        duration=args.duration,
        dt=args.dt,
        seed=args.seed,
        max_vehicles=args.max_vehicles,
    )
    world = world_from_params(base)
    world_path = out / WORLD_FILE
    if world_path.exists():
        existing = load_world(out)
        if any(existing[k] != world[k] for k in WORLD_KEYS):
            raise SchemaError(f"{world_path}: existing world geometry differs")
    else:
        write_json(world, world_path)
    import dataclasses

    for i in range(args.recordings):
        seed = args.seed + i
        params = dataclasses.replace(base, seed=seed)
        rec = generate_recording(params)
        name = f"rec_gap{params.gap_threshold:g}_seed{seed}.csv"
        write_trajectory_csv(rec, out / name)
        print(f"wrote {out / name} ({rec.jt.n_agents} tracks)")
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    data_dir = Path(args.data)
    world = load_world(data_dir)
    dt = float(world["dt"])
    recordings = load_recordings(data_dir, dt)
    trajectories = [
        t
        for rec in recordings
        for t in rec.vehicle_trajectories()
        if len(t) >= 2
    ]
    transitions = extract_transitions(trajectories)
    params = KDisksParams(
        vocab_size=args.vocab_size,
        candidates_per_round=args.candidates,
        coverage_eps=args.coverage_eps,
        seed=args.seed,
    )
    vocab = build_vocabulary(transitions, params, dt)
    save_vocabulary(vocab, args.out)
    print(f"wrote {args.out} ({len(vocab)} tokens from {len(transitions)} transitions)")
    return EXIT_OK


def cmd_label_risk(args) -> int:
    data_dir = Path(args.data)
    world = load_world(data_dir)
    params = world_params(world)
    scene = roundabout_scene(params, horizon_steps=args.horizon, grid_cell=args.grid_cell)
    risk_params = RiskParams()
    windows = []
    for path in sorted(data_dir.glob("*.csv")):
        rec = read_trajectory_csv(path, scene.dt)
        for t0, risk in label_recording(rec, scene, risk_params):
            windows.append({"file": path.name, "t0": t0, "risk": risk})
    doc = {
        "version": 1,
        "dt": scene.dt,
        "horizon": args.horizon,
        "grid_cell": args.grid_cell,
        "risk_params": {
            "gain": risk_params.gain,
            "bias": risk_params.bias,
            "pet_limit": risk_params.pet_limit,
        },
        "windows": windows,
    }
    write_json(doc, args.out)
    print(f"wrote {args.out} ({len(windows)} windows)")
    return EXIT_OK


def _load_labeled_windows(data_dir: Path, labels_path: Path):
    with open(labels_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != 1 or "windows" not in doc:
        raise SchemaError(f"{labels_path}: invalid labels file")
    dt = float(doc["dt"])
    horizon = int(doc["horizon"])
    cache: dict[str, Recording] = {}
    dataset = []
    for entry in doc["windows"]:
        name = entry["file"]
        if name not in cache:
            cache[name] = read_trajectory_csv(data_dir / name, dt)
        window = window_at(cache[name].jt, int(entry["t0"]), horizon)
        dataset.append((window, float(entry["risk"])))
    return dataset, horizon, dt


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    dataset, horizon, _ = _load_labeled_windows(data_dir, Path(args.labels))
    if not dataset:
        raise SchemaError("no training windows found")
    sched = make_schedule(args.schedule, args.steps)
    codec = fit_codec([w for w, _ in dataset])
    pred = ToyPredictor(
        horizon=horizon, hidden=args.hidden, codec=codec, seed=args.seed
    )
    cfg = TrainingConfig(
        dropout_p=args.dropout,
        lr=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        seed=args.seed,
    )
    history = train(pred, dataset, cfg, sched)
    save_model(pred, sched, args.out)
    first, last = history["epoch_loss"][0], history["epoch_loss"][-1]
    print(
        f"wrote {args.out} (loss {first:.4f} -> {last:.4f} over "
        f"{history['steps']} steps, {len(dataset)} windows)"
    )
    return EXIT_OK


def cmd_sample(args) -> int:
    pred, sched = load_model(args.model)
    vocab = load_vocabulary(args.vocab)
    risk = RiskLevel(args.risk)
    init = read_trajectory_csv(args.init, vocab.dt)
    last = init.jt.n_steps - 1
    present = init.jt.mask[:, last]
    if not present.any():
        raise SchemaError(f"{args.init}: no vehicles present at the last frame")
    current = init.jt.data[present, last, :]
    dims = init.dims[present]
    cfg = SamplerConfig(omega=args.omega, alpha=args.alpha, num_steps=sched.num_steps)
    jt = sample(
        pred,
        current,
        np.ones(current.shape[0], dtype=bool),
        risk,
        cfg,
        sched,
        pred.horizon,
        vocab.dt,
        seed=args.seed,
    )
    checked = dynamics_check(jt, vocab)
    track_ids = [tid for tid, keep in zip(init.track_ids, present) if keep]
    write_trajectory_csv(Recording(checked, dims, track_ids), args.out)
    print(f"wrote {args.out} ({current.shape[0]} vehicles, horizon {pred.horizon})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg_doc = read_config(args.config)
    if "data_dir" not in cfg_doc:
        raise SchemaError(f"{args.config}: data_dir is required")
    data_dir = Path(cfg_doc["data_dir"])
    if not data_dir.is_absolute():
        data_dir = Path(args.config).parent / data_dir
    world = load_world(data_dir)
    params = world_params(world)

    pred, sched = load_model(args.model)
    vocab = load_vocabulary(args.vocab)
    grid_cell = float(cfg_doc.get("grid_cell", 0.5))
    scene = roundabout_scene(params, horizon_steps=pred.horizon, grid_cell=grid_cell)
    if vocab.dt != scene.dt:
        raise SchemaError("vocabulary dt does not match the world dt")

    init_source = load_recordings(data_dir, scene.dt)
    arrival = float(cfg_doc.get("episode.arrival_rate", params.arrival_rate))
    base_cfg = EpisodeConfig(
        duration=float(cfg_doc.get("episode.duration", 30.0)),
        init_clip=float(cfg_doc.get("episode.init_clip", 2.0)),
        risk=RiskLevel(0.5),  # replaced per episode
        arrival_rates=tuple([arrival] * len(scene.entry_zones)),
        volume_mode=cfg_doc.get("volume.mode", "consistent"),
    )
    sampler_cfg = SamplerConfig(
        omega=float(cfg_doc.get("sampler.omega", 1.5)),
        alpha=float(cfg_doc.get("sampler.alpha", 0.5)),
        num_steps=sched.num_steps,
    )
    risk_grid = _floats(cfg_doc.get("risk.grid", "0.3,0.65,1.0"))
    episodes = int(cfg_doc.get("episodes_per_risk", 10))
    seeds = _ints(cfg_doc.get("seeds", "1"))
    workers = int(cfg_doc.get("workers", 1))
    if args.risk is not None:
        risk_grid = [args.risk]
    if args.episodes is not None:
        episodes = args.episodes
    if args.seed is not None:
        seeds = [args.seed]
    if args.workers is not None:
        workers = args.workers
    for risk in risk_grid:
        RiskLevel(risk)  # validate range before launching episodes

    report = run_experiment(
        pred,
        vocab,
        scene,
        sched,
        sampler_cfg,
        base_cfg,
        risk_grid,
        episodes,
        seeds,
        init_source=init_source,
        workers=workers,
        keep_logs=True,
    )
    logs = report.pop("_logs")
    out = Path(args.out)
    episodes_dir = out / "episodes"
    episodes_dir.mkdir(parents=True, exist_ok=True)
    idx = 0
    for gi in range(len(seeds)):
        for ri in range(len(risk_grid)):
            for e in range(episodes):
                logs[idx].save(episodes_dir, f"ep_g{gi}_r{ri}_e{e}")
                idx += 1
    write_json(report, out / "report.json")
    for entry in report["per_risk"]:
        write_histogram_csvs(entry["metrics"], out, f"hist_risk{entry['risk']:g}_")
    for entry in report["per_risk"]:
        print(
            f"risk {entry['risk']:g}: crash_rate {entry['crash_rate']:.3f} "
            f"[{entry['crash_rate_min']:.3f}, {entry['crash_rate_max']:.3f}] "
            f"over {entry['episodes']} episodes"
        )
    print(f"wrote {out / 'report.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg_doc = read_config(args.config)
    if "data_dir" not in cfg_doc:
        raise SchemaError(f"{args.config}: data_dir is required")
    data_dir = Path(cfg_doc["data_dir"])
    if not data_dir.is_absolute():
        data_dir = Path(args.config).parent / data_dir
    world = load_world(data_dir)
    params = world_params(world)
    grid_cell = float(cfg_doc.get("grid_cell", 0.5))
    scene = roundabout_scene(params, grid_cell=grid_cell)

    logs_dir = Path(args.logs)
    stems = sorted(p.stem for p in logs_dir.glob("*.json"))
    if not stems:
        raise SchemaError(f"{logs_dir}: no episode logs")
    sources = [EpisodeLog.load(logs_dir, stem, scene.dt).as_metric_source() for stem in stems]

    reference = None
    if args.reference is not None:
        with open(args.reference, "r", encoding="utf-8") as fh:
            reference = histograms_from_report(json.load(fh))
    elif args.reference_data is not None:
        ref_dir = Path(args.reference_data)
        ref_world = load_world(ref_dir)
        ref_scene = roundabout_scene(world_params(ref_world), grid_cell=grid_cell)
        ref_sources = [
            metric_source_from(rec.jt, rec.dims, ref_scene)
            for rec in load_recordings(ref_dir, ref_scene.dt)
        ]
        ref_report = realism_report(ref_sources, None, ref_scene)
        reference = histograms_from_report(ref_report)

    report = realism_report(sources, reference, scene, seeds=None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(report, out)
    write_histogram_csvs(report["metrics"], out.parent, f"{out.stem}_")
    print(f"wrote {out} (crash_rate {report['crash_rate']:.3f}, {len(sources)} episodes)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="risksim",
        description="Risk-adjustable multi-agent traffic scene generation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate scripted roundabout recordings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--recordings", type=int, default=1)
    p.add_argument("--duration", type=float, default=300.0)
    p.add_argument("--gap-threshold", type=float, default=2.0)
    p.add_argument("--arrival-rate", type=float, default=0.12)
    p.add_argument("--ring-radius", type=float, default=16.0)
    p.add_argument("--entries", type=int, default=4)
    p.add_argument("--speed", type=float, default=7.0)
    p.add_argument("--dt", type=float, default=0.4)
    p.add_argument("--max-vehicles", type=int, default=12)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("build-vocab", help="cluster motion tokens from a data dir")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=1024)
    p.add_argument("--candidates", type=int, default=32)
    p.add_argument("--coverage-eps", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("label-risk", help="label sliding windows with risk values")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--horizon", type=int, default=8)
    p.add_argument("--grid-cell", type=float, default=0.5)
    p.set_defaults(func=cmd_label_risk)

    p = sub.add_parser("train", help="train the reference noise predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--dropout", type=float, default=0.25)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--schedule", choices=("cosine", "linear"), default="cosine")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample one joint future from current states")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--init", required=True, help="trajectory file; last frame seeds the scene")
    p.add_argument("--risk", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--omega", type=float, default=1.5)
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("simulate", help="run closed-loop episodes and aggregate")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--risk", type=float, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="realism report for episode logs")
    p.add_argument("--logs", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", default=None, help="existing realism report JSON")
    p.add_argument("--reference-data", default=None, help="data dir to build the reference from")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, FileNotFoundError) as exc:
        print(f"risksim: error: [schema] {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ValueError as exc:
        print(f"risksim: error: [validation] {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (DivergenceError, FloatingPointError) as exc:
        print(f"risksim: error: [numeric] {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
