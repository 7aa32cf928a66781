"""Command-line front end: gen-data, run, eval, serve, report."""

from __future__ import annotations

import argparse
import json
import sys
import threading
from pathlib import Path

from . import service
from .al import SimulatedOracle
from .detector import DetectorState, evaluate_map
from .engine import MiningConfig, MiningEngine, run as run_engine
from .report import generate_report
from .synthbench import SceneSpec, generate_dataset, load_dataset, save_dataset


def _load_scene_spec(path: str, seed: int | None) -> SceneSpec:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if seed is not None:
        data["seed"] = seed
    return SceneSpec.from_json(data)


def _load_mining_config(path: str | None, **overrides) -> MiningConfig:
    data = {}
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    preset = data.pop("preset", None)
    data.update({k: v for k, v in overrides.items() if v is not None})
    if preset and preset != "custom":
        return MiningConfig.from_preset(preset, **data)
    config = MiningConfig(**data)
    config.validate()
    return config


def cmd_gen_data(args) -> int:
    spec = _load_scene_spec(args.spec, args.seed)
    dataset = generate_dataset(spec)
    save_dataset(dataset, args.out)
    counts = {name: len(dataset.split(name)) for name in ("train-labeled", "unlabeled", "test")}
    print(f"wrote {sum(counts.values())} images to {args.out} {counts}")
    return 0


def _run_human(config, dataset, run_dir, port, extra):
    annotator = service.QueueAnnotator(run_dir)
    stats = service.EngineStats()
    engine = MiningEngine(config, dataset, annotator, run_dir=run_dir)
    engine.observer = service.stats_observer(stats)
    (Path(run_dir) / "config.json").write_text(
        json.dumps({**config.to_json(), **extra}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    server = service.serve(annotator, stats, port, static_dir=_frontend_dir())
    server_thread = threading.Thread(target=server.serve_forever, daemon=True)
    server_thread.start()
    print(f"annotation API listening on port {port}; waiting for labels...")
    try:
        state, log = engine.run()
    finally:
        stats.update(finished=True)
        annotator.close()
        server.shutdown()
    return state, log


def cmd_run(args) -> int:
    dataset = load_dataset(args.data)
    config = _load_mining_config(
        args.config,
        seed=args.seed,
        annotation_budget=args.budget,
    )
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    extra = {"data_dir": str(Path(args.data).resolve()), "annotator": args.annotator}
    if args.annotator == "simulated":
        state, log = run_engine(
            config, dataset, SimulatedOracle(dataset), run_dir, extra_config=extra
        )
    else:
        state, log = _run_human(config, dataset, run_dir, args.port, extra)
    termination = [e for e in log.events if e["event"] == "termination"]
    evaluations = [e for e in log.events if e["event"] == "evaluation"]
    reason = termination[-1]["reason"] if termination else "unknown"
    final_map = evaluations[-1]["map"] if evaluations else float("nan")
    print(f"terminated ({reason}) after {len(evaluations)} evaluations; final mAP {final_map:.4f}")
    return 0


def cmd_eval(args) -> int:
    state = DetectorState.load(args.checkpoint)
    dataset = load_dataset(args.data)
    aps, mean_ap = evaluate_map(state, dataset.split("test"))
    for category in sorted(aps):
        print(f"AP[{category}] = {aps[category]:.4f}")
    print(f"mAP = {mean_ap:.4f}")
    return 0


def _frontend_dir():
    for candidate in (
        Path(__file__).resolve().parents[2] / "frontend",
        Path.cwd() / "frontend",
    ):
        if (candidate / "index.html").exists() and (candidate / "dist").exists():
            return candidate
    return None


def cmd_serve(args) -> int:
    run_dir = Path(args.rundir)
    config_data = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    data_dir = config_data.pop("data_dir", None)
    config_data.pop("annotator", None)
    if data_dir is None:
        print("config.json lacks data_dir; re-run `run` first", file=sys.stderr)
        return 2
    dataset = load_dataset(data_dir)
    config_data.pop("preset", None)
    config = MiningConfig(**config_data)
    annotator = service.QueueAnnotator(run_dir)
    stats = service.EngineStats()
    checkpoints = sorted(
        (run_dir / "checkpoints").glob("round-*.json"),
        key=lambda p: int(p.stem.split("-")[1]),
    )
    if checkpoints:
        engine = MiningEngine.resume(checkpoints[-1], dataset, annotator, run_dir=run_dir)
    else:
        engine = MiningEngine(config, dataset, annotator, run_dir=run_dir)
    engine.observer = service.stats_observer(stats)
    server = service.serve(annotator, stats, args.port, static_dir=_frontend_dir())
    server_thread = threading.Thread(target=server.serve_forever, daemon=True)
    server_thread.start()
    print(f"annotation API on port {args.port}; engine resuming at round {engine.round_index}")
    try:
        engine.run()
    finally:
        stats.update(finished=True)
        annotator.close()
        server.shutdown()
    print("engine finished")
    return 0


def cmd_report(args) -> int:
    summary = generate_report(args.rundir)
    for key, value in summary.items():
        print(f"{key}: {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossmine",
        description="Sample mining for object detection with cross-image validation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic detection dataset")
    p.add_argument("--spec", required=True, help="scene spec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="run the mining loop")
    p.add_argument("--config", default=None, help="mining config JSON file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--annotator", choices=("simulated", "human"), default="simulated")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--budget", type=int, default=None, help="annotation budget")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--port", type=int, default=8008, help="API port (human annotator)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a detector checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="serve the annotation API for a human run")
    p.add_argument("--rundir", required=True)
    p.add_argument("--port", type=int, required=True)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="render report tables and figures for a run")
    p.add_argument("--rundir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
