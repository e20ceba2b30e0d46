"""Command line entry point: gen, train, track, eval, ablate.

Every command writes its artifacts plus one ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 contract violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig, load_config
from .motmetrics import compute_amota
from .numcore import ContractViolation, DimensionError
from .pipeline import TrackerOutput, run_sequence
from .simworld import ConfigError, Scenario, SchemaError, generate_scenario
from .train import (FROZEN_DESCRIPTION, STAGES, Checkpoint, check_stage_order, detection_error,
                    train_stage)
from .model import MODES, MotionTrack

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONTRACT = 0, 2, 3, 4
SEED_ENV = "ATTENTRACK_SEED"
MANIFEST = "manifest.json"


class DataError(RuntimeError):
    """Input files are missing, unreadable or inconsistent."""


def resolve_seed(flag: Optional[int]) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip() != "":
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0 if flag is None else flag


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise ConfigError(f"output directory {out} is not writable: {e.strerror}") from None
    return out


def _write(path: Path, text: str) -> Path:
    with open(path, "w", newline="") as f:
        f.write(text)
    return path


def write_manifest(out: Path, command: str, args: argparse.Namespace, config: Optional[RunConfig],
                   seed: Optional[int], inputs: dict, outputs: Sequence[Path], started: float,
                   extra: Optional[dict] = None) -> Path:
    manifest = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "config": config.to_dict() if config is not None else None,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {p.name: sha256_file(p) for p in sorted(outputs)},
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    return _write(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _pool_map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# loading


def _scenario_files(data: str) -> list[Path]:
    root = Path(data)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    files = sorted(p for p in root.glob("*.jsonl"))
    if not files:
        raise DataError(f"no .jsonl scenario files in {root}")
    return files


def _read_scenario(path: Path) -> Scenario:
    try:
        return Scenario.from_jsonl(path.read_text())
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise SchemaError(f"{path}: malformed scenario file ({e})") from None


def _read_tracks(path: Path) -> TrackerOutput:
    try:
        return TrackerOutput.from_jsonl(path.read_text())
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise SchemaError(f"{path}: malformed tracks file ({e})") from None


def load_scenarios(data: str, jobs: int = 1) -> tuple[list[Path], list[Scenario]]:
    files = _scenario_files(data)
    return files, _pool_map(_read_scenario, files, jobs)


def load_checkpoint(path: str) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint {p} not found")
    try:
        return Checkpoint.from_json(p.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{p}: not a JSON checkpoint ({e})") from None


# ---------------------------------------------------------------------------
# commands


def _gen_one(job: tuple) -> str:
    world, seed = job
    return generate_scenario(world, seed).to_jsonl()


def cmd_gen(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed)
    out = _out_dir(args.out)
    n = cfg.data.n_scenarios if args.n_scenarios is None else args.n_scenarios
    if n < 1:
        raise ConfigError("--n-scenarios must be >= 1")
    texts = _pool_map(_gen_one, [(cfg.world, seed + k) for k in range(n)], args.jobs)
    files = [_write(out / f"scenario_{k:04d}.jsonl", t) for k, t in enumerate(texts)]
    write_manifest(out, "gen", args, cfg, seed, {}, files, started,
                   {"scenario_seeds": [seed, seed + n - 1]})
    print(f"wrote {n} scenarios to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed)
    out = _out_dir(args.out)
    inputs = {"data": args.data}
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        inputs["resume"] = args.resume
        if ckpt.stage != args.stage or ckpt.train_config is None:
            raise ContractViolation(f"resume checkpoint is for stage {ckpt.stage!r}, not {args.stage!r}")
        if ckpt.complete:
            raise ContractViolation(f"stage {args.stage!r} already finished in {args.resume}")
        model = ckpt.build_model()
        tc, start, opt_state, done = ckpt.train_config, ckpt.step, ckpt.optimizer, list(ckpt.stages_done)
    else:
        init = load_checkpoint(args.init) if args.init else None
        check_stage_order(args.stage, init)
        if init is not None:
            inputs["init"] = args.init
            model = init.build_model()
            done = list(init.stages_done)
        else:
            mcfg = dataclasses.replace(cfg.model, seed=seed)
            if args.mode:
                mcfg = dataclasses.replace(mcfg, mode=args.mode)
            model = MotionTrack(mcfg)
            done = []
        tc, start, opt_state = cfg.train_config(args.stage, seed), 0, None
    if args.mode and args.mode != model.config.mode:
        raise ContractViolation(f"--mode {args.mode} does not match the model's mode {model.config.mode}")
    _, pool = load_scenarios(args.data)
    result = train_stage(model, tc, pool, start_step=start, optimizer_state=opt_state,
                         stop_after=args.stop_after)
    finished = result.steps_done >= tc.total_steps
    if finished and args.stage not in done:
        done.append(args.stage)
    ckpt = Checkpoint(model.config, model.state_dict(), done, args.stage, tc, result.steps_done,
                      None if finished else result.optimizer_state)
    files = [_write(out / "checkpoint.json", ckpt.to_json())]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "accuracy"])
    for k, (loss, acc) in enumerate(zip(result.losses, result.accuracies)):
        w.writerow([start + k, repr(loss), repr(acc)])
    files.append(_write(out / "losses.csv", buf.getvalue()))
    write_manifest(out, "train", args, cfg, seed, inputs, files, started, {
        "stage": args.stage, "frozen": FROZEN_DESCRIPTION[args.stage],
        "steps": [start, result.steps_done], "total_steps": tc.total_steps, "finished": finished,
        "model": model.config_dict()})
    tail = result.losses[-100:]
    summary = f"mean loss (last {len(tail)}) {sum(tail) / len(tail):.6f}" if tail else "nothing to train"
    print(f"stage {args.stage}: steps {start}..{result.steps_done} of {tc.total_steps}, {summary}")
    return EXIT_OK


def _track_one(job: tuple) -> str:
    ckpt_path, scenario_path, mode = job
    model = load_checkpoint(ckpt_path).build_model()
    sc = _read_scenario(Path(scenario_path))
    return run_sequence(sc, model, mode).to_jsonl({"scenario_seed": sc.seed})


def cmd_track(args) -> int:
    started = time.perf_counter()
    ckpt = load_checkpoint(args.model)
    if args.mode == "fusion" and ckpt.model_config.mode != "fusion":
        raise ContractViolation("fusion mode needs a model trained in fusion mode")
    out = _out_dir(args.out)
    files = _scenario_files(args.data)
    texts = _pool_map(_track_one, [(args.model, str(f), args.mode) for f in files], args.jobs)
    written = [_write(out / f.name, t) for f, t in zip(files, texts)]
    write_manifest(out, "track", args, None, None, {"model": args.model, "data": args.data}, written,
                   started, {"mode": args.mode or ckpt.model_config.mode})
    print(f"tracked {len(files)} scenarios into {out}")
    return EXIT_OK


def _eval_settings(args) -> tuple[Optional[RunConfig], int, float]:
    cfg = load_config(args.config) if args.config else None
    n_points = args.n_points if args.n_points is not None else (cfg.eval.n_points if cfg else 40)
    thr = args.match_threshold_m if args.match_threshold_m is not None else \
        (cfg.eval.match_threshold_m if cfg else 2.0)
    if n_points < 2:
        raise ConfigError("--n-points must be >= 2")
    if thr <= 0:
        raise ConfigError("--match-threshold-m must be positive")
    return cfg, n_points, thr


def cmd_eval(args) -> int:
    started = time.perf_counter()
    cfg, n_points, thr = _eval_settings(args)
    out = _out_dir(args.out)
    gt_files = _scenario_files(args.gt)
    track_root = Path(args.tracks)
    track_files = [track_root / f.name for f in gt_files]
    missing = [p.name for p in track_files if not p.is_file()]
    if missing:
        raise DataError(f"no tracks for {len(missing)} scenario(s): {', '.join(missing[:5])}")
    scenarios = _pool_map(_read_scenario, gt_files, args.jobs)
    outputs = _pool_map(_read_tracks, track_files, args.jobs)
    for f, o, s in zip(gt_files, outputs, scenarios):
        if len(o.frames) != len(s.frames):
            raise DataError(f"{f.name}: {len(o.frames)} tracked frames for {len(s.frames)} gt frames")
    report = compute_amota(outputs, scenarios, n_points=n_points, threshold_m=thr)
    files = [_write(out / "report.json", report.to_json()), _write(out / "report.csv", report.to_csv())]
    write_manifest(out, "eval", args, cfg, None, {"tracks": args.tracks, "gt": args.gt}, files, started,
                   {"n_points": n_points, "match_threshold_m": thr})
    print(f"AMOTA {report.overall.get('amota', 0.0):.4f}  IDS {report.overall.get('ids', 0)}")
    return EXIT_OK


ABLATIONS = {
    "da_transformer": ("use_transformer_da", "w/ transformer DA", "w/o transformer DA"),
    "qem": ("use_qem", "w/ QEM", "w/o QEM"),
}
ABLATION_COLUMNS = ("arm", "label", "checkpoint", "amota", "amotp", "mota", "recall", "ids", "fp", "fn",
                    "det_error")


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    cfg, n_points, thr = _eval_settings(args)
    flag, label_a, label_b = ABLATIONS[args.which]
    arms = {"A": load_checkpoint(args.arm_a), "B": load_checkpoint(args.arm_b)}
    if not getattr(arms["A"].model_config, flag) or getattr(arms["B"].model_config, flag):
        raise ContractViolation(f"{args.which} ablation needs arm A with {flag}=true and arm B with {flag}=false")
    out = _out_dir(args.out)
    _, scenarios = load_scenarios(args.data, args.jobs)
    rows = []
    for arm, label, path in (("A", label_a, args.arm_a), ("B", label_b, args.arm_b)):
        model = arms[arm].build_model()
        mode = args.mode or model.config.mode
        report = compute_amota([run_sequence(s, model, mode) for s in scenarios], scenarios,
                               n_points=n_points, threshold_m=thr)
        o = report.overall
        rows.append({"arm": arm, "label": label, "checkpoint": str(path),
                     "amota": o.get("amota", 0.0), "amotp": o.get("amotp", float("nan")),
                     "mota": o.get("mota", 0.0), "recall": o.get("recall", 0.0), "ids": o.get("ids", 0),
                     "fp": o.get("fp", 0), "fn": o.get("fn", 0),
                     "det_error": detection_error(model, scenarios)})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in ABLATION_COLUMNS])
    files = [_write(out / "ablation.csv", buf.getvalue()),
             _write(out / "ablation.json", json.dumps({"which": args.which, "rows": rows},
                                                      indent=2, sort_keys=True) + "\n")]
    write_manifest(out, "ablate", args, cfg, None, {"arm_a": args.arm_a, "arm_b": args.arm_b, "data": args.data},
                   files, started, {"which": args.which, "arms": {"A": label_a, "B": label_b}})
    for r in rows:
        print(f"{r['label']:<20} AMOTA {r['amota']:.4f}  IDS {r['ids']}  det err {r['det_error']:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attentrack", description="Transformer data-association tracker on a synthetic BEV world.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, config=True):
        if config:
            sp.add_argument("--config", help="YAML run configuration")
        if seed:
            sp.add_argument("--seed", type=int, default=None,
                            help=f"base seed (default 0; {SEED_ENV} overrides)")
        sp.add_argument("--out", required=True, help="output directory")

    def metric_flags(sp):
        sp.add_argument("--n-points", type=int, default=None, help="recall points for AMOTA (default 40)")
        sp.add_argument("--match-threshold-m", type=float, default=None,
                        help="centre-distance matching threshold in metres (default 2.0)")

    g = sub.add_parser("gen", help="generate synthetic scenarios")
    common(g)
    g.add_argument("--n-scenarios", type=int, default=None, help="overrides data.n_scenarios")
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run one training stage")
    common(t)
    t.add_argument("--stage", required=True, choices=STAGES)
    t.add_argument("--data", required=True, help="directory of training scenarios")
    t.add_argument("--init", help="checkpoint of the previous stage")
    t.add_argument("--resume", help="unfinished checkpoint of this stage to continue")
    t.add_argument("--stop-after", type=int, default=None, help="stop after this many steps of the stage")
    t.add_argument("--mode", choices=MODES)
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", help="run the tracker over scenarios")
    common(k, seed=False, config=False)
    k.add_argument("--model", required=True, help="trained checkpoint")
    k.add_argument("--data", required=True)
    k.add_argument("--mode", choices=MODES)
    k.add_argument("--jobs", type=int, default=1)
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score tracks against ground truth")
    common(e, seed=False)
    e.add_argument("--tracks", required=True)
    e.add_argument("--gt", required=True)
    metric_flags(e)
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare two trained arms")
    common(a, seed=False)
    a.add_argument("--which", required=True, choices=sorted(ABLATIONS))
    a.add_argument("--arm-a", required=True, help="checkpoint with the component")
    a.add_argument("--arm-b", required=True, help="checkpoint without the component")
    a.add_argument("--data", required=True)
    a.add_argument("--mode", choices=MODES)
    metric_flags(a)
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ContractViolation, DimensionError) as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
