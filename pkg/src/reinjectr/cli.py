"""Command-line front end: ``reinjectr simulate|analyze|probe|calibrate|inject|cost``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .corpus import LabeledTokenCorpus
from .errors import CorruptDump, InvalidInput, IoError, NumericalFailure, UnsupportedVersion
from .featureio import (
    export_table,
    load_model,
    read_dump,
    read_rotation_map,
    save_model,
    write_dump,
    write_rotation_map,
)
from .metrics import CknnaConfig, drift_report
from .mmdit import MMDiTConfig, ToyMMDiT
from .probe import ProbeConfig, probe_curve
from .reinject import PRESETS, calibrate_rotation_map, estimate_cost, parse_targets, preset_plan
from .simulation import SyntheticTask, TaskSpec, extract_stack, train_toy

EXIT_INPUT = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


def _sidecars(dump: Path):
    return dump.with_suffix(".prtm"), dump.with_suffix(".corpus.json")


def _pick(cls, section: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise InvalidInput(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**section)


def _load_sim_config(path):
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IoError(str(exc)) from exc
        except ValueError as exc:
            raise InvalidInput(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidInput("config must be a JSON object")
    unknown = set(data) - {"model", "task", "train", "timestep"}
    if unknown:
        raise InvalidInput(f"unknown config sections {sorted(unknown)}")
    try:
        model = _pick(MMDiTConfig, data.get("model", {}), "model")
        task = _pick(TaskSpec, data.get("task", {}), "task")
    except TypeError as exc:
        raise InvalidInput(str(exc)) from exc
    train = {"batch_size": 16, "learning_rate": 3e-3}
    extra = data.get("train", {})
    if set(extra) - set(train):
        raise InvalidInput(f"unknown keys in train: {sorted(set(extra) - set(train))}")
    train.update(extra)
    timestep = float(data.get("timestep", 1.0))
    if not 0 < timestep <= 1:
        raise InvalidInput("timestep must lie in (0, 1]")
    return model, task, train, timestep


def cmd_simulate(args):
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    model_cfg, task_spec, train, timestep = _load_sim_config(args.config)
    model_cfg = MMDiTConfig(**{**asdict(model_cfg), "seed": args.seed})
    task = SyntheticTask(task_spec, model_cfg)
    model = train_toy(ToyMMDiT.init(model_cfg), task, args.steps, seed=args.seed, **train)
    stack = extract_stack(model, task, timestep=timestep, seed=args.seed)
    out = Path(args.out)
    write_dump(stack, out, labels=task.corpus.token_labels())
    model_path, corpus_path = _sidecars(out)
    save_model(model, model_path, extra={"task": asdict(task_spec), "timestep": timestep,
                                         "loss_trace": model.loss_trace})
    task.corpus.save(corpus_path)
    print(f"trained {args.steps} steps: loss {model.loss_trace[0]:.4f} -> {model.loss_trace[-1]:.4f}")
    print(f"wrote {out} ({stack.n_layers} layers, {stack.n_tokens} tokens), {model_path}, {corpus_path}")


def cmd_analyze(args):
    stack, _ = read_dump(args.dump)
    report = drift_report(stack, CknnaConfig(k=args.k), q=args.pca_dims)
    export_table(report, "json", f"{args.out_prefix}.cknna.json")
    export_table(report, "csv", f"{args.out_prefix}.coords.csv")
    for layer, score in zip(report.layer_ids, report.scores):
        print(f"layer {layer:3d}  cknna {score:.4f}")


def cmd_probe(args):
    stack, _ = read_dump(args.dump)
    labels = args.labels or _sidecars(Path(args.dump))[1]
    corpus = LabeledTokenCorpus.load(labels)
    cfg = ProbeConfig(hidden_width=args.hidden, learning_rate=args.lr, batch_size=args.batch,
                      epochs=args.epochs, seed=args.seed)
    curve = probe_curve(stack, corpus, cfg)
    fmt = "json" if str(args.out).endswith(".json") else "csv"
    export_table(curve, fmt, args.out)
    for layer, acc in zip(curve.layer_ids, curve.overall):
        print(f"layer {layer:3d}  accuracy {acc:.4f}")


def cmd_calibrate(args):
    stack, _ = read_dump(args.dump)
    if args.timestep is not None and abs(args.timestep - stack.timestep) > 1e-6:
        raise InvalidInput(f"dump was captured at timestep {stack.timestep}, not {args.timestep}")
    plan = parse_targets(args.targets, stack.n_layers - 1, args.origin)
    rmap = calibrate_rotation_map(stack, plan.origin_layer, plan.target_layers, dataset_id=str(args.dump))
    write_rotation_map(rmap, args.out)
    print(f"calibrated {len(rmap.targets)} rotations from origin {rmap.origin_layer} on {stack.n_tokens} tokens")


def cmd_inject(args):
    model, extra = load_model(args.model)
    if "task" not in extra:
        raise InvalidInput("checkpoint lacks the task description written by `simulate`")
    task = SyntheticTask(TaskSpec(**extra["task"]), model.config)
    plan = parse_targets(
        args.targets, model.config.layers, args.origin,
        weight=args.weight, anchor_enabled=not args.no_anchor, rotation_enabled=not args.no_rotation,
    )
    rmap = None
    if plan.rotation_enabled:
        if not args.rmap:
            raise UsageError("--rmap is required unless --no-rotation is given")
        rmap = read_rotation_map(args.rmap)
    stack = extract_stack(model, task, timestep=float(extra.get("timestep", 1.0)), seed=args.seed,
                          plan=plan, rmap=rmap)
    write_dump(stack, args.out, labels=task.corpus.token_labels())
    print(f"wrote {args.out}: origin {plan.origin_layer}, {len(plan.target_layers)} targets, w={plan.weight}")


def cmd_cost(args):
    preset = PRESETS[args.preset]
    width = args.width or preset.width
    apps = args.apps or preset.steps * 2
    plan = preset_plan(args.preset)
    report = estimate_cost(args.tokens, width, apps, plan, block_tokens=args.block_tokens,
                           reference_block_flops=args.block_flops)
    print(report.to_json() if args.json else report.summary())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reinjectr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="train a toy MMDiT and dump its text features")
    s.add_argument("--config", help="JSON file with model/task/train/timestep sections")
    s.add_argument("--steps", type=int, default=300)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("analyze", help="CKNNA curve and shared-PCA coordinates")
    s.add_argument("--dump", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--pca-dims", type=int, default=2)
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("probe", help="layer-wise recoverability probes")
    s.add_argument("--dump", required=True)
    s.add_argument("--labels", help="corpus JSON (default: <dump>.corpus.json)")
    s.add_argument("--hidden", type=int, default=256)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="CSV path, or JSON if it ends in .json")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("calibrate", help="fit per-target Procrustes rotations")
    s.add_argument("--dump", required=True)
    s.add_argument("--origin", type=int, required=True)
    s.add_argument("--targets", default="full", help="full | a..b | stride:s[:a..b]")
    s.add_argument("--timestep", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("inject", help="re-run the toy model with reinjection and dump features")
    s.add_argument("--model", required=True)
    s.add_argument("--rmap")
    s.add_argument("--origin", type=int, required=True)
    s.add_argument("--targets", default="full")
    s.add_argument("--weight", type=float, default=0.025)
    s.add_argument("--no-anchor", action="store_true")
    s.add_argument("--no-rotation", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inject)

    s = sub.add_parser("cost", help="analytic FLOPs/memory overhead per target block")
    s.add_argument("--tokens", type=int, default=512)
    s.add_argument("--width", type=int)
    s.add_argument("--apps", type=int, help="block applications (default: steps x 2 for CFG)")
    s.add_argument("--preset", choices=sorted(PRESETS), default="sd3")
    s.add_argument("--block-tokens", type=int)
    s.add_argument("--block-flops", type=float, help="reference FLOPs of one backbone block")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_cost)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (InvalidInput, CorruptDump, UnsupportedVersion, IoError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
