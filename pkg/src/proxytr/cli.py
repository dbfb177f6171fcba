"""Command line entry point: ``proxytr synth|train|eval|complete``.

Global flags (``--config``, ``--seed``, ``--out``) are accepted before or
after the subcommand. Exit status is 0 on success, 2 on usage errors and 1
on any other failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datagen, geometry, metrics
from .config import RunConfig
from .errors import NonFiniteLossError, ProxyTrError, UsageError
from .model import CompletionModel
from .training import Trainer, load_model, save_model

LEVELS = {"simple": "CD-S", "moderate": "CD-M", "hard": "CD-H"}


def _globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON run config")
    parser.add_argument("--seed", type=int, default=default, help="global seed (u64)")
    parser.add_argument("--out", default=default, help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxytr", description="Point cloud completion toolkit")
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a procedural dataset")
    _globals(p, suppress=True)
    p.add_argument("--kind", dest="method", choices=["crop", "backproject"])
    p.add_argument("--count", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--difficulty", choices=["random", "simple", "moderate", "hard", "all"])
    p.add_argument("--split")
    p.add_argument("--n-complete", dest="n_complete", type=int)
    p.add_argument("--n-input", dest="n_input", type=int)
    p.add_argument("--noise-frac", dest="noise_frac", type=float)
    p.add_argument("--fixed-views", dest="fixed_views", action="store_true", default=None)

    p = sub.add_parser("train", help="train a model on a dataset")
    _globals(p, suppress=True)
    p.add_argument("--data", dest="dataset")
    p.add_argument("--split")
    p.add_argument("--preset")
    p.add_argument("--mode", choices=["pointr", "adapointr"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--no-denoise", dest="denoise", action="store_false")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _globals(p, suppress=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", dest="dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=metrics.DEFAULT_THRESHOLD)

    p = sub.add_parser("complete", help="complete one XYZ cloud")
    _globals(p, suppress=True)
    p.add_argument("input")
    p.add_argument("checkpoint")
    p.add_argument("output", nargs="?")
    return parser


def _run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 1 << 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        run.seed = args.seed
    if args.out is not None:
        run.out = args.out
    return run


def _require_out(run: RunConfig) -> Path:
    if not run.out:
        raise UsageError("an output path is required (--out or 'out' in the config)")
    return Path(run.out)


def _override(target: dict, args, keys) -> None:
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            target[key] = value


def cmd_synth(args) -> int:
    run = _run_config(args)
    _override(run.data, args, ["method", "count", "views", "difficulty", "split", "n_complete",
                               "n_input", "noise_frac", "fixed_views"])
    run = RunConfig.from_dict(run.to_dict())
    out = _require_out(run)
    d = run.data
    params = dict(method=d.get("method", "crop"), n_complete=d.get("n_complete", 1024),
                  n_input=d.get("n_input", 256), views=d.get("views"),
                  difficulty=d.get("difficulty", "random"), fixed_views=d.get("fixed_views", False),
                  noise_frac=d.get("noise_frac", 0.02))
    count = d.get("count", 200)
    split = d.get("split", "train")
    items = datagen.synth_items(count, run.seed, **params)
    try:
        datagen.write_dataset(out, split, items, {"seed": run.seed, "count": count, **params})
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {out}: {exc}") from None
    n_partials = sum(len(it.partials) for it in items)
    print(f"wrote {count} objects, {n_partials} partials to {out / split}")
    return 0


def _load_pairs(root, split, n_input: int):
    partials, completes, ids, levels = [], [], [], []
    n_complete = None
    if not (Path(root) / "manifest.json").exists():
        raise UsageError(f"no manifest.json under {root}")
    for sid, view, level, partial, complete in datagen.load_split(root, split):
        if len(partial) != n_input:
            raise UsageError(f"{sid} view {view}: {len(partial)} input points, model expects "
                             f"{n_input}; regenerate with --n-input {n_input}")
        if n_complete is not None and len(complete) != n_complete:
            raise UsageError("complete clouds differ in size within the split")
        n_complete = len(complete)
        partials.append(partial)
        completes.append(complete)
        ids.append(f"{sid}_{view}")
        levels.append(level)
    if not partials:
        raise UsageError(f"split {split!r} is empty")
    return np.stack(partials), np.stack(completes), ids, levels


def cmd_train(args) -> int:
    run = _run_config(args)
    if args.preset is not None:
        run.preset = args.preset
    _override(run.model, args, ["mode"])
    _override(run.train, args, ["steps", "batch_size", "lr", "checkpoint_every"])
    _override(run.data, args, ["dataset", "split"])
    if not args.denoise:
        run.model["n_denoise"] = 0
    run = RunConfig.from_dict(run.to_dict())
    out = _require_out(run)
    if "dataset" not in run.data:
        raise UsageError("training needs a dataset (--data or data.dataset in the config)")
    mcfg, tcfg = run.model_config(), run.train_config()
    partials, completes, _, _ = _load_pairs(run.data["dataset"], run.data.get("split", "train"),
                                            mcfg.n_input)
    out.mkdir(parents=True, exist_ok=True)
    run.dump(out / "config.json")
    model = CompletionModel(mcfg, seed=run.seed)
    trainer = Trainer(model, partials, completes, tcfg)
    log_mode = "w"
    if args.resume:
        trainer.restore(args.resume)
        log_mode = "a"
    remaining = max(0, tcfg.steps - trainer.step)
    ckpt = out / "model.ptrk"

    def periodic(step, _parts):
        if tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
            save_model(out / f"ckpt_{step:06d}.ptrk", model, trainer.optimizer, step)

    with open(out / "train_log.jsonl", log_mode) as log:
        try:
            trainer.run(remaining, log=log, callback=periodic)
        except NonFiniteLossError as exc:
            log.flush()
            print(f"error: training aborted at step {trainer.step + 1}: {exc}", file=sys.stderr)
            return 1
    save_model(ckpt, model, trainer.optimizer, trainer.step)
    last = trainer.history[-1] if trainer.history else None
    summary = f"trained {trainer.step} steps"
    if last:
        summary += f", final total loss {last['total']:.6f}"
    print(f"{summary}; checkpoint {ckpt}")
    return 0


def evaluation_report(model: CompletionModel, partials, completes, ids, levels,
                      threshold: float = metrics.DEFAULT_THRESHOLD, batch: int = 16) -> dict:
    """Per-difficulty and overall cd_l1 / cd_l2 / fscore."""
    preds = np.concatenate([model.complete(partials[i:i + batch])
                            for i in range(0, len(partials), batch)])
    reports = [metrics.evaluate(p, g, threshold) for p, g in zip(preds, completes)]
    out = {}
    for level, key in LEVELS.items():
        picked = [(sid, r) for sid, r, lv in zip(ids, reports, levels) if lv == level]
        out[key] = metrics.batch_report(picked)["mean"] if picked else None
    overall = metrics.batch_report(list(zip(ids, reports)))["mean"]
    out["avg"] = overall
    out["fscore"] = overall["fscore"]
    return out


def cmd_eval(args) -> int:
    run = _run_config(args)
    for path in (args.checkpoint, args.dataset):
        if not Path(path).exists():
            raise UsageError(f"no such file or directory: {path}")
    model, _ = load_model(args.checkpoint)
    partials, completes, ids, levels = _load_pairs(args.dataset, args.split,
                                                   model.config.n_input)
    report = evaluation_report(model, partials, completes, ids, levels, args.threshold)
    text = metrics.dumps_report(report)
    if run.out:
        Path(run.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_complete(args) -> int:
    run = _run_config(args)
    target = args.output or run.out
    if not target:
        raise UsageError("an output path is required")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"no such checkpoint: {args.checkpoint}")
    cloud = geometry.read_xyz(args.input)
    model, _ = load_model(args.checkpoint)
    n_in, n_read = model.config.n_input, len(cloud)
    if n_read != n_in:
        cloud = datagen.resample(cloud, n_in, np.random.default_rng(run.seed))
    dense = model.complete(cloud[None])[0]
    geometry.write_xyz(target, dense)
    print(f"input {n_read} points -> output {len(dense)} points")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "complete": cmd_complete}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ProxyTrError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
