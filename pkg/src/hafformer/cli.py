"""Command-line entry point: analyze, gradcheck, synth, train, and eval.

Configuration is a flat ``key = value`` text file with ``#`` comments;
unknown keys are rejected with a line-numbered diagnostic. Exit codes:
0 success, 1 numeric/assertion failure, 2 usage or configuration failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import analysis, data, mixers, training
from .errors import (
    ConfigError,
    CorruptionError,
    DimensionError,
    FormatError,
    NumericError,
    OptimizationError,
)
from .mixers import ALL_MIXER_COMBOS, ChannelMixerKind, TokenMixerKind
from .model import (
    HierarchyPreset,
    ModelConfig,
    apply_preset,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tensor, grad_check, sum_all

GRADCHECK_TOLERANCE = 1e-4
CHECKPOINT_NAME = "checkpoint.hafc"
TRAIN_LOG_NAME = "train_log.jsonl"


@dataclass(frozen=True)
class RunConfig:
    """Parsed run configuration: model plus training and data settings."""

    model: ModelConfig = ModelConfig()
    lr: float = 2e-3
    weight_decay: float = 1e-5
    batch_size: int = 8
    epochs: int = 80
    data_mode: str = "synthetic"  # "synthetic" or "files"
    train_per_class: int = 50
    test_per_class: int = 20
    difficulty: float = 1.0
    data_seed: int = 1234


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    raise ValueError(f"expected true/false, got {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in raw.split(","))


_MODEL_KEYS = {
    "token_mixer": TokenMixerKind,
    "channel_mixer": ChannelMixerKind,
    "hierarchy": HierarchyPreset,
    "stage_factors": _parse_int_tuple,
    "stage_depths": _parse_int_tuple,
    "input_dim": int,
    "seq_len": int,
    "d_model": int,
    "proj_kernel": int,
    "head_hidden": int,
    "num_classes": int,
    "channel_residual": _parse_bool,
    "seed": int,
}

_RUN_KEYS = {
    "lr": float,
    "weight_decay": float,
    "batch_size": int,
    "epochs": int,
    "data_mode": str,
    "train_per_class": int,
    "test_per_class": int,
    "difficulty": float,
    "data_seed": int,
}


def parse_run_config(path) -> RunConfig:
    """Parse and validate a flat key = value config file."""
    model_fields: dict = {}
    run_fields: dict = {}
    hierarchy: HierarchyPreset | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw_line in enumerate(fh, start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw_value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key = key.strip()
            raw_value = raw_value.strip()
            try:
                if key == "hierarchy":
                    hierarchy = HierarchyPreset(raw_value)
                elif key in _MODEL_KEYS:
                    model_fields[key] = _MODEL_KEYS[key](raw_value)
                elif key in _RUN_KEYS:
                    run_fields[key] = _RUN_KEYS[key](raw_value)
                else:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None

    cfg = ModelConfig()
    if hierarchy is not None:
        cfg = apply_preset(hierarchy, cfg)
    cfg = replace(cfg, **model_fields)
    cfg.validate()
    run = RunConfig(model=cfg, **run_fields)
    if run.data_mode not in ("synthetic", "files"):
        raise ConfigError(f"{path}: data_mode must be 'synthetic' or 'files', got {run.data_mode!r}")
    if run.epochs < 0 or run.batch_size < 1:
        raise ConfigError(f"{path}: epochs must be >= 0 and batch_size >= 1")
    return run


def _load_run_config(args) -> RunConfig:
    run = parse_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        run = replace(run, model=replace(run.model, seed=args.seed))
    return run


# ---------------------------------------------------------------------------
# subcommands


def cmd_analyze(args) -> int:
    run = _load_run_config(args)
    cfg = run.model
    if args.all_combos:
        table = analysis.emit_cost_table(list(ALL_MIXER_COMBOS), cfg)
        print(table.text)
        rows = list(table.rows)
    else:
        report = analysis.count_costs(cfg)
        print(f"configuration: {cfg.token_mixer.value} + {cfg.channel_mixer.value}")
        print(f"{'component':<28}{'params':>10}{'MACs':>14}")
        for entry in report.entries:
            print(f"{entry.component:<28}{entry.params:>10}{entry.macs:>14}")
        pk = analysis.round_half_away(report.params_excl_projection / 1e3)
        mm = analysis.round_half_away(report.macs_excl_projection / 1e6)
        pki = analysis.round_half_away(report.params_incl_projection / 1e3)
        mmi = analysis.round_half_away(report.macs_incl_projection / 1e6)
        print(f"total excl. projection: {pk:.2f}K params, {mm:.2f}M MACs")
        print(f"total incl. projection: {pki:.2f}K params, {mmi:.2f}M MACs")
        table = analysis.emit_cost_table([(cfg.token_mixer, cfg.channel_mixer)], cfg)
        for warning in table.warnings:
            print(f"warning: {warning}")
        rows = list(table.rows)
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return 0


def _gradcheck_block_cases(scale: str, seed: int):
    rng = np.random.default_rng(seed)
    d = 8
    frames = 16 if scale == "small" else 64
    for tk, ck in ALL_MIXER_COMBOS:
        params = mixers.random_block_params(tk, ck, d, rng)
        x = Tensor(rng.standard_normal((frames, d)), requires_grad=False)

        def loss_fn(tk=tk, ck=ck, params=params, x=x):
            return sum_all(mixers.afformer_block(tk, ck, params, x))

        yield f"{tk.value}+{ck.value}", loss_fn, params.tensors(), None


def _gradcheck_model_case(cfg: ModelConfig, scale: str, seed: int):
    rng = np.random.default_rng(seed + 1)
    if scale == "small":
        cfg = replace(cfg, seq_len=64, input_dim=16)
        coord_limit = None
    else:
        coord_limit = 4  # full-size model: deterministic coordinate subsample
    cfg.validate()
    model = build_model(cfg)
    x = rng.standard_normal((cfg.seq_len, cfg.input_dim))
    label = 1 if cfg.num_classes > 1 else 0

    def loss_fn():
        return training.cross_entropy(model.forward(x), label)

    return "end-to-end", loss_fn, model.params.tensors(), coord_limit


def cmd_gradcheck(args) -> int:
    run = _load_run_config(args)
    seed = args.seed if args.seed is not None else 2024
    cases = list(_gradcheck_block_cases(args.scale, seed))
    cases.append(_gradcheck_model_case(run.model, args.scale, seed))
    failures = []
    for name, loss_fn, params, coord_limit in cases:
        err = grad_check(loss_fn, params, coord_limit=coord_limit, seed=seed)
        ok = err < GRADCHECK_TOLERANCE
        print(f"{name:<28} max_rel_err={err:.3e}  {'PASS' if ok else 'FAIL'}")
        if not ok:
            failures.append(name)
    if failures:
        print(f"gradcheck failed for: {', '.join(failures)}", file=sys.stderr)
        return 1
    return 0


def cmd_synth(args) -> int:
    run = _load_run_config(args)
    data_seed = args.seed if args.seed is not None else run.data_seed
    out = Path(args.out)
    train_ds = data.synthesize_dataset(run.train_per_class, data_seed, run.difficulty, "train")
    test_ds = data.synthesize_dataset(run.test_per_class, data_seed + 1, run.difficulty, "test")
    data.save_dataset(out / "train", train_ds)
    data.save_dataset(out / "test", test_ds)
    print(json.dumps({"train": len(train_ds), "test": len(test_ds), "out": str(out)}))
    return 0


def _train_dataset(run: RunConfig, data_dir) -> data.Dataset:
    if run.data_mode == "files":
        if data_dir is None:
            raise ConfigError("data_mode = files requires --data DIR")
        return data.load_dataset(data_dir, "train", expected_cols=run.model.input_dim)
    return data.synthesize_dataset(run.train_per_class, run.data_seed, run.difficulty, "train")


def _eval_dataset(run: RunConfig, data_dir) -> data.Dataset:
    if run.data_mode == "files":
        if data_dir is None:
            raise ConfigError("data_mode = files requires --data DIR")
        return data.load_dataset(data_dir, "test", expected_cols=run.model.input_dim)
    return data.synthesize_dataset(run.test_per_class, run.data_seed + 1, run.difficulty, "test")


def cmd_train(args) -> int:
    run = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _train_dataset(run, args.data)
    model = build_model(run.model)
    log = training.train(
        model,
        dataset,
        epochs=run.epochs,
        batch_size=run.batch_size,
        seed=run.model.seed,
        lr=run.lr,
        weight_decay=run.weight_decay,
        log_path=out / TRAIN_LOG_NAME,
    )
    save_checkpoint(model, out / CHECKPOINT_NAME)
    summary = {
        "epochs": len(log),
        "final_loss": log[-1]["mean_loss"] if log else None,
        "final_train_acc": log[-1]["train_acc"] if log else None,
        "checkpoint": str(out / CHECKPOINT_NAME),
    }
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    run = _load_run_config(args)
    checkpoint = Path(args.out) / CHECKPOINT_NAME
    model = load_checkpoint(checkpoint)
    dataset = _eval_dataset(run, args.data)
    metrics = training.evaluate(model, dataset)
    payload = json.dumps(metrics.to_dict())
    print(payload)
    if args.json:
        Path(args.json).write_text(payload + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="haff",
        description="HAFFormer workflows: cost analysis, gradient checks, synthetic data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, data=False, out=False, json_flag=False):
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--seed", type=int, metavar="N", help="override the config seed")
        if data:
            p.add_argument("--data", metavar="DIR", help="directory with manifest + embedding files")
        if out:
            p.add_argument("--out", metavar="DIR", default="out", help="artifact directory")
        if json_flag:
            p.add_argument("--json", metavar="PATH", help="also write machine-readable JSON here")

    p = sub.add_parser("analyze", help="print the params/MACs cost report")
    common(p, json_flag=True)
    p.add_argument("--all-combos", action="store_true", help="emit the full mixer grid")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference checks for all mixer combos")
    common(p)
    p.add_argument(
        "--scale",
        choices=("paper", "small"),
        default="small",
        help="small: shrunken end-to-end model (full coordinate sweep); "
        "paper: configured sizes with a coordinate subsample",
    )
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic embedding dataset")
    common(p, out=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint + log")
    common(p, data=True, out=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; prints metrics JSON")
    common(p, data=True, out=True, json_flag=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, DimensionError, CorruptionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, OptimizationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
