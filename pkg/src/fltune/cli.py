"""Operator entry point.

Subcommands: verify (equivalence suites), gradcheck (finite-difference
oracle over every trainable tensor), params (budget accounting), train,
fewshot (nested subset sweep), eval (re-evaluate a saved run).

Exit codes: 0 success, 1 check failure, 2 usage or config error. Runs are
configured by a JSON file; --set key.path=value overrides individual
entries and --seed overrides the training seed. FLTUNE_OUTPUT_ROOT sets the
default output root.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .adapters import (
    build_registry,
    count_parameters,
    verify_ma_equivalence,
    verify_prefix_attention_rows,
    verify_theorem1,
    verify_theorem2,
)
from .checkpoint import load_trainable, save_trainable
from .data import generate_task, pretrain_backbone
from .encoder import EncoderConfig, encoder_forward, ffn_parameter_share, init_encoder
from .tensor import add, check_gradients, cross_entropy_mean, scale
from .training import (
    MODES,
    DivergenceError,
    TrainConfig,
    evaluate,
    fewshot_subsample,
    make_adapter,
    run_summary,
    train,
    write_metrics_csv,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

OUTPUT_ROOT_ENV = "FLTUNE_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Bad experiment configuration (parse error, unknown key, bad value)."""


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

@dataclass
class TaskSpec:
    kind: str = "classification"
    train_size: int = 2000
    dev_size: int = 500
    test_size: int = 500
    seq_len: int = 16
    vocab_size: Optional[int] = None   # defaults to the encoder vocabulary
    n_classes: Optional[int] = None    # defaults to the encoder head width
    seed: int = 0


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig
    task: TaskSpec
    train: TrainConfig
    pretrain_steps: int = 0
    backbone_seed: int = 0
    output_dir: Optional[str] = None


_TOP_LEVEL_KEYS = ("encoder", "task", "train", "pretrain_steps", "backbone_seed", "output_dir")


def _build_section(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object, got {type(data).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"in section {name!r}: {exc}") from exc


def _apply_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set needs key.path=value, got {assignment!r}")
    dotted, _, value_text = assignment.partition("=")
    keys = dotted.strip().split(".")
    try:
        value = json.loads(value_text)
    except json.JSONDecodeError:
        value = value_text  # bare strings are convenient on the command line
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {key!r} is not an object")
    node[keys[-1]] = value


def load_experiment_config(path, overrides: Sequence[str] = (),
                           seed: Optional[int] = None) -> ExperimentConfig:
    """Parse and validate a JSON experiment file; flags override file values."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error in {path} at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")

    for assignment in overrides:
        _apply_override(raw, assignment)
    if seed is not None:
        raw.setdefault("train", {})["seed"] = seed

    unknown = sorted(set(raw) - set(_TOP_LEVEL_KEYS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "encoder" not in raw:
        raise ConfigError("config needs an 'encoder' section")

    encoder = _build_section("encoder", EncoderConfig, raw["encoder"])
    task = _build_section("task", TaskSpec, raw.get("task", {}))
    train_cfg = _build_section("train", TrainConfig, raw.get("train", {}))
    config = ExperimentConfig(
        encoder=encoder,
        task=task,
        train=train_cfg,
        pretrain_steps=int(raw.get("pretrain_steps", 0)),
        backbone_seed=int(raw.get("backbone_seed", 0)),
        output_dir=raw.get("output_dir"),
    )
    _validate_experiment(config)
    return config


def _validate_experiment(config: ExperimentConfig) -> None:
    enc, task, tc = config.encoder, config.task, config.train
    if task.vocab_size is None:
        task.vocab_size = enc.vocab_size
    if task.n_classes is None:
        task.n_classes = enc.n_classes
    if task.kind == "tagging" and task.n_classes != 3:
        raise ConfigError("tagging tasks use 3 tag classes; set n_classes accordingly")
    if task.vocab_size > enc.vocab_size:
        raise ConfigError(
            f"task vocab {task.vocab_size} exceeds encoder vocab {enc.vocab_size}")
    if task.n_classes != enc.n_classes:
        raise ConfigError(
            f"task n_classes {task.n_classes} != encoder n_classes {enc.n_classes}")
    budget = enc.max_seq_len - (tc.prompt_len if tc.mode == "pv1" else 0)
    if task.seq_len > budget:
        raise ConfigError(
            f"task seq_len {task.seq_len} exceeds the available budget {budget} "
            f"(max_seq_len {enc.max_seq_len}, mode {tc.mode})")
    if config.pretrain_steps < 0:
        raise ConfigError(f"pretrain_steps must be nonnegative, got {config.pretrain_steps}")


def build_experiment(config: ExperimentConfig):
    """Task, backbone (optionally pretrained), adapter, registry for one run."""
    task = generate_task(
        config.task.kind,
        sizes=(config.task.train_size, config.task.dev_size, config.task.test_size),
        seed=config.task.seed,
        vocab_size=config.task.vocab_size,
        seq_len=config.task.seq_len,
        n_classes=config.task.n_classes,
    )
    weights = init_encoder(config.encoder, seed=config.backbone_seed)
    if config.pretrain_steps:
        pretrain_backbone(weights, task, steps=config.pretrain_steps,
                          seed=config.backbone_seed)
    adapter = make_adapter(config.encoder, config.train)
    registry = build_registry(weights, adapter,
                              finetune=(config.train.mode == "finetune"))
    return task, weights, adapter, registry


def _resolve_outdir(args, config: Optional[ExperimentConfig], command: str) -> str:
    if getattr(args, "out", None):
        return args.out
    if config is not None and config.output_dir:
        return config.output_dir
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return os.path.join(root, command)


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    if args.trials < 1:
        print("verify: --trials must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    reports = [
        verify_theorem1(trials=args.trials, tolerance=args.tolerance, seed=args.seed),
        verify_theorem2(trials=args.trials, tolerance=args.tolerance, seed=args.seed),
        verify_ma_equivalence(trials=max(1, args.trials // 2),
                              tolerance=args.tolerance, seed=args.seed),
        verify_prefix_attention_rows(trials=max(1, args.trials // 4),
                                     tolerance=args.tolerance, seed=args.seed),
    ]
    for report in reports:
        print(report.summary())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


def _gradcheck_loss_fn(weights, adapter, examples, kind):
    per_position = kind == "tagging"

    def loss_fn(_tensor):
        total = None
        for ex in examples:
            logits = encoder_forward(weights, ex.tokens, adapter=adapter,
                                     per_position=per_position)
            labels = list(ex.label) if per_position else [ex.label]
            part = scale(cross_entropy_mean(logits, labels), 1.0 / len(examples))
            total = part if total is None else add(total, part)
        return total

    return loss_fn


def cmd_gradcheck(args) -> int:
    config = load_experiment_config(args.config, args.set, args.seed)
    if config.encoder.d_m > 32:
        print(f"gradcheck: refusing d_m {config.encoder.d_m} > 32 "
              "(finite differences would be too slow)", file=sys.stderr)
        return EXIT_USAGE
    task, weights, adapter, registry = build_experiment(config)
    loss_fn = _gradcheck_loss_fn(weights, adapter, task.train[:args.examples], task.kind)
    rng = np.random.default_rng([config.train.seed, 5])
    worst = 0.0
    failed = False
    for entry in registry.trainable_entries():
        err = check_gradients(loss_fn, entry.tensor, eps=args.eps, rng=rng)
        worst = max(worst, err)
        status = "ok" if err < args.threshold else "FAIL"
        print(f"{entry.name}: max relative error {err:.3e} [{status}]")
        failed = failed or err >= args.threshold
    print(f"worst over {len(registry.trainable_entries())} trainable tensors: {worst:.3e} "
          f"(threshold {args.threshold:g})")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_params(args) -> int:
    config = load_experiment_config(args.config, args.set, args.seed)
    weights = init_encoder(config.encoder, seed=config.backbone_seed)
    rows = {}
    for mode in MODES:
        tc = dataclasses.replace(config.train, mode=mode)
        try:
            adapter = make_adapter(config.encoder, tc)
        except ValueError as exc:
            # e.g. a prompt length that does not fit this encoder's budget
            rows[mode] = {"error": str(exc)}
            continue
        registry = build_registry(weights, adapter, finetune=(mode == "finetune"))
        overall = count_parameters(registry)
        blocks = count_parameters(registry, groups=("block", "adapter"))
        rows[mode] = {
            "total": overall.total,
            "trainable": overall.trainable,
            "fraction": overall.fraction,
            "encoder_block_fraction": blocks.fraction,
        }
        del adapter, registry
    payload = {
        "encoder": config.encoder.to_dict(),
        "ffn_share_per_layer": ffn_parameter_share(config.encoder),
        "modes": rows,
    }
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(f"per-layer ffn share: {payload['ffn_share_per_layer']:.4f}")
        header = f"{'mode':<10}{'total':>14}{'trainable':>14}{'fraction':>12}{'block frac':>12}"
        print(header)
        for mode, row in rows.items():
            if "error" in row:
                print(f"{mode:<10}  n/a ({row['error']})")
            else:
                print(f"{mode:<10}{row['total']:>14}{row['trainable']:>14}"
                      f"{row['fraction']:>12.6f}{row['encoder_block_fraction']:>12.6f}")
    return EXIT_OK


def _run_one_training(config: ExperimentConfig, task, weights, adapter, registry, outdir):
    os.makedirs(outdir, exist_ok=True)
    metrics = train(weights, adapter, task, config.train, registry=registry)
    write_metrics_csv(metrics, os.path.join(outdir, "metrics.csv"))
    summary = run_summary(metrics, registry, config.train, task.kind, len(task.train))
    _write_json(os.path.join(outdir, "summary.json"), summary)
    save_trainable(registry, os.path.join(outdir, "trainable.flckpt"),
                   config_echo=config.encoder.to_dict())
    return summary


def cmd_train(args) -> int:
    config = load_experiment_config(args.config, args.set, args.seed)
    outdir = _resolve_outdir(args, config, "train")
    task, weights, adapter, registry = build_experiment(config)
    try:
        summary = _run_one_training(config, task, weights, adapter, registry, outdir)
    except DivergenceError as exc:
        print(f"train: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"wrote {outdir}/metrics.csv, summary.json, trainable.flckpt")
    print(f"final train accuracy {summary['final_train_accuracy']}, "
          f"dev accuracy {summary['final_dev_accuracy']}")
    return EXIT_OK


def cmd_fewshot(args) -> int:
    config = load_experiment_config(args.config, args.set, args.seed)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        print(f"fewshot: bad --sizes {args.sizes!r}", file=sys.stderr)
        return EXIT_USAGE
    if not sizes:
        print("fewshot: --sizes is empty", file=sys.stderr)
        return EXIT_USAGE
    outdir = _resolve_outdir(args, config, "fewshot")
    os.makedirs(outdir, exist_ok=True)

    task, weights, _adapter, _registry = build_experiment(config)
    try:
        subsets = fewshot_subsample(task, sizes, seed=config.task.seed)
    except ValueError as exc:
        print(f"fewshot: {exc}", file=sys.stderr)
        return EXIT_USAGE
    snapshot = [(name, t.data.copy()) for name, t, _g in weights.named_tensors()]

    summaries = []
    try:
        for size, subset in zip(sizes, subsets):
            for (_, t, _g), (_, saved) in zip(weights.named_tensors(), snapshot):
                t.data = saved.copy()
            adapter = make_adapter(config.encoder, config.train)
            registry = build_registry(weights, adapter,
                                      finetune=(config.train.mode == "finetune"))
            run_dir = os.path.join(outdir, f"size_{size:04d}")
            summary = _run_one_training(config, subset, weights, adapter, registry, run_dir)
            summaries.append(summary)
            print(f"size {size}: dev accuracy {summary['final_dev_accuracy']}")
    except DivergenceError as exc:
        print(f"fewshot: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    _write_json(os.path.join(outdir, "fewshot_summary.json"),
                {"sizes": sizes, "runs": summaries})
    print(f"wrote {outdir}/fewshot_summary.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_experiment_config(args.config, args.set, args.seed)
    task, weights, adapter, registry = build_experiment(config)
    load_trainable(args.checkpoint, registry)
    dev = evaluate(weights, adapter, task.dev, task.kind)
    test = evaluate(weights, adapter, task.test, task.kind)
    payload = {
        "checkpoint": args.checkpoint,
        "dev": {"accuracy": dev.accuracy, "f1": dev.f1, "mean_loss": dev.mean_loss},
        "test": {"accuracy": test.accuracy, "f1": test.f1, "mean_loss": test.mean_loss},
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_config_args(parser) -> None:
    parser.add_argument("config", help="experiment config JSON file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                        help="override one config entry (JSON-parsed value)")
    parser.add_argument("--seed", type=int, default=None, help="override the training seed")
    parser.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fltune",
        description="verification, budget accounting, and training runs for "
                    "feed-forward layer tuning over a frozen encoder")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the equivalence and normalization suites")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-12)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable tensor")
    _add_config_args(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--examples", type=int, default=2,
                   help="training examples in the probe batch")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts and trainable fractions per mode")
    _add_config_args(p)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("train", help="one training run with metrics and checkpoint")
    _add_config_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("fewshot", help="nested stratified subset sweep")
    _add_config_args(p)
    p.add_argument("--sizes", default="20,40,60,80,100",
                   help="comma-separated training-set sizes")
    p.set_defaults(fn=cmd_fewshot)

    p = sub.add_parser("eval", help="evaluate a saved trainable checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True, help="trainable .flckpt file")
    p.set_defaults(fn=cmd_eval)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except ValueError as exc:
        # bad value combinations surfaced below the config layer
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
