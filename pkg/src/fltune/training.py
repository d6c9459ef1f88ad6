"""Optimizers, deterministic training loop, loss smoothing, and the few-shot
subsampling protocol.

Every run is a pure function of (weights, adapter, task, config): data order
comes from the config seed, there is no dropout, and wall-clock time is the
only nondeterministic output column. One run is single-threaded; parallelism
comes from launching independent runs in separate processes with disjoint
output paths.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adapters import (
    ParamRegistry,
    RegistryEntry,
    build_registry,
    count_parameters,
    init_fl_adapter,
    init_ma_adapter,
    init_pv1_adapter,
    init_pv2_adapter,
)
from .encoder import EncoderConfig, EncoderWeights, encoder_forward
from .tensor import Tape, add, cross_entropy_mean, scale

MODES = ("fl", "pv1", "pv2", "ma", "finetune")

METRICS_HEADER = "step,loss,smoothed_loss,accuracy,wallclock_ms"


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    """One run's hyperparameters, including the tuning-method selector and
    its adapter shape."""

    mode: str = "fl"
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    smoothing_alpha: float = 0.99
    max_steps: Optional[int] = None
    loss_threshold: float = 0.5
    # adapter hyperparameters
    d_a: int = 160
    prompt_len: int = 160
    d_a_prime: int = 160
    position: str = "prefix"
    infix_index: Optional[int] = None
    layer_subset: Optional[list[int]] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.smoothing_alpha < 1.0):
            raise ValueError(f"smoothing_alpha must be in [0, 1), got {self.smoothing_alpha}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class StepRow:
    step: int
    loss: float
    smoothed_loss: float
    accuracy: float
    wallclock_ms: float


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    f1: Optional[float] = None


@dataclass
class RunMetrics:
    rows: list[StepRow] = field(default_factory=list)
    epoch_dev: list[EvalResult] = field(default_factory=list)
    final_dev: Optional[EvalResult] = None

    @property
    def steps(self) -> int:
        return len(self.rows)


def smooth_loss(previous_smoothed: Optional[float], current: float, alpha: float = 0.99) -> float:
    """Exponential smoothing: alpha * previous + (1 - alpha) * current.

    The first step has no previous value and seeds the series with the raw
    loss. The complementary weight is computed as (1 - alpha).
    """
    if not (0.0 <= alpha < 1.0):
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    current = float(current)
    if previous_smoothed is None:
        return current
    return alpha * float(previous_smoothed) + (1.0 - alpha) * current


def steps_to_threshold(metrics: RunMetrics, threshold: float) -> Optional[int]:
    """First step whose smoothed loss reached the threshold, if any."""
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    for row in metrics.rows:
        if row.smoothed_loss <= threshold:
            return row.step
    return None


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, entries: Sequence[RegistryEntry]) -> None:
        for e in entries:
            if e.tensor.grad is not None:
                e.tensor.data -= self.learning_rate * e.tensor.grad


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._state: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, entries: Sequence[RegistryEntry]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for e in entries:
            g = e.tensor.grad
            if g is None:
                continue
            m, v = self._state.get(id(e.tensor), (np.zeros_like(g), np.zeros_like(g)))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            self._state[id(e.tensor)] = (m, v)
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            e.tensor.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.learning_rate)
    return Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)


def make_adapter(encoder_config: EncoderConfig, config: TrainConfig):
    """Build the trainable delta selected by config.mode (None for finetune)."""
    seed = [config.seed, 1]
    if config.mode == "finetune":
        return None
    if config.mode == "fl":
        return init_fl_adapter(encoder_config, d_a=config.d_a, position=config.position,
                               infix_index=config.infix_index,
                               layer_subset=config.layer_subset, seed=seed)
    if config.mode == "pv1":
        return init_pv1_adapter(encoder_config, prompt_len=config.prompt_len, seed=seed)
    if config.mode == "pv2":
        return init_pv2_adapter(encoder_config, prompt_len=config.prompt_len, seed=seed)
    if config.mode == "ma":
        return init_ma_adapter(encoder_config, d_a_prime=config.d_a_prime, seed=seed)
    raise ValueError(f"unknown mode {config.mode!r}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _example_forward(weights, adapter, example, per_position: bool):
    logits = encoder_forward(weights, example.tokens, adapter=adapter,
                             per_position=per_position)
    labels = list(example.label) if per_position else [example.label]
    loss = cross_entropy_mean(logits, labels)
    pred = logits.data.argmax(axis=1)
    correct = int((pred == np.asarray(labels)).sum())
    return loss, correct, len(labels), pred


def tag_spans(labels: Sequence[int]) -> set[tuple[int, int]]:
    """Maximal begin+inside runs as (start, end) half-open position spans."""
    spans = set()
    start = None
    for i, lab in enumerate(labels):
        if lab == 1:  # begin
            if start is not None:
                spans.add((start, i))
            start = i
        elif lab == 2:  # inside
            if start is None:
                start = i  # tolerate dangling inside tags in predictions
        else:
            if start is not None:
                spans.add((start, i))
                start = None
    if start is not None:
        spans.add((start, len(labels)))
    return spans


def span_f1(true_seqs: Sequence[Sequence[int]], pred_seqs: Sequence[Sequence[int]]) -> float:
    """Micro-averaged exact span match F1 over a dataset."""
    tp = fp = fn = 0
    for true_labels, pred_labels in zip(true_seqs, pred_seqs):
        t = tag_spans(true_labels)
        p = tag_spans(pred_labels)
        tp += len(t & p)
        fp += len(p - t)
        fn += len(t - p)
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def evaluate(weights, adapter, examples, kind: str) -> EvalResult:
    """Accuracy (token-level for tagging) and mean loss; span F1 for tagging."""
    per_position = kind == "tagging"
    total_correct = total_labels = 0
    losses = []
    true_seqs, pred_seqs = [], []
    for ex in examples:
        loss, correct, n, pred = _example_forward(weights, adapter, ex, per_position)
        losses.append(loss.item())
        total_correct += correct
        total_labels += n
        if per_position:
            true_seqs.append(ex.label)
            pred_seqs.append(pred.tolist())
    f1 = span_f1(true_seqs, pred_seqs) if per_position else None
    return EvalResult(accuracy=total_correct / total_labels,
                      mean_loss=float(np.mean(losses)), f1=f1)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(weights: EncoderWeights, adapter, task, config: TrainConfig,
          registry: Optional[ParamRegistry] = None) -> RunMetrics:
    """Deterministic training of the trainable tensors selected by the mode.

    The registry (built here unless supplied) freezes the backbone for
    adapter modes. Aborts with DivergenceError on a non-finite loss. Each
    epoch ends with a dev-split evaluation; metrics rows carry raw loss,
    the smoothed series, batch accuracy, and cumulative wall-clock ms.
    """
    if registry is None:
        registry = build_registry(weights, adapter, finetune=(config.mode == "finetune"))
    trainable = registry.trainable_entries()
    optimizer = make_optimizer(config)
    rng = np.random.default_rng([config.seed, 2])
    per_position = task.kind == "tagging"

    metrics = RunMetrics()
    smoothed: Optional[float] = None
    start = time.perf_counter()
    step = 0
    done = False

    for _epoch in range(config.epochs):
        order = rng.permutation(len(task.train))
        for lo in range(0, len(order), config.batch_size):
            batch = [task.train[i] for i in order[lo:lo + config.batch_size]]
            inv = 1.0 / len(batch)
            correct = labels = 0
            with Tape() as tape:
                loss = None
                for ex in batch:
                    ex_loss, ex_correct, ex_n, _ = _example_forward(
                        weights, adapter, ex, per_position)
                    part = scale(ex_loss, inv)
                    loss = part if loss is None else add(loss, part)
                    correct += ex_correct
                    labels += ex_n
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise DivergenceError(
                        f"non-finite loss {loss_val} at step {step + 1}; aborting run")
                tape.backward(loss)
            optimizer.step(trainable)
            for e in trainable:
                e.tensor.grad = None
            step += 1
            smoothed = smooth_loss(smoothed, loss_val, config.smoothing_alpha)
            metrics.rows.append(StepRow(
                step=step,
                loss=loss_val,
                smoothed_loss=smoothed,
                accuracy=correct / labels,
                wallclock_ms=(time.perf_counter() - start) * 1000.0,
            ))
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        if done:
            break
        metrics.epoch_dev.append(evaluate(weights, adapter, task.dev, task.kind))

    if metrics.rows:
        if done or not metrics.epoch_dev:
            metrics.final_dev = evaluate(weights, adapter, task.dev, task.kind)
        else:
            metrics.final_dev = metrics.epoch_dev[-1]
    return metrics


# ---------------------------------------------------------------------------
# Few-shot protocol
# ---------------------------------------------------------------------------

def _strat_key(example) -> int:
    label = example.label
    if isinstance(label, (tuple, list)):
        return int(any(v > 0 for v in label))
    return int(label)


def fewshot_subsample(task, sizes: Sequence[int], seed: int = 0) -> list:
    """Nested, class-stratified training subsets of the given sizes.

    Subsets are prefixes of one seeded class-interleaved ordering, so smaller
    sets are contained in larger ones and every prefix tracks the pool's
    class proportions within one example. Dev/test splits are shared.
    """
    pool = task.train
    for s in sizes:
        if not (1 <= s <= len(pool)):
            raise ValueError(f"subset size {s} outside [1, {len(pool)}]")

    rng = np.random.default_rng([seed, 3])
    by_class: dict[int, list[int]] = {}
    for i, ex in enumerate(pool):
        by_class.setdefault(_strat_key(ex), []).append(i)
    classes = sorted(by_class)
    for c in classes:
        idx = np.array(by_class[c])
        by_class[c] = idx[rng.permutation(len(idx))].tolist()

    proportions = {c: len(by_class[c]) / len(pool) for c in classes}
    taken = {c: 0 for c in classes}
    ordering: list[int] = []
    for t in range(1, max(sizes) + 1):
        # largest-deficit class next; prefix counts then stay within one of
        # the exact proportional share
        candidates = [c for c in classes if taken[c] < len(by_class[c])]
        pick = max(candidates, key=lambda c: (proportions[c] * t - taken[c], -c))
        ordering.append(by_class[pick][taken[pick]])
        taken[pick] += 1

    return [dataclasses.replace(task, train=[pool[i] for i in ordering[:s]])
            for s in sizes]


# ---------------------------------------------------------------------------
# Metrics files
# ---------------------------------------------------------------------------

def write_metrics_csv(metrics: RunMetrics, path) -> None:
    """CSV schema: step,loss,smoothed_loss,accuracy,wallclock_ms.

    Floats are written with repr so they parse back bit-exactly; wall-clock
    is the only column excluded from reproducibility guarantees.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in metrics.rows:
            fh.write(f"{r.step},{r.loss!r},{r.smoothed_loss!r},"
                     f"{r.accuracy!r},{r.wallclock_ms!r}\n")


def read_metrics_csv(path) -> list[StepRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header: {header!r}")
        for line in fh:
            step, loss, smoothed, acc, wall = line.strip().split(",")
            rows.append(StepRow(int(step), float(loss), float(smoothed),
                                float(acc), float(wall)))
    return rows


def run_summary(metrics: RunMetrics, registry: ParamRegistry, config: TrainConfig,
                task_kind: str, train_size: int) -> dict:
    """Deterministic run summary (no wall-clock fields)."""
    counts = count_parameters(registry)
    final_dev = metrics.final_dev
    return {
        "mode": config.mode,
        "task_kind": task_kind,
        "train_size": train_size,
        "seed": config.seed,
        "steps": metrics.steps,
        "final_train_accuracy": metrics.rows[-1].accuracy if metrics.rows else None,
        "final_dev_accuracy": final_dev.accuracy if final_dev else None,
        "final_dev_f1": final_dev.f1 if final_dev else None,
        "loss_threshold": config.loss_threshold,
        "steps_to_threshold": steps_to_threshold(metrics, config.loss_threshold),
        "params": {
            "total": counts.total,
            "trainable": counts.trainable,
            "fraction": counts.fraction,
        },
    }
