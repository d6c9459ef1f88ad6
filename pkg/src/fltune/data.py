"""Synthetic desk-scale datasets whose labels are exact functions of the
tokens, plus a token-denoising pretext that gives the frozen backbone
pretrained semantics.

Vocabulary layout (shared across kinds): id 0 pads, 1 separates segments,
2 is the mask token. Classification and pair tasks reserve one marker token
per class starting at id 3; the tagging task reserves entity-begin tokens
{3, 4} and entity-inside tokens {5, 6}, and its filler tokens never overlap
them, so the per-position tag is a pure function of the token.

Generators are pure functions of their seed and safe to call from anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .encoder import EncoderWeights, encoder_hidden
from .tensor import Tape, Tensor, add, cross_entropy_mean, gather_rows, matmul, scale
from .training import Adam, DivergenceError

PAD_ID = 0
SEP_ID = 1
MASK_ID = 2
MARKER_BASE = 3
ENTITY_BEGIN_IDS = (3, 4)
ENTITY_INSIDE_IDS = (5, 6)
TAG_OUTSIDE, TAG_BEGIN, TAG_INSIDE = 0, 1, 2

KINDS = ("classification", "pair", "tagging")


class Example(NamedTuple):
    tokens: tuple[int, ...]
    label: Union[int, tuple[int, ...]]


@dataclass
class SyntheticTask:
    kind: str
    vocab_size: int
    seq_len: int
    n_classes: int
    seed: int
    train: list[Example]
    dev: list[Example]
    test: list[Example]

    def label_fn(self) -> Callable:
        return LABEL_FNS[self.kind]

    def splits(self) -> dict[str, list[Example]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}


# ---------------------------------------------------------------------------
# Labeling rules (the oracles; generation uses exactly these)
# ---------------------------------------------------------------------------

def label_classification(tokens: Sequence[int]) -> int:
    """The marker token in position 0 names the class."""
    return int(tokens[0]) - MARKER_BASE


def label_pair(tokens: Sequence[int]) -> int:
    """1 when the two segment markers match, else 0. Segments are the token
    runs before and after the first separator; each starts with its marker."""
    sep = tokens.index(SEP_ID)
    return int(tokens[0] == tokens[sep + 1])


def label_tagging(tokens: Sequence[int]) -> tuple[int, ...]:
    """Begin/inside/outside tag per position, read off the token identity."""
    tags = []
    for t in tokens:
        if t in ENTITY_BEGIN_IDS:
            tags.append(TAG_BEGIN)
        elif t in ENTITY_INSIDE_IDS:
            tags.append(TAG_INSIDE)
        else:
            tags.append(TAG_OUTSIDE)
    return tuple(tags)


LABEL_FNS = {
    "classification": label_classification,
    "pair": label_pair,
    "tagging": label_tagging,
}


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _filler_range(kind: str, vocab_size: int, n_classes: int) -> tuple[int, int]:
    if kind == "tagging":
        lo = max(ENTITY_INSIDE_IDS) + 1
    else:
        lo = MARKER_BASE + n_classes
    if vocab_size - lo < 2:
        raise ValueError(
            f"vocab size {vocab_size} too small for the {kind} marker set "
            f"(needs at least {lo + 2})")
    return lo, vocab_size


def _gen_classification(rng, seq_len, n_classes, filler):
    lo, hi = filler
    tokens = rng.integers(lo, hi, size=seq_len)
    tokens[0] = MARKER_BASE + int(rng.integers(0, n_classes))
    return tuple(int(t) for t in tokens)


def _gen_pair(rng, seq_len, n_classes, filler):
    if seq_len < 5:
        raise ValueError(f"pair task needs seq_len >= 5, got {seq_len}")
    lo, hi = filler
    n_markers = n_classes  # marker alphabet; label is equality, not identity
    tokens = rng.integers(lo, hi, size=seq_len)
    seg = (seq_len - 1) // 2
    first = MARKER_BASE + int(rng.integers(0, n_markers))
    if rng.random() < 0.5:
        second = first
    else:
        second = MARKER_BASE + int(rng.integers(0, n_markers - 1))
        if second >= first:
            second += 1
    tokens[0] = first
    tokens[seg] = SEP_ID
    tokens[seg + 1] = second
    return tuple(int(t) for t in tokens)


def _gen_tagging(rng, seq_len, n_classes, filler):
    lo, hi = filler
    tokens: list[int] = []
    while len(tokens) < seq_len:
        room = seq_len - len(tokens)
        if room >= 1 and rng.random() < 0.25:
            tokens.append(int(rng.choice(ENTITY_BEGIN_IDS)))
            inside = int(rng.integers(0, min(2, room - 1) + 1))
            for _ in range(inside):
                tokens.append(int(rng.choice(ENTITY_INSIDE_IDS)))
        else:
            tokens.append(int(rng.integers(lo, hi)))
    return tuple(tokens)


def generate_task(
    kind: str,
    sizes: Sequence[int] = (2000, 500, 500),
    seed: int = 0,
    vocab_size: int = 64,
    seq_len: int = 16,
    n_classes: int = 2,
) -> SyntheticTask:
    """Deterministic task with disjoint train/dev/test splits.

    Examples are deduplicated on their token tuples before splitting, so no
    example can appear in two splits. Labels come from the kind's rule, which
    classifies every example perfectly by construction.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if len(sizes) != 3 or any(s < 1 for s in sizes):
        raise ValueError(f"sizes must be three positive counts, got {sizes}")
    if kind == "pair" and n_classes != 2:
        raise ValueError("pair task is match/mismatch and needs n_classes=2")
    if kind == "tagging" and n_classes != 3:
        raise ValueError("tagging uses begin/inside/outside tags and needs n_classes=3")

    filler = _filler_range(kind, vocab_size, n_classes)
    gen = {"classification": _gen_classification, "pair": _gen_pair,
           "tagging": _gen_tagging}[kind]
    label_fn = LABEL_FNS[kind]

    rng = np.random.default_rng([seed, 0])
    total = sum(sizes)
    seen: set[tuple[int, ...]] = set()
    examples: list[Example] = []
    attempts = 0
    while len(examples) < total:
        attempts += 1
        if attempts > 200 * total:
            raise ValueError(
                f"could not draw {total} distinct examples for {kind} with "
                f"vocab {vocab_size} and seq_len {seq_len}")
        tokens = gen(rng, seq_len, n_classes, filler)
        if tokens in seen:
            continue
        seen.add(tokens)
        examples.append(Example(tokens=tokens, label=label_fn(tokens)))

    a, b, _ = sizes
    return SyntheticTask(
        kind=kind, vocab_size=vocab_size, seq_len=seq_len, n_classes=n_classes,
        seed=seed, train=examples[:a], dev=examples[a:a + b], test=examples[a + b:])


def write_split_file(examples: Sequence[Example], path) -> None:
    """One example per line: space-separated token ids, a tab, the label(s)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            label = (" ".join(str(v) for v in ex.label)
                     if isinstance(ex.label, tuple) else str(ex.label))
            fh.write(f"{' '.join(str(t) for t in ex.tokens)}\t{label}\n")


def write_task_files(task: SyntheticTask, directory) -> dict[str, str]:
    """Serialize each split to <directory>/<split>.txt; returns the paths."""
    import os

    os.makedirs(directory, exist_ok=True)
    paths = {}
    for split_name, examples in task.splits().items():
        path = os.path.join(os.fspath(directory), f"{split_name}.txt")
        write_split_file(examples, path)
        paths[split_name] = path
    return paths


# ---------------------------------------------------------------------------
# Backbone pretraining pretext
# ---------------------------------------------------------------------------

def pretrain_backbone(
    weights: EncoderWeights,
    task: SyntheticTask,
    steps: int,
    seed: int = 0,
    learning_rate: float = 1e-3,
    batch_size: int = 8,
    mask_prob: float = 0.15,
    loss_hook: Optional[Callable[[float], None]] = None,
) -> EncoderWeights:
    """Train every backbone parameter on token denoising, in place.

    Random positions are replaced by the mask token and a throwaway
    vocabulary head predicts the original ids at those positions. The task
    head is untouched; the pretext head is discarded. The resulting weights
    are the frozen starting point for adapter experiments.
    """
    if steps == 0:
        return weights
    if steps < 0:
        raise ValueError(f"steps must be nonnegative, got {steps}")

    config = weights.config
    rng = np.random.default_rng([seed, 4])
    pre_head_w = Tensor(rng.normal(0.0, 0.02, (config.d_m, config.vocab_size)),
                        requires_grad=True)
    pre_head_b = Tensor(np.zeros((1, config.vocab_size)), requires_grad=True)

    backbone = [(name, t) for name, t, _group in weights.named_tensors()]
    saved_flags = [(t, t.requires_grad) for _n, t in backbone]
    for _n, t in backbone:
        t.requires_grad = True

    class _Entry(NamedTuple):
        tensor: Tensor

    trainable = [_Entry(t) for _n, t in backbone] + [_Entry(pre_head_w), _Entry(pre_head_b)]
    optimizer = Adam(learning_rate)
    sequences = [ex.tokens for ex in task.train]

    try:
        for step in range(steps):
            batch_idx = rng.integers(0, len(sequences), size=batch_size)
            with Tape() as tape:
                loss = None
                for i in batch_idx:
                    tokens = list(sequences[int(i)])
                    mask = rng.random(len(tokens)) < mask_prob
                    if not mask.any():
                        mask[int(rng.integers(0, len(tokens)))] = True
                    corrupted = [MASK_ID if m else t for t, m in zip(tokens, mask)]
                    hidden, _ = encoder_hidden(weights, corrupted)
                    logits = add(matmul(hidden, pre_head_w), pre_head_b)
                    positions = np.flatnonzero(mask)
                    targets = [tokens[p] for p in positions]
                    part = scale(cross_entropy_mean(gather_rows(logits, positions), targets),
                                 1.0 / batch_size)
                    loss = part if loss is None else add(loss, part)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise DivergenceError(
                        f"non-finite pretext loss {loss_val} at step {step + 1}")
                tape.backward(loss)
            optimizer.step(trainable)
            for e in trainable:
                e.tensor.grad = None
            if loss_hook is not None:
                loss_hook(loss_val)
    finally:
        for t, flag in saved_flags:
            t.requires_grad = flag
    return weights
