"""Cross-lingual transfer by composing language and task SFTs.

A language SFT is learned with MLM on unlabelled text. A task SFT is learned
on labelled source-language data with the source language SFT overlaid, and
is stored relative to that overlay (i.e. with the language SFT removed). At
inference the task SFT is composed with the target language SFT.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .data import ExampleStream, MlmConfig, MultiSourceStream
from .model import IGNORE, Batch, HeadSpec, MicroTransformer, forward_loss
from .params import GroupPolicy, Mask, ParameterSnapshot, SparseDiff, apply_diffs
from .synth import Example, TaskSpec
from .train import LtSftResult, TrainConfig, lt_sft

LANGUAGE_LAMBDA = 0.1


@dataclass
class LanguageArtifact:
    tag: str
    diff: SparseDiff
    mask: Mask | None = None
    manifest: dict = field(default_factory=dict)


@dataclass
class TaskArtifact:
    tag: str
    sources: tuple[str, ...]
    diff: SparseDiff
    head: ParameterSnapshot
    head_spec: HeadSpec
    mask: Mask | None = None
    manifest: dict = field(default_factory=dict)


def language_config(**overrides) -> TrainConfig:
    """TrainConfig defaults for language SFTs (L1 anchor on)."""
    return TrainConfig(**{"lam": LANGUAGE_LAMBDA, **overrides})


def train_language_sft(
    model: MicroTransformer,
    theta0: ParameterSnapshot,
    corpus: Sequence[Sequence[int]],
    tag: str,
    cfg: TrainConfig,
    strategy: str = "lt",
    policy: GroupPolicy = GroupPolicy(),
    mlm: MlmConfig | None = None,
) -> LanguageArtifact:
    if not corpus:
        raise ValueError(f"empty corpus for language {tag!r}")
    mlm = mlm or MlmConfig(vocab_size=model.spec.vocab_size)
    stream = ExampleStream(corpus, "mlm", cfg.batch_size, tag, mlm)
    r = lt_sft(model, stream, theta0, cfg, strategy, policy)
    manifest = {"kind": "language", "tag": tag, "strategy": strategy, "config": cfg.to_dict(),
                "final_loss": r.phase2.losses[-1] if r.phase2.losses else None}
    return LanguageArtifact(tag, r.diff.with_meta(language=tag), r.mask, manifest)


def multi_source_schedule(datasets: Mapping[str, Sequence[Example]], kind: str, batch_size: int,
                          cap: int | None = None, seed: int = 0) -> MultiSourceStream:
    """Monolingual batches from every language, interleaved; see ``MultiSourceStream``."""
    for lang, ds in datasets.items():
        if not ds:
            raise ValueError(f"empty dataset for language {lang!r}")
    return MultiSourceStream({lang: ExampleStream(ds, kind, batch_size, lang) for lang, ds in datasets.items()},
                             cap=cap, capping_seed=seed)


def train_task_sft(
    model: MicroTransformer,
    theta0: ParameterSnapshot,
    datasets: Mapping[str, Sequence[Example]],
    task: TaskSpec,
    cfg: TrainConfig,
    languages: Mapping[str, LanguageArtifact] | None = None,
    strategy: str = "lt",
    policy: GroupPolicy = GroupPolicy(),
    cap: int | None = None,
    tag: str | None = None,
    dev: Sequence[Batch] | None = None,
) -> tuple[TaskArtifact, LtSftResult]:
    """Task SFT on one or more source languages.

    Each batch is trained with its language's SFT (if given in ``languages``)
    applied on top of ``theta0``; the resulting diff excludes that overlay.
    """
    if not datasets:
        raise ValueError("no task data")
    head_spec = HeadSpec(task.head_kind, task.num_labels)
    langs = sorted(datasets)
    languages = languages or {}
    for lang in langs:
        if lang in languages:
            theta0.layout.check(languages[lang].diff.layout, f"language SFT {lang!r}")
    overlay_map = {lang: ([languages[lang].diff] if lang in languages else []) for lang in langs}
    if len(langs) == 1:
        lang = langs[0]
        data = ExampleStream(datasets[lang], task.head_kind, cfg.batch_size, lang)
        overlays = overlay_map[lang]
    else:
        data = multi_source_schedule(datasets, task.head_kind, cfg.batch_size, cap, cfg.seed)
        overlays = overlay_map
    r = lt_sft(model, data, theta0, cfg, strategy, policy, head_spec, overlays, dev)
    tag = tag or task.kind
    meta = {"task": tag, "sources": ",".join(langs)}
    manifest = {"kind": "task", "tag": tag, "sources": langs, "strategy": strategy, "config": cfg.to_dict(),
                "final_loss": r.phase2.losses[-1] if r.phase2.losses else None}
    art = TaskArtifact(tag, tuple(langs), r.diff.with_meta(**meta), r.head, head_spec, r.mask, manifest)
    return art, r


def zero_shot_apply(theta0: ParameterSnapshot, task: TaskArtifact, target: LanguageArtifact | None
                    ) -> ParameterSnapshot:
    """theta0 + task SFT (+ target language SFT); ``target=None`` is the task-only ablation."""
    diffs = [task.diff] if target is None else [task.diff, target.diff]
    return apply_diffs(theta0, diffs)


# ---------------------------------------------------------------------------
# metrics


def accuracy(gold: Sequence[Sequence[int]], pred: Sequence[Sequence[int]]) -> float:
    g = np.concatenate([np.asarray(x).ravel() for x in gold]) if gold else np.zeros(0)
    p = np.concatenate([np.asarray(x).ravel() for x in pred]) if pred else np.zeros(0)
    if g.shape != p.shape:
        raise ValueError("gold and predicted label counts differ")
    if g.size == 0:
        raise ValueError("no labels to score")
    return 100.0 * float(np.mean(g == p))


def spans(labels: Sequence[int], outside: int = 0) -> set[tuple[int, int, int]]:
    """Maximal runs of one non-``outside`` label as (start, end, label)."""
    out = set()
    start = None
    for i, lab in enumerate([*labels, None]):
        if start is not None and lab != labels[start]:
            out.add((start, i, int(labels[start])))
            start = None
        if start is None and lab is not None and lab != outside:
            start = i
    return out


def span_f1(gold: Sequence[Sequence[int]], pred: Sequence[Sequence[int]], outside: int = 0) -> float:
    if len(gold) != len(pred):
        raise ValueError("gold and predicted sentence counts differ")
    tp = n_gold = n_pred = 0
    for g, p in zip(gold, pred):
        if len(g) != len(p):
            raise ValueError("gold and predicted sentence lengths differ")
        gs, ps = spans(list(g), outside), spans(list(p), outside)
        tp += len(gs & ps)
        n_gold += len(gs)
        n_pred += len(ps)
    if tp == 0:
        return 0.0
    prec, rec = tp / n_pred, tp / n_gold
    return 100.0 * 2 * prec * rec / (prec + rec)


def evaluate(
    model: MicroTransformer,
    snapshot: ParameterSnapshot,
    head: ParameterSnapshot,
    examples: Sequence[Example],
    task: TaskSpec,
    metric: str = "accuracy",
    batch_size: int = 64,
) -> float:
    """Score (0-100) of ``snapshot`` + ``head`` on labelled examples."""
    if metric not in ("accuracy", "span-f1"):
        raise ValueError(f"unknown metric {metric!r}")
    for ex in examples:
        if any(not 0 <= lab < task.num_labels for lab in ex.labels):
            raise ValueError(f"label outside [0, {task.num_labels}) in evaluation data")
    stream = ExampleStream(examples, task.head_kind, batch_size)
    gold, pred = [], []
    for batch in stream.eval_batches():
        p = model.predict(snapshot, head, batch)
        if task.head_kind == "token":
            for row in range(batch.ids.shape[0]):
                keep = batch.labels[row] != IGNORE
                gold.append(batch.labels[row][keep])
                pred.append(p[row][keep])
        else:
            gold.extend(batch.labels[:, None])
            pred.extend(np.asarray(p).reshape(-1, 1))
    if metric == "span-f1":
        return span_f1(gold, pred)
    return accuracy(gold, pred)


def mlm_loss(model: MicroTransformer, snapshot: ParameterSnapshot, corpus: Sequence[Sequence[int]],
             seed: int = 0, batch_size: int = 64) -> float:
    """Mean MLM loss over a fixed corruption of ``corpus``."""
    stream = ExampleStream(corpus, "mlm", batch_size, "eval", MlmConfig(vocab_size=model.spec.vocab_size))
    losses = [forward_loss(model, snapshot, None, b)[0] for b in stream.eval_batches(seed)]
    return float(np.mean(losses))


def with_k(cfg: TrainConfig, k: int | None) -> TrainConfig:
    return replace(cfg, k=k)
