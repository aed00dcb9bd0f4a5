"""Density sweeps and language-mask overlap."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .model import MicroTransformer
from .params import GroupPolicy, ParameterSnapshot, overlap_percentage
from .synth import Example, TaskSpec
from .train import TrainConfig
from .transfer import LanguageArtifact, evaluate, train_language_sft, train_task_sft, zero_shot_apply

log = logging.getLogger(__name__)

THREADS_ENV = "SFT_COMPOSE_THREADS"


def budget_for_density(density: float, total: int, maskable: int) -> int:
    """Parameter budget for a density level, clipped to what can be trained."""
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density {density} outside (0, 1]")
    return int(min(max(1, round(density * total)), maskable))


def check_levels(levels: Sequence[float]) -> tuple[float, ...]:
    levels = tuple(float(x) for x in levels)
    if not levels:
        raise ValueError("no density levels")
    for x in levels:
        if not 0.0 < x <= 1.0:
            raise ValueError(f"density {x} outside (0, 1]")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("density levels must be strictly increasing")
    return levels


@dataclass
class TransferSetup:
    """Everything one zero-shot transfer run needs besides budgets and seed."""

    model: MicroTransformer
    theta0: ParameterSnapshot
    task: TaskSpec
    sources: tuple[str, ...]
    targets: tuple[str, ...]
    corpora: Mapping[str, Sequence[Sequence[int]]]
    task_data: Mapping[str, Sequence[Example]]
    test_data: Mapping[str, Sequence[Example]]
    lang_cfg: TrainConfig
    task_cfg: TrainConfig
    strategy: str = "lt"
    policy: GroupPolicy = field(default_factory=GroupPolicy)

    def language_sfts(self, seed: int, k: int | None = None, tags: Sequence[str] | None = None
                      ) -> dict[str, LanguageArtifact]:
        cfg = replace(self.lang_cfg, seed=seed, k=self.lang_cfg.k if k is None else k)
        tags = tags or (*self.sources, *self.targets)
        return {t: train_language_sft(self.model, self.theta0, self.corpora[t], t, cfg, self.strategy, self.policy)
                for t in tags}

    def run(self, seed: int, task_k: int | None = None, lang_k: int | None = None) -> dict[str, float]:
        """Composed zero-shot score per target language."""
        langs = self.language_sfts(seed, lang_k)
        cfg = replace(self.task_cfg, seed=seed, k=self.task_cfg.k if task_k is None else task_k)
        art, _ = train_task_sft(self.model, self.theta0, {s: self.task_data[s] for s in self.sources}, self.task,
                                cfg, langs, self.strategy, self.policy)
        return {t: evaluate(self.model, zero_shot_apply(self.theta0, art, langs[t]), art.head, self.test_data[t],
                            self.task) for t in self.targets}


@dataclass
class SweepCell:
    task_density: float
    lang_density: float
    seed: int
    metric: float | None
    error: str | None = None


@dataclass
class SweepGrid:
    task_levels: tuple[float, ...]
    lang_levels: tuple[float, ...]
    cells: list[SweepCell]

    def mean(self, task_density: float, lang_density: float) -> float | None:
        vals = [c.metric for c in self.cells
                if c.task_density == task_density and c.lang_density == lang_density and c.metric is not None]
        return float(np.mean(vals)) if vals else None

    def to_tsv(self) -> str:
        lines = ["task_density\tlang_density\tseed\tmetric"]
        for c in self.cells:
            metric = "failed" if c.metric is None else f"{c.metric:.6f}"
            lines.append(f"{c.task_density:g}\t{c.lang_density:g}\t{c.seed}\t{metric}")
        return "\n".join(lines) + "\n"


def _sweep_group(setup: TransferSetup, task_levels, lang_density: float, seed: int) -> list[SweepCell]:
    """All task densities for one (language density, seed); language SFTs are shared."""
    total = setup.theta0.layout.total
    maskable = setup.policy.maskable(setup.model.layout, setup.model.tags()).popcount
    try:
        langs = setup.language_sfts(seed, budget_for_density(lang_density, total, maskable))
    except Exception as exc:  # a failed cell must not abort the sweep
        log.warning("language SFTs failed at density %g seed %d: %s", lang_density, seed, exc)
        return [SweepCell(dt, lang_density, seed, None, repr(exc)) for dt in task_levels]
    out = []
    for dt in task_levels:
        try:
            cfg = replace(setup.task_cfg, seed=seed, k=budget_for_density(dt, total, maskable))
            art, _ = train_task_sft(setup.model, setup.theta0, {s: setup.task_data[s] for s in setup.sources},
                                    setup.task, cfg, langs, setup.strategy, setup.policy)
            scores = [evaluate(setup.model, zero_shot_apply(setup.theta0, art, langs[t]), art.head,
                               setup.test_data[t], setup.task) for t in setup.targets]
            out.append(SweepCell(dt, lang_density, seed, float(np.mean(scores))))
        except Exception as exc:
            log.warning("sweep cell (%g, %g, %d) failed: %s", dt, lang_density, seed, exc)
            out.append(SweepCell(dt, lang_density, seed, None, repr(exc)))
    return out


def workers_from_env(default: int = 1) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def density_sweep(setup: TransferSetup, task_levels: Sequence[float], lang_levels: Sequence[float],
                  seeds: Sequence[int], workers: int | None = None) -> SweepGrid:
    """Zero-shot score for every (task density, language density, seed).

    Groups run in up to ``workers`` processes (default: ``SFT_COMPOSE_THREADS``
    or 1); results are ordered by key, so the grid does not depend on it.
    """
    task_levels, lang_levels = check_levels(task_levels), check_levels(lang_levels)
    if not seeds:
        raise ValueError("no seeds")
    workers = workers_from_env() if workers is None else workers
    jobs = [(dl, s) for dl in lang_levels for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            futures = [pool.submit(_sweep_group, setup, task_levels, dl, s) for dl, s in jobs]
            groups = [f.result() for f in futures]
    else:
        groups = [_sweep_group(setup, task_levels, dl, s) for dl, s in jobs]
    cells = sorted((c for g in groups for c in g), key=lambda c: (c.task_density, c.lang_density, c.seed))
    return SweepGrid(task_levels, lang_levels, cells)


@dataclass
class OverlapMatrix:
    tags: tuple[str, ...]
    values: np.ndarray

    def to_tsv(self) -> str:
        lines = ["\t".join(["language", *self.tags])]
        for tag, row in zip(self.tags, self.values):
            lines.append("\t".join([tag, *(f"{v:.4f}" for v in row)]))
        return "\n".join(lines) + "\n"


def overlap_matrix(artifacts: Sequence[LanguageArtifact]) -> OverlapMatrix:
    """Pairwise percentage of shared mask positions; every mask needs the same budget."""
    if not artifacts:
        raise ValueError("no language artifacts")
    for a in artifacts:
        if a.mask is None:
            raise ValueError(f"language artifact {a.tag!r} has no mask")
    budgets = {a.mask.popcount for a in artifacts}
    if len(budgets) != 1:
        raise ValueError(f"language masks have different budgets: {sorted(budgets)}")
    n = len(artifacts)
    values = np.full((n, n), 100.0)
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = overlap_percentage(artifacts[i].mask, artifacts[j].mask)
    return OverlapMatrix(tuple(a.tag for a in artifacts), values)


def expected_random_overlap(k: int, maskable: int) -> float:
    """Expected overlap (percent) of two independent uniform k-subsets of ``maskable`` positions."""
    return 100.0 * k / maskable
