"""Deterministic batch streams addressed by (step, seed).

Any stream can be replayed from an arbitrary step, which is what lets both
LT-SFT phases see exactly the same batches and dropout noise.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .model import Batch, mlm_corrupt, pad_batch
from .synth import Example, with_cls


class BatchSource(Protocol):
    def batch_at(self, step: int, seed: int) -> Batch: ...

    def batches_per_epoch(self) -> int: ...


def _key(*parts) -> int:
    return int.from_bytes(hashlib.sha256(":".join(map(str, parts)).encode()).digest()[:8], "little")


@dataclass(frozen=True)
class MlmConfig:
    mask_fraction: float = 0.15
    vocab_size: int = 512


class ExampleStream:
    """Epoch-wise shuffled batches over a fixed list of examples.

    ``kind`` is ``mlm`` (unlabelled sentences, corrupted on the fly),
    ``token`` or ``sequence``.
    """

    def __init__(self, examples: Sequence[Example] | Sequence[Sequence[int]], kind: str, batch_size: int,
                 lang: str = "", mlm: MlmConfig | None = None, salt: str = ""):
        if not examples:
            raise ValueError(f"empty dataset for language {lang!r}")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if kind == "mlm" and mlm is None:
            mlm = MlmConfig()
        self.examples = list(examples)
        self.kind = kind
        self.batch_size = batch_size
        self.lang = lang
        self.mlm = mlm
        # the language tag is a label only; ``salt`` decorrelates streams that are mixed together
        self.salt = salt

    def __len__(self) -> int:
        return len(self.examples)

    def batches_per_epoch(self) -> int:
        return -(-len(self.examples) // self.batch_size)

    def _order(self, epoch: int, seed: int) -> np.ndarray:
        return np.random.default_rng(_key("order", seed, epoch, self.salt)).permutation(len(self.examples))

    def batch_at(self, step: int, seed: int) -> Batch:
        per = self.batches_per_epoch()
        epoch, pos = divmod(step, per)
        idx = self._order(epoch, seed)[pos * self.batch_size : (pos + 1) * self.batch_size]
        return self.make_batch(idx, step, seed)

    def make_batch(self, idx: Sequence[int], step: int = 0, seed: int = 0) -> Batch:
        chosen = [self.examples[i] for i in idx]
        if self.kind == "mlm":
            rows = [with_cls(ex.tokens if isinstance(ex, Example) else ex) for ex in chosen]
            plain = pad_batch(rows, kind="token", lang=self.lang)
            batch, _ = mlm_corrupt(plain, self.mlm.mask_fraction, _key("mlm", seed, step, self.salt),
                                   self.mlm.vocab_size)
            return batch
        rows = [with_cls(ex.tokens) for ex in chosen]
        if self.kind == "token":
            # the [CLS] position is unsupervised
            return pad_batch(rows, [[-100, *ex.labels] for ex in chosen], "token", self.lang)
        return pad_batch(rows, [ex.labels[0] for ex in chosen], "sequence", self.lang)

    def eval_batches(self, seed: int = 0) -> list[Batch]:
        """Fixed, unshuffled pass over the data (MLM corruption still seeded)."""
        n = len(self.examples)
        return [
            self.make_batch(range(i, min(i + self.batch_size, n)), step=i, seed=seed)
            for i in range(0, n, self.batch_size)
        ]


class MultiSourceStream:
    """Monolingual batches from several languages, shuffled together.

    Each epoch, every language's (capped) examples are shuffled and cut into
    batches; the batch list of all languages is then shuffled. The language
    tag of each batch selects the overlay applied for that training step.
    """

    def __init__(self, streams: Mapping[str, ExampleStream], cap: int | None = None, capping_seed: int = 0):
        if not streams:
            raise ValueError("multi-source training needs at least one language")
        self.streams: dict[str, ExampleStream] = {}
        self._plan = None
        for lang in sorted(streams):
            s = streams[lang]
            if len(s) == 0:
                raise ValueError(f"empty dataset for language {lang!r}")
            examples = s.examples
            if cap is not None and len(examples) > cap:
                pick = np.sort(np.random.default_rng(_key("cap", capping_seed, lang)).permutation(len(examples))[:cap])
                examples = [examples[i] for i in pick]
            self.streams[lang] = ExampleStream(examples, s.kind, s.batch_size, lang, s.mlm,
                                               salt=lang if len(streams) > 1 else s.salt)

    def batches_per_epoch(self) -> int:
        return sum(s.batches_per_epoch() for s in self.streams.values())

    def epoch_plan(self, epoch: int, seed: int) -> list[tuple[str, np.ndarray]]:
        if self._plan is not None and self._plan[0] == (epoch, seed):
            return self._plan[1]
        plan = []
        for lang, s in self.streams.items():
            order = s._order(epoch, seed)
            for pos in range(s.batches_per_epoch()):
                plan.append((lang, order[pos * s.batch_size : (pos + 1) * s.batch_size]))
        perm = np.random.default_rng(_key("interleave", seed, epoch)).permutation(len(plan))
        plan = [plan[i] for i in perm]
        self._plan = ((epoch, seed), plan)
        return plan

    def batch_at(self, step: int, seed: int) -> Batch:
        if len(self.streams) == 1:
            # one language: exactly the single-source schedule
            return next(iter(self.streams.values())).batch_at(step, seed)
        epoch, pos = divmod(step, self.batches_per_epoch())
        lang, idx = self.epoch_plan(epoch, seed)[pos]
        return self.streams[lang].make_batch(idx, step, seed)

    def eval_batches(self, seed: int = 0) -> list[Batch]:
        return [b for s in self.streams.values() for b in s.eval_batches(seed)]
