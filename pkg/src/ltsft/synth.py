"""Synthetic "languages" with a shared universal category set.

Every language draws clauses from the same abstract grammar (subject and
object noun phrases around a verb, noun phrases built from a function word,
modifiers and a noun) but realises them with its own vocabulary and word
order. Category tagging (label = universal category of each token) is
therefore well-posed across languages; agreement detection labels whether
the verb's agreement class matches its subject noun's.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import CLS_ID, FIRST_WORD_ID

CATEGORIES = ("noun", "verb", "modifier", "function")
NOUN, VERB, MOD, FUNC = range(4)

CLAUSE_ORDERS = ("SVO", "SOV", "VSO", "VOS", "OSV", "OVS")
DEFAULT_CATEGORY_SIZES = {"noun": 20, "verb": 12, "modifier": 10, "function": 6}


@dataclass(frozen=True)
class LanguageSpec:
    """One synthetic language.

    ``vocab`` maps each category to its token ids, most frequent first; the
    within-category frequency profile is Zipfian with exponent ``zipf``.
    """

    tag: str
    vocab: dict[str, tuple[int, ...]]
    clause_order: str = "SVO"
    modifier_first: bool = True
    function_first: bool = True
    zipf: float = 1.0
    transitive_rate: float = 0.7
    max_modifiers: int = 2
    seed: int = 0

    def __post_init__(self):
        if set(self.vocab) != set(CATEGORIES):
            raise ValueError(f"vocab must cover exactly {CATEGORIES}")
        if self.clause_order not in CLAUSE_ORDERS:
            raise ValueError(f"unknown clause order {self.clause_order!r}")
        seen: dict[int, str] = {}
        for cat, ids in self.vocab.items():
            if len(ids) < 2:
                raise ValueError(f"category {cat!r} needs at least two tokens")
            for t in ids:
                if t < FIRST_WORD_ID:
                    raise ValueError(f"token {t} collides with special tokens")
                if t in seen:
                    raise ValueError(f"token {t} appears in both {seen[t]!r} and {cat!r}")
                seen[t] = cat

    @property
    def tokens(self) -> frozenset[int]:
        return frozenset(t for ids in self.vocab.values() for t in ids)

    @property
    def max_token(self) -> int:
        return max(self.tokens)

    def category_of(self, token: int) -> int:
        for i, cat in enumerate(CATEGORIES):
            if token in self.vocab[cat]:
                return i
        raise KeyError(token)

    def zipf_profile(self, category: str) -> np.ndarray:
        ranks = np.arange(1, len(self.vocab[category]) + 1, dtype=np.float64)
        p = ranks ** -self.zipf
        return p / p.sum()

    def unigram_profile(self, category: str) -> np.ndarray:
        """Expected within-category token distribution of generated corpora.

        Nouns, modifiers and function words follow the Zipf profile directly;
        verbs are drawn within the agreement class of their subject, so their
        marginal reweights each class by the subject-class probability.
        """
        p = self.zipf_profile(category)
        if category != "verb":
            return p
        noun_class = _class_mass(self.zipf_profile("noun"))
        verb_class = _class_mass(p)
        cls = np.arange(p.size) % 2
        return p * noun_class[cls] / verb_class[cls]


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # "category-tagging" or "agreement-detection"
    positive_rate: float = 0.5

    def __post_init__(self):
        if self.kind not in ("category-tagging", "agreement-detection"):
            raise ValueError(f"unknown task {self.kind!r}")

    @property
    def num_labels(self) -> int:
        return len(CATEGORIES) if self.kind == "category-tagging" else 2

    @property
    def head_kind(self) -> str:
        return "token" if self.kind == "category-tagging" else "sequence"


TAGGING = TaskSpec("category-tagging")
AGREEMENT = TaskSpec("agreement-detection")


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    labels: tuple[int, ...]  # per-token categories, or a single sentence label


def _class_mass(p: np.ndarray) -> np.ndarray:
    cls = np.arange(p.size) % 2
    return np.array([p[cls == 0].sum(), p[cls == 1].sum()])


def _stream_rng(spec: LanguageSpec, stream: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{spec.tag}:{spec.seed}:{stream}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class _Sampler:
    def __init__(self, spec: LanguageSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.ids = {c: np.asarray(spec.vocab[c]) for c in CATEGORIES}
        self.cdf = {c: np.cumsum(spec.zipf_profile(c)) for c in CATEGORIES}

    def draw(self, category: str, agreement_class: int | None = None) -> tuple[int, int]:
        """(token, index within its category list)."""
        cdf = self.cdf[category]
        while True:
            i = min(int(np.searchsorted(cdf, self.rng.random(), side="right")), cdf.size - 1)
            if agreement_class is None or i % 2 == agreement_class:
                return int(self.ids[category][i]), i

    def noun_phrase(self) -> tuple[list[tuple[int, int]], int]:
        s = self.spec
        noun, idx = self.draw("noun")
        mods = [(self.draw("modifier")[0], MOD) for _ in range(int(self.rng.integers(0, s.max_modifiers + 1)))]
        det = (self.draw("function")[0], FUNC)
        core = mods + [(noun, NOUN)] if s.modifier_first else [(noun, NOUN)] + mods
        return ([det] + core if s.function_first else core + [det]), idx % 2

    def clause(self, agree: bool) -> list[tuple[int, int]]:
        subj, cls = self.noun_phrase()
        verb = [(self.draw("verb", cls if agree else 1 - cls)[0], VERB)]
        parts = {"S": subj, "V": verb}
        order = self.spec.clause_order
        if self.rng.random() < self.spec.transitive_rate:
            parts["O"] = self.noun_phrase()[0]
        else:
            order = order.replace("O", "")
        out: list[tuple[int, int]] = []
        for slot in order:
            out.extend(parts[slot])
        return out


def _check_vocab(spec: LanguageSpec, vocab_size: int | None) -> None:
    if vocab_size is not None and spec.max_token >= vocab_size:
        raise ValueError(f"language {spec.tag!r} uses token {spec.max_token} but vocab_size is {vocab_size}")


def generate_corpus(spec: LanguageSpec, sentences: int, stream: str = "corpus",
                    vocab_size: int | None = None) -> list[tuple[int, ...]]:
    """Unlabelled sentences; a pure function of (spec, sentences, stream)."""
    if sentences <= 0:
        raise ValueError("sentences must be positive")
    _check_vocab(spec, vocab_size)
    sampler = _Sampler(spec, _stream_rng(spec, stream))
    return [tuple(t for t, _ in sampler.clause(agree=True)) for _ in range(sentences)]


def generate_task_data(spec: LanguageSpec, task: TaskSpec, examples: int, stream: str = "task",
                       vocab_size: int | None = None) -> list[Example]:
    if examples <= 0:
        raise ValueError("examples must be positive")
    _check_vocab(spec, vocab_size)
    rng = _stream_rng(spec, f"{task.kind}:{stream}")
    sampler = _Sampler(spec, rng)
    out = []
    for _ in range(examples):
        if task.kind == "category-tagging":
            pairs = sampler.clause(agree=True)
            out.append(Example(tuple(t for t, _ in pairs), tuple(c for _, c in pairs)))
        else:
            positive = bool(rng.random() < task.positive_rate)
            pairs = sampler.clause(agree=positive)
            out.append(Example(tuple(t for t, _ in pairs), (int(positive),)))
    return out


def max_sentence_length(spec: LanguageSpec) -> int:
    return 2 * (2 + spec.max_modifiers) + 1


# ---------------------------------------------------------------------------
# suites


@dataclass(frozen=True)
class Suite:
    sources: tuple[LanguageSpec, ...]
    targets: tuple[LanguageSpec, ...]
    shared: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def languages(self) -> tuple[LanguageSpec, ...]:
        return self.sources + self.targets

    def get(self, tag: str) -> LanguageSpec:
        for spec in self.languages:
            if spec.tag == tag:
                return spec
        raise KeyError(f"no language {tag!r} in suite")

    @property
    def vocab_size_needed(self) -> int:
        return max(s.max_token for s in self.languages) + 1


def build_suite(
    n_sources: int = 4,
    n_targets: int = 4,
    shared_fraction: float = 0.1,
    category_sizes: dict[str, int] | None = None,
    seed: int = 0,
) -> Suite:
    """Languages with disjoint vocabularies apart from a shared pool.

    For each category, ``round(shared_fraction * size)`` token ids are common
    to every language; the rest are private. Sources get distinct word-order
    templates; target ``j`` is a relexified sibling of source
    ``j mod n_sources`` (same template, own vocabulary and Zipf exponent).
    """
    if n_sources < 1:
        raise ValueError("a suite needs at least one source language")
    if not 0.0 <= shared_fraction < 1.0:
        raise ValueError("shared_fraction must be in [0, 1)")
    sizes = dict(DEFAULT_CATEGORY_SIZES if category_sizes is None else category_sizes)
    rng = np.random.default_rng([seed, 0x5017])
    next_id = FIRST_WORD_ID
    shared: dict[str, tuple[int, ...]] = {}
    for cat in CATEGORIES:
        n = int(round(shared_fraction * sizes[cat]))
        shared[cat] = tuple(range(next_id, next_id + n))
        next_id += n

    specs = []
    n_total = n_sources + n_targets
    for li in range(n_total):
        vocab = {}
        for cat in CATEGORIES:
            own = sizes[cat] - len(shared[cat])
            ids = list(shared[cat]) + list(range(next_id, next_id + own))
            next_id += own
            # interleave shared ids into the frequency ranking
            perm = rng.permutation(len(ids))
            vocab[cat] = tuple(int(ids[i]) for i in perm)
        is_source = li < n_sources
        # target j reuses the grammar template of source j mod n_sources
        g = li if is_source else (li - n_sources) % n_sources
        specs.append(
            LanguageSpec(
                tag=f"{'src' if is_source else 'tgt'}{li if is_source else li - n_sources}",
                vocab=vocab,
                clause_order=CLAUSE_ORDERS[g % len(CLAUSE_ORDERS)],
                modifier_first=bool(g % 2 == 0),
                function_first=bool((g // 2) % 2 == 0),
                zipf=float(np.round(rng.uniform(0.8, 1.2), 3)),
                seed=seed * 1000 + li,
            )
        )
    return Suite(tuple(specs[:n_sources]), tuple(specs[n_sources:]), shared)


# ---------------------------------------------------------------------------
# text files: space-separated token ids, optional tab + label column


def write_corpus(path: Path, corpus: Iterable[Sequence[int]]) -> None:
    Path(path).write_text("".join(" ".join(map(str, s)) + "\n" for s in corpus), encoding="ascii")


def read_corpus(path: Path) -> list[tuple[int, ...]]:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    return [tuple(int(t) for t in line.split()) for line in lines if line.strip()]


def write_examples(path: Path, examples: Iterable[Example]) -> None:
    Path(path).write_text(
        "".join(" ".join(map(str, e.tokens)) + "\t" + " ".join(map(str, e.labels)) + "\n" for e in examples),
        encoding="ascii",
    )


def read_examples(path: Path) -> list[Example]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        if not line.strip():
            continue
        try:
            toks, labs = line.split("\t")
        except ValueError:
            raise ValueError(f"{path}:{n}: expected '<tokens>\\t<labels>'") from None
        out.append(Example(tuple(int(t) for t in toks.split()), tuple(int(t) for t in labs.split())))
    return out


def with_cls(tokens: Sequence[int]) -> list[int]:
    return [CLS_ID, *tokens]
