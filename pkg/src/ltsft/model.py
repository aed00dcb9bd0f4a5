"""Micro transformer encoder with MLM, token- and sequence-classification heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .params import FingerprintMismatch, Layout, ParameterSnapshot

PAD_ID, CLS_ID, MASK_ID, UNK_ID = 0, 1, 2, 3
FIRST_WORD_ID = 4
IGNORE = -100

GROUP_TAGS = (
    "input-embedding",
    "output-embedding",
    "layer-norm",
    "bias",
    "attention",
    "ffn",
    "head",
)

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelSpec:
    vocab_size: int = 512
    hidden_size: int = 64
    layers: int = 2
    heads: int = 4
    ffn_size: int = 128
    max_seq_len: int = 32
    tie_output_embedding: bool = False
    dropout: float = 0.1

    def __post_init__(self):
        for field in ("vocab_size", "hidden_size", "layers", "heads", "ffn_size", "max_seq_len"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.vocab_size <= FIRST_WORD_ID:
            raise ValueError(f"vocab_size must exceed the {FIRST_WORD_ID} special tokens")
        if self.hidden_size % self.heads:
            raise ValueError("hidden_size must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class HeadSpec:
    kind: str  # "token" or "sequence"
    num_labels: int

    def __post_init__(self):
        if self.kind not in ("token", "sequence"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.num_labels < 2:
            raise ValueError("a classification head needs at least 2 labels")


@dataclass(frozen=True)
class Batch:
    """Token ids (B, S), attention mask (B, S) and labels.

    ``kind`` selects the loss: ``mlm`` and ``token`` take (B, S) labels with
    ``IGNORE`` at unsupervised positions, ``sequence`` takes (B,) labels.
    """

    ids: np.ndarray
    attention: np.ndarray
    labels: np.ndarray
    kind: str = "token"
    lang: str = ""

    def __post_init__(self):
        if self.ids.shape != self.attention.shape or self.ids.ndim != 2:
            raise ValueError("ids and attention must both be (batch, seq)")
        want = self.ids.shape[:1] if self.kind == "sequence" else self.ids.shape
        if self.labels.shape != want:
            raise ValueError(f"{self.kind} labels must have shape {want}, got {self.labels.shape}")


def pad_batch(rows: Sequence[Sequence[int]], labels=None, kind: str = "token", lang: str = "") -> Batch:
    """Right-pad variable-length rows into a Batch."""
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    att = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        att[i, : len(r)] = True
    if kind == "sequence":
        lab = np.asarray(labels, dtype=np.int64)
    elif labels is None:
        lab = np.full(ids.shape, IGNORE, dtype=np.int64)
    else:
        lab = np.full(ids.shape, IGNORE, dtype=np.int64)
        for i, r in enumerate(labels):
            lab[i, : len(r)] = r
    return Batch(ids, att, lab, kind, lang)


class TrainableModel(Protocol):
    """What the sparse fine-tuning engine needs from a model."""

    layout: Layout

    def tags(self) -> Mapping[str, str]: ...

    def init_head(self, head_spec, seed: int) -> ParameterSnapshot | None: ...

    def loss(self, tape: ad.Tape, params: Mapping[str, ad.Tensor], head: Mapping[str, ad.Tensor] | None,
             batch, dropout_key: tuple[int, int] | None) -> ad.Tensor: ...


def forward_loss(model: TrainableModel, snapshot: ParameterSnapshot, head: ParameterSnapshot | None,
                 batch, dropout_key: tuple[int, int] | None = None,
                 ) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Loss and float64 gradients (flat, aligned with the snapshot and head)."""
    if snapshot.fingerprint != model.layout.fingerprint:
        raise FingerprintMismatch(model.layout.fingerprint, snapshot.fingerprint, "model body")
    tape = ad.Tape()
    body = {name: tape.leaf(arr, name) for name, arr in snapshot.items()}
    hp = {name: tape.leaf(arr, name) for name, arr in head.items()} if head is not None else None
    loss = model.loss(tape, body, hp, batch, dropout_key)
    if not np.isfinite(loss.item()):
        raise ad.NonFiniteError("non-finite loss")
    tape.backward(loss)

    def flatten(leaves, layout):
        g = np.zeros(layout.total)
        for name, _, sl in layout.spans():
            if leaves[name].grad is not None:
                g[sl] = leaves[name].grad.reshape(-1)
        return g

    head_grad = flatten(hp, head.layout) if head is not None else None
    return loss.item(), flatten(body, snapshot.layout), head_grad


class MicroTransformer:
    """Pre-LN transformer encoder; input and output embeddings decoupled by default."""

    def __init__(self, spec: ModelSpec = ModelSpec()):
        self.spec = spec
        self._shapes, self._tags = self._parameter_table()
        self.layout = Layout.from_shapes(self._shapes)

    def _parameter_table(self):
        s = self.spec
        h = s.hidden_size
        shapes: dict[str, tuple[int, ...]] = {}
        tags: dict[str, str] = {}

        def add(name, shape, tag):
            shapes[name] = shape
            tags[name] = tag

        add("embed.token", (s.vocab_size, h), "input-embedding")
        add("embed.position", (s.max_seq_len, h), "input-embedding")
        for i in range(s.layers):
            p = f"layer{i}"
            for ln in ("ln1", "ln2"):
                add(f"{p}.{ln}.weight", (h,), "layer-norm")
                add(f"{p}.{ln}.bias", (h,), "layer-norm")
            for proj in ("q", "k", "v", "o"):
                add(f"{p}.attn.{proj}.weight", (h, h), "attention")
                add(f"{p}.attn.{proj}.bias", (h,), "bias")
            add(f"{p}.ffn.in.weight", (h, s.ffn_size), "ffn")
            add(f"{p}.ffn.in.bias", (s.ffn_size,), "bias")
            add(f"{p}.ffn.out.weight", (s.ffn_size, h), "ffn")
            add(f"{p}.ffn.out.bias", (h,), "bias")
        add("final_ln.weight", (h,), "layer-norm")
        add("final_ln.bias", (h,), "layer-norm")
        if not s.tie_output_embedding:
            add("mlm.decoder.weight", (s.vocab_size, h), "output-embedding")
        add("mlm.decoder.bias", (s.vocab_size,), "output-embedding")
        return shapes, tags

    def tags(self) -> dict[str, str]:
        return dict(self._tags)

    def group_sizes(self) -> dict[str, int]:
        """Body parameter count per group (groups without parameters omitted)."""
        sizes: dict[str, int] = {}
        for name, shape in self._shapes.items():
            sizes[self._tags[name]] = sizes.get(self._tags[name], 0) + int(np.prod(shape))
        return {g: sizes[g] for g in GROUP_TAGS if g in sizes}

    def init_params(self, seed: int) -> ParameterSnapshot:
        rng = np.random.default_rng(seed)
        arrays = {}
        for name in self.layout.names:
            shape = self._shapes[name]
            if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "final_ln.weight":
                arrays[name] = np.ones(shape, np.float32)
            elif name.endswith(".bias"):
                arrays[name] = np.zeros(shape, np.float32)
            else:
                arrays[name] = (rng.standard_normal(shape) * INIT_STD).astype(np.float32)
        return ParameterSnapshot.from_arrays(arrays)

    def head_shapes(self, head_spec: HeadSpec) -> dict[str, tuple[int, ...]]:
        h = self.spec.hidden_size
        shapes = {"head.out.weight": (h, head_spec.num_labels), "head.out.bias": (head_spec.num_labels,)}
        if head_spec.kind == "sequence":
            shapes.update({"head.dense.weight": (h, h), "head.dense.bias": (h,)})
        return shapes

    def init_head(self, head_spec: HeadSpec | None, seed: int) -> ParameterSnapshot | None:
        """Fresh head parameters; identical for identical seeds."""
        if head_spec is None:
            return None
        rng = np.random.default_rng([seed, 0x4EAD])
        arrays = {}
        for name, shape in sorted(self.head_shapes(head_spec).items()):
            if name.endswith(".bias"):
                arrays[name] = np.zeros(shape, np.float32)
            else:
                arrays[name] = (rng.standard_normal(shape) * INIT_STD).astype(np.float32)
        return ParameterSnapshot.from_arrays(arrays)

    # -- forward ---------------------------------------------------------

    def encode(self, tape: ad.Tape, p: Mapping[str, ad.Tensor], batch: Batch,
               dropout_key: tuple[int, int] | None) -> ad.Tensor:
        s = self.spec
        B, S = batch.ids.shape
        if S > s.max_seq_len:
            raise ad.ShapeError(f"sequence length {S} exceeds max_seq_len {s.max_seq_len}")
        if batch.ids.max() >= s.vocab_size:
            raise ad.ShapeError("token id exceeds vocab_size")
        nh, dh = s.heads, s.hidden_size // s.heads

        def drop(x, where):
            key = None if dropout_key is None else (dropout_key[0], dropout_key[1], where)
            return ad.dropout(x, s.dropout, key)

        x = ad.embedding_lookup(p["embed.token"], batch.ids)
        x = ad.add(x, ad.slice_rows(p["embed.position"], 0, S))
        x = drop(x, "embed")
        pad_bias = tape.constant(np.where(batch.attention, 0.0, -1e9)[:, None, None, :])

        def heads_first(t):
            return ad.transpose(ad.reshape(t, (B, S, nh, dh)), (0, 2, 1, 3))

        for i in range(s.layers):
            pre = f"layer{i}"
            h = ad.layer_norm(x, p[f"{pre}.ln1.weight"], p[f"{pre}.ln1.bias"])
            q, k, v = (
                heads_first(ad.add(ad.matmul(h, p[f"{pre}.attn.{n}.weight"]), p[f"{pre}.attn.{n}.bias"]))
                for n in "qkv"
            )
            scores = ad.add(ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh)), pad_bias)
            ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, S, s.hidden_size))
            attn = ad.add(ad.matmul(ctx, p[f"{pre}.attn.o.weight"]), p[f"{pre}.attn.o.bias"])
            x = ad.add(x, drop(attn, f"{pre}.attn"))
            h = ad.layer_norm(x, p[f"{pre}.ln2.weight"], p[f"{pre}.ln2.bias"])
            f = ad.gelu(ad.add(ad.matmul(h, p[f"{pre}.ffn.in.weight"]), p[f"{pre}.ffn.in.bias"]))
            f = ad.add(ad.matmul(f, p[f"{pre}.ffn.out.weight"]), p[f"{pre}.ffn.out.bias"])
            x = ad.add(x, drop(f, f"{pre}.ffn"))
        return ad.layer_norm(x, p["final_ln.weight"], p["final_ln.bias"])

    def logits(self, tape, p, head, batch, dropout_key=None) -> tuple[ad.Tensor, np.ndarray]:
        """(logits, targets) for the supervised rows of ``batch``."""
        x = self.encode(tape, p, batch, dropout_key)
        B, S = batch.ids.shape
        hsz = self.spec.hidden_size
        if batch.kind == "mlm":
            targets = batch.labels.reshape(-1)
            rows = np.flatnonzero(targets != IGNORE)
            picked = ad.embedding_lookup(ad.reshape(x, (B * S, hsz)), rows)
            dec = p["embed.token"] if self.spec.tie_output_embedding else p["mlm.decoder.weight"]
            out = ad.add(ad.matmul(picked, ad.transpose(dec, (1, 0))), p["mlm.decoder.bias"])
            return out, targets[rows]
        if head is None:
            raise ValueError(f"a {batch.kind} batch needs a classification head")
        if batch.kind == "token":
            flat = ad.reshape(x, (B * S, hsz))
            return ad.add(ad.matmul(flat, head["head.out.weight"]), head["head.out.bias"]), batch.labels.reshape(-1)
        if batch.kind == "sequence":
            first = ad.select(x, 0, axis=1)
            hidden = ad.tanh(ad.add(ad.matmul(first, head["head.dense.weight"]), head["head.dense.bias"]))
            return ad.add(ad.matmul(hidden, head["head.out.weight"]), head["head.out.bias"]), batch.labels
        raise ValueError(f"unknown batch kind {batch.kind!r}")

    def loss(self, tape, params, head, batch, dropout_key=None) -> ad.Tensor:
        if batch.kind == "mlm" and not np.any(batch.labels != IGNORE):
            return tape.constant(0.0)
        out, targets = self.logits(tape, params, head, batch, dropout_key)
        return ad.softmax_cross_entropy(out, targets, IGNORE)

    def predict(self, snapshot: ParameterSnapshot, head: ParameterSnapshot | None, batch: Batch) -> np.ndarray:
        """Argmax predictions shaped like ``batch.labels`` (no dropout)."""
        tape = ad.Tape()
        p = {n: tape.leaf(a, n, requires_grad=False) for n, a in snapshot.items()}
        hp = {n: tape.leaf(a, n, requires_grad=False) for n, a in head.items()} if head is not None else None
        out, _ = self.logits(tape, p, hp, batch)
        pred = out.data.argmax(axis=-1)
        if batch.kind == "mlm":
            full = np.full(batch.labels.size, IGNORE, dtype=np.int64)
            full[np.flatnonzero(batch.labels.reshape(-1) != IGNORE)] = pred
            return full.reshape(batch.labels.shape)
        return pred.reshape(batch.labels.shape)


def mlm_corrupt(batch: Batch, mask_fraction: float, seed: int, vocab_size: int) -> tuple[Batch, np.ndarray]:
    """BERT-style corruption: select ~mask_fraction of word tokens; 80% -> [MASK], 10% random, 10% kept.

    Returns the corrupted batch (labels hold the original ids at selected
    positions) and the (row, col) target positions.
    """
    if not 0.0 < mask_fraction < 1.0:
        raise ValueError("mask_fraction must be in (0, 1)")
    rng = np.random.default_rng([seed, 0x3A5C])
    eligible = batch.attention & (batch.ids >= FIRST_WORD_ID)
    chosen = eligible & (rng.random(batch.ids.shape) < mask_fraction)
    action = rng.random(batch.ids.shape)
    randoms = rng.integers(FIRST_WORD_ID, vocab_size, size=batch.ids.shape)
    ids = batch.ids.copy()
    ids[chosen & (action < 0.8)] = MASK_ID
    swap = chosen & (action >= 0.8) & (action < 0.9)
    ids[swap] = randoms[swap]
    labels = np.where(chosen, batch.ids, IGNORE)
    return Batch(ids, batch.attention, labels, "mlm", batch.lang), np.argwhere(chosen)
