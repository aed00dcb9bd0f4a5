"""Lottery-ticket sparse fine-tuning.

Training is carried out in difference space: the optimiser owns a float32
vector ``delta`` and the model is evaluated at ``float32(base + delta)``,
where ``base`` is the pretrained snapshot plus any overlaid diffs summed in
float64. After every update ``delta`` is re-canonicalised against the base,
so at the end of training it *is* ``extract_diff(trained, base)`` and the
returned sparse diff reproduces the trained model bit for bit when applied.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .autodiff import NonFiniteError
from .data import BatchSource
from .model import TrainableModel, forward_loss
from .params import (
    GroupPolicy,
    Mask,
    ParameterSnapshot,
    SparseDiff,
    canonical_delta,
    dense_sum,
)

log = logging.getLogger(__name__)

STRATEGIES = ("lt", "rand", "bitfit")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, phase: str = ""):
        super().__init__(f"non-finite loss at step {step}{f' of {phase}' if phase else ''}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of one (LT-)SFT run.

    ``k`` is the Phase-2 budget in parameters (``None``: every maskable
    parameter). ``lam`` weights the L1 pull towards the starting parameters.
    """

    k: int | None = None
    lam: float = 0.0
    lr: float = 5e-4
    phase1_steps: int = 100
    phase2_steps: int = 100
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    checkpoint: str = "final"
    eval_every: int = 50

    def __post_init__(self):
        if self.k is not None and self.k <= 0:
            raise ValueError("k must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ValueError("step budgets must be non-negative")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.checkpoint not in ("final", "best"):
            raise ValueError(f"unknown checkpoint selection {self.checkpoint!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, total_steps: int, lr0: float) -> float:
    """Linear decay from ``lr0`` at step 0 to 0 at ``total_steps``."""
    return lr0 * (1.0 - step / total_steps) if total_steps else 0.0


def l1_anchor(theta: np.ndarray, theta0: np.ndarray, lam: float, n: int) -> tuple[float, np.ndarray]:
    """``(lam / n) * sum |theta - theta0|`` and its subgradient (sign(0) = 0)."""
    if n <= 0:
        raise ValueError("n must be positive")
    diff = np.asarray(theta, np.float64) - np.asarray(theta0, np.float64)
    c = lam / n
    return c * float(np.abs(diff).sum()), c * np.sign(diff)


class _Adam:
    """AdamW / SGD over a fixed index subset of a flat vector."""

    def __init__(self, size: int, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adamw":
            self.m = np.zeros(size)
            self.v = np.zeros(size)

    def direction(self, g: np.ndarray, params: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        self.t += 1
        if cfg.optimizer == "sgd":
            upd = g
        else:
            self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * g
            self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * g * g
            mhat = self.m / (1 - cfg.beta1**self.t)
            vhat = self.v / (1 - cfg.beta2**self.t)
            upd = mhat / (np.sqrt(vhat) + cfg.eps)
        if cfg.weight_decay:
            upd = upd + cfg.weight_decay * params
        return upd


@dataclass
class FinetuneResult:
    delta: np.ndarray  # float32, canonical w.r.t. the last base
    head: ParameterSnapshot | None
    losses: list[float] = field(default_factory=list)
    dev_losses: list[tuple[int, float]] = field(default_factory=list)
    selected_step: int = 0


class _Bases:
    """float64 base vectors per language tag (pretrained + overlays)."""

    def __init__(self, theta0: ParameterSnapshot, overlays):
        self.theta0 = theta0
        self.overlays = overlays
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, lang: str) -> tuple[np.ndarray, np.ndarray]:
        """(float64 base, float32-rounded base)."""
        if isinstance(self.overlays, Mapping):
            key = lang
            if lang not in self.overlays:
                raise KeyError(f"no overlay registered for language {lang!r}")
            diffs = self.overlays[lang]
        else:
            key = ""
            diffs = self.overlays or ()
        if key not in self._cache:
            b64 = dense_sum(self.theta0, list(diffs))
            self._cache[key] = (b64, b64.astype(np.float32))
        return self._cache[key]


def finetune(
    model: TrainableModel,
    theta0: ParameterSnapshot,
    data: BatchSource,
    cfg: TrainConfig,
    steps: int,
    trainable: np.ndarray,
    head_spec=None,
    overlays: Sequence[SparseDiff] | Mapping[str, Sequence[SparseDiff]] | None = None,
    dev: Sequence | None = None,
    phase: str = "",
) -> FinetuneResult:
    """Train ``delta`` on the coordinates where ``trainable`` is set; the head is always dense.

    ``overlays`` are diffs added to ``theta0`` underneath ``delta`` (a mapping
    selects them per batch language, for multi-source training).
    """
    layout = theta0.layout
    if trainable.shape != (layout.total,):
        raise ValueError("trainable mask does not match theta0")
    idx = np.flatnonzero(trainable)
    bases = _Bases(theta0, overlays)
    delta = np.zeros(layout.total, dtype=np.float32)
    head = model.init_head(head_spec, cfg.seed)
    body_opt = _Adam(idx.size, cfg)
    head_opt = _Adam(head.layout.total, cfg) if head is not None else None
    result = FinetuneResult(delta, head)
    best = (np.inf, delta.copy(), head, 0)

    def dev_loss() -> float:
        total, n = 0.0, 0
        for b in dev:
            b64, _ = bases.get(b.lang)
            snap = ParameterSnapshot(layout, (b64 + delta).astype(np.float32))
            loss, _, _ = forward_loss(model, snap, head, b)
            total += loss
            n += 1
        return total / max(n, 1)

    for t in range(steps):
        batch = data.batch_at(t, cfg.seed)
        b64, b32 = bases.get(batch.lang)
        params = (b64 + delta).astype(np.float32)
        try:
            loss, g, hg = forward_loss(model, ParameterSnapshot(layout, params), head, batch, (cfg.seed, t))
        except NonFiniteError:
            raise TrainingDiverged(t, phase) from None
        if cfg.lam:
            penalty, g_l1 = l1_anchor(params, b32, cfg.lam, layout.total)
            loss += penalty
            g = g + g_l1
        result.losses.append(loss)
        lr = lr_at(t, steps, cfg.lr)

        if idx.size:
            step_vec = -lr * body_opt.direction(g[idx], params[idx].astype(np.float64))
            proposed = (delta[idx].astype(np.float64) + step_vec).astype(np.float32)
            target = (b64[idx] + proposed).astype(np.float32)
            delta[idx] = canonical_delta(target, b64[idx])
        if head is not None:
            hv = head.values.astype(np.float64)
            head = head.replace((hv - lr * head_opt.direction(hg, hv)).astype(np.float32))
            if not np.all(np.isfinite(head.values)):
                raise TrainingDiverged(t, phase)

        if cfg.checkpoint == "best" and dev and ((t + 1) % cfg.eval_every == 0 or t + 1 == steps):
            dl = dev_loss()
            result.dev_losses.append((t + 1, dl))
            if dl < best[0]:
                best = (dl, delta.copy(), head, t + 1)

    if cfg.checkpoint == "best" and dev and steps:
        _, result.delta, result.head, result.selected_step = best
    else:
        result.delta, result.head, result.selected_step = delta, head, steps
    return result


def select_mask(
    theta0: ParameterSnapshot | None,
    theta1: ParameterSnapshot | None,
    strategy: str,
    k: int | None,
    maskable: Mask,
    *,
    bias: Mask | None = None,
    seed: int = 0,
    scores: np.ndarray | None = None,
) -> Mask:
    """Choose the Phase-2 trainable set.

    ``lt``: top-k of |theta1 - theta0| over maskable parameters, ties going
    to the lower flat index. ``rand``: k maskable parameters uniformly without
    replacement. ``bitfit``: every maskable bias parameter (k is ignored).
    ``scores`` may replace |theta1 - theta0| when the caller already holds it.
    """
    layout = maskable.layout
    cand = maskable.indices()
    if strategy == "bitfit":
        if bias is None:
            raise ValueError("bitfit needs the bias-parameter mask")
        return Mask(layout, maskable.bits & bias.bits)
    k = cand.size if k is None else int(k)
    if k > cand.size:
        raise ValueError(f"budget k={k} exceeds the {cand.size} maskable parameters")
    if k < 0:
        raise ValueError("k must be non-negative")
    if strategy == "rand":
        pick = np.random.default_rng([seed, 0xB0B]).choice(cand, size=k, replace=False)
        return Mask.from_indices(layout, pick)
    if strategy != "lt":
        raise ValueError(f"unknown strategy {strategy!r}")
    if scores is None:
        if theta0 is None or theta1 is None:
            raise ValueError("lottery-ticket selection needs theta0 and theta1")
        layout.check(theta0.layout)
        layout.check(theta1.layout)
        scores = np.abs(theta1.values.astype(np.float64) - theta0.values.astype(np.float64))
    # stable sort keeps ascending flat order among equal scores
    order = np.argsort(-scores[cand], kind="stable")
    return Mask.from_indices(layout, cand[order[:k]])


def bias_mask(model: TrainableModel) -> Mask:
    tags = model.tags()
    bits = np.zeros(model.layout.total, dtype=bool)
    for name, _, sl in model.layout.spans():
        bits[sl] = tags[name] == "bias"
    return Mask(model.layout, bits)


@dataclass
class LtSftResult:
    diff: SparseDiff
    head: ParameterSnapshot | None
    mask: Mask
    phase1: FinetuneResult | None
    phase2: FinetuneResult

    def trained(self, theta0: ParameterSnapshot, overlays: Sequence[SparseDiff] = ()) -> ParameterSnapshot:
        return ParameterSnapshot(theta0.layout, dense_sum(theta0, [*overlays, self.diff]).astype(np.float32))


def lt_sft(
    model: TrainableModel,
    data: BatchSource,
    theta0: ParameterSnapshot,
    cfg: TrainConfig,
    strategy: str = "lt",
    policy: GroupPolicy = GroupPolicy(),
    head_spec=None,
    overlays: Sequence[SparseDiff] | Mapping[str, Sequence[SparseDiff]] | None = None,
    dev: Sequence | None = None,
) -> LtSftResult:
    """Phase 1 (full fine-tune), mask selection, rewind, Phase 2 (masked fine-tune).

    The returned diff is relative to ``theta0`` plus ``overlays``.
    """
    maskable = policy.maskable(model.layout, model.tags())
    theta0.layout.check(model.layout)
    phase1 = None
    if strategy == "lt":
        phase1 = finetune(model, theta0, data, cfg, cfg.phase1_steps, maskable.bits, head_spec, overlays, dev, "phase 1")
        mask = select_mask(None, None, "lt", cfg.k, maskable, scores=np.abs(phase1.delta.astype(np.float64)))
    else:
        # random and bias-only selection ignore Phase 1 entirely
        mask = select_mask(None, None, strategy, cfg.k, maskable, bias=bias_mask(model), seed=cfg.seed)
    phase2 = finetune(model, theta0, data, cfg, cfg.phase2_steps, mask.bits, head_spec, overlays, dev, "phase 2")
    meta = {"strategy": strategy, "k": int(mask.popcount), "seed": cfg.seed}
    diff = SparseDiff.from_dense(theta0.layout, phase2.delta, meta)
    log.info("%s-SFT: k=%d nnz=%d final loss %.4f", strategy, mask.popcount, diff.nnz,
             phase2.losses[-1] if phase2.losses else float("nan"))
    return LtSftResult(diff, phase2.head, mask, phase1, phase2)


def full_finetune(
    model: TrainableModel,
    data: BatchSource,
    theta0: ParameterSnapshot,
    cfg: TrainConfig,
    steps: int,
    policy: GroupPolicy = GroupPolicy(),
    head_spec=None,
    overlays=None,
    dev=None,
) -> tuple[ParameterSnapshot, ParameterSnapshot | None]:
    """Unconstrained (all maskable parameters) fine-tuning; returns (trained body, head)."""
    maskable = policy.maskable(model.layout, model.tags())
    r = finetune(model, theta0, data, cfg, steps, maskable.bits, head_spec, overlays, dev)
    b64 = dense_sum(theta0, list(overlays or ()))
    return ParameterSnapshot(theta0.layout, (b64 + r.delta).astype(np.float32)), r.head


def phase1_full_finetune(model, theta0, data, cfg, policy=GroupPolicy(), head_spec=None, overlays=None, dev=None):
    return full_finetune(model, data, theta0, cfg, cfg.phase1_steps, policy, head_spec, overlays, dev)


def phase2_masked_finetune(model, theta0, mask: Mask, data, cfg, head_spec=None, overlays=None, dev=None
                           ) -> tuple[SparseDiff, ParameterSnapshot | None]:
    theta0.layout.check(mask.layout, "mask")
    r = finetune(model, theta0, data, cfg, cfg.phase2_steps, mask.bits, head_spec, overlays, dev, "phase 2")
    return SparseDiff.from_dense(theta0.layout, r.delta), r.head


def pretrain(model, data: BatchSource, seed: int, steps: int, lr: float = 2e-3, batch_size: int = 16
             ) -> ParameterSnapshot:
    """Dense MLM training of every parameter from a fresh initialisation."""
    init = model.init_params(seed)
    cfg = TrainConfig(lr=lr, seed=seed, batch_size=batch_size)
    r = finetune(model, init, data, cfg, steps, np.ones(init.layout.total, dtype=bool), phase="pretraining")
    return init.replace((init.values.astype(np.float64) + r.delta).astype(np.float32))


def with_budget(cfg: TrainConfig, k: int | None) -> TrainConfig:
    return replace(cfg, k=k)
