"""End-to-end acceptance gate.

Each test checks one acceptance criterion at its stated tolerance and records
a PASS/FAIL line through the ``verdict`` fixture; the lines are repeated in the
terminal summary. The transfer criteria (6-8) share one pretrained model and
take several CPU-minutes; run ``pytest -m "not slow"`` to skip them.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np
import pytest

from ltsft import autodiff as ad
from ltsft.analysis import expected_random_overlap, overlap_matrix
from ltsft.cli import main
from ltsft.data import ExampleStream, MlmConfig, MultiSourceStream
from ltsft.model import CLS_ID, HeadSpec, MicroTransformer, ModelSpec, mlm_corrupt, pad_batch
from ltsft.params import (
    DecodeError,
    GroupPolicy,
    Layout,
    ParameterSnapshot,
    SparseDiff,
    apply_diffs,
    deserialize_diff,
    extract_diff,
    serialize_diff,
)
from ltsft.synth import TAGGING, build_suite, generate_corpus, generate_task_data
from ltsft.train import TrainConfig, full_finetune, l1_anchor, lt_sft, pretrain, select_mask
from ltsft.transfer import evaluate, language_config, train_language_sft, train_task_sft, zero_shot_apply

GROUPS = ("input-embedding", "position-embedding", "attention", "ffn", "bias", "layer-norm", "output-embedding")


# ---------------------------------------------------------------------------
# 1. mask selection against a brute-force oracle


def sort_oracle(theta0: np.ndarray, theta1: np.ndarray, maskable: np.ndarray, k: int) -> set[int]:
    score = {i: abs(float(theta1[i]) - float(theta0[i])) for i in range(len(theta0)) if maskable[i]}
    return set(sorted(score, key=lambda i: (-score[i], i))[:k])


def random_layout(rng) -> tuple[Layout, dict[str, str]]:
    n = int(rng.integers(1, 6))
    shapes = {f"t{j}": tuple(int(d) for d in rng.integers(1, 9, size=int(rng.integers(1, 3)))) for j in range(n)}
    while sum(int(np.prod(s)) for s in shapes.values()) > 1000:
        shapes.popitem()
    layout = Layout.from_shapes(shapes)
    return layout, {name: str(rng.choice(GROUPS)) for name in layout.names}


def test_mask_selection_matches_sort_oracle(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches, ties = 0, 0
    for _ in range(200):
        layout, tags = random_layout(rng)
        excluded = frozenset(g for g in GROUPS if rng.random() < 0.3)
        maskable = GroupPolicy(excluded).maskable(layout, tags)
        t0 = rng.normal(size=layout.total).astype(np.float32)
        # coarse deltas force many exactly tied scores, zeros included
        t1 = (t0 + rng.integers(-3, 4, size=layout.total) * np.float32(0.25)).astype(np.float32)
        k = int(rng.integers(0, maskable.popcount + 1))
        got = select_mask(ParameterSnapshot(layout, t0), ParameterSnapshot(layout, t1), "lt", k, maskable)
        want = sort_oracle(t0, t1, maskable.bits, k)
        mismatches += set(got.indices().tolist()) != want
        scores = np.abs(t1.astype(np.float64) - t0)[maskable.bits]
        ties += len(scores) - len(np.unique(scores))
    elapsed = time.perf_counter() - start
    verdict(1, "mask selection equals sort oracle", mismatches == 0 and ties > 0 and elapsed < 5.0,
            f"{mismatches}/200 mismatches, {ties} tied scores, {elapsed:.2f}s (limit 5s)")


# ---------------------------------------------------------------------------
# 2. off-mask invariance


def test_off_mask_parameters_are_untouched(tiny, verdict):
    m = tiny.model
    maskable = GroupPolicy().maskable(m.layout, m.tags())
    overlay = lt_sft(m, tiny.mlm_stream("src1"), tiny.theta0,
                     TrainConfig(k=200, lr=1e-2, phase1_steps=2, phase2_steps=2, seed=9)).diff
    rng = np.random.default_rng(7)
    failures = []
    for case in range(24):
        strategy = ("lt", "rand", "bitfit")[case % 3]
        tagging = rng.random() < 0.5
        cfg = TrainConfig(
            k=int(rng.integers(0, maskable.popcount + 1)), lam=float(rng.choice([0.0, 0.1, 1.0])),
            lr=float(rng.choice([1e-3, 1e-2, 5e-2])), phase1_steps=int(rng.integers(1, 4)),
            phase2_steps=int(rng.integers(1, 4)), seed=int(rng.integers(0, 1000)),
            optimizer=str(rng.choice(["adamw", "sgd"])), weight_decay=float(rng.choice([0.0, 0.01])))
        data = tiny.tagging_stream("src0") if tagging else tiny.mlm_stream("tgt0")
        overlays = [overlay] if rng.random() < 0.5 else []
        r = lt_sft(m, data, tiny.theta0, cfg, strategy, head_spec=HeadSpec("token", 4) if tagging else None,
                   overlays=overlays)
        base = apply_diffs(tiny.theta0, overlays).values
        trained = r.trained(tiny.theta0, overlays).values
        off = ~r.mask.bits
        budget = r.mask.popcount if strategy == "bitfit" else cfg.k
        ok = (np.array_equal(trained[off].view(np.uint32), base[off].view(np.uint32))
              and not (r.diff.support().bits & off).any()
              and r.diff.nnz / m.layout.total <= budget / m.layout.total)
        if not ok:
            failures.append(case)
    verdict(2, "off-mask invariance", not failures, f"24 configs, failing cases {failures}")


# ---------------------------------------------------------------------------
# 3. full-mask equivalence


def test_full_budget_equals_unconstrained_finetuning(tiny, verdict):
    m = tiny.model
    maskable = GroupPolicy().maskable(m.layout, m.tags())
    checks = []
    for data, head in ((tiny.mlm_stream("tgt0"), None), (tiny.tagging_stream("src0"), HeadSpec("token", 4))):
        cfg = TrainConfig(k=maskable.popcount, lam=0.1, lr=5e-3, phase1_steps=5, phase2_steps=6, seed=11,
                          checkpoint="final")
        r = lt_sft(m, data, tiny.theta0, cfg, head_spec=head)
        body, trained_head = full_finetune(m, data, tiny.theta0, cfg, cfg.phase2_steps, head_spec=head)
        checks.append(r.diff == extract_diff(body, tiny.theta0) and r.head == trained_head)
    verdict(3, "full-mask LT-SFT equals unconstrained run", all(checks), f"mlm, tagging: {checks}")


# ---------------------------------------------------------------------------
# 4. composition


def loop_oracle(theta0: ParameterSnapshot, diffs) -> np.ndarray:
    acc = [float(v) for v in theta0.values]
    for d in diffs:
        for i, v in zip(d.indices.tolist(), d.deltas.tolist()):
            acc[i] += v
    return np.array(acc, dtype=np.float64)


def test_composition_matches_dense_oracle(tiny, verdict):
    m = tiny.model
    lang = train_language_sft(m, tiny.theta0, tiny.corpus("tgt0"), "tgt0",
                              language_config(k=300, lr=1e-2, phase1_steps=4, phase2_steps=4, seed=1))
    task, _ = train_task_sft(m, tiny.theta0, {"src0": tiny.tagging("src0")}, TAGGING,
                             TrainConfig(k=300, lr=1e-2, phase1_steps=4, phase2_steps=4, seed=2))
    pairs = [(task.diff, lang.diff)]
    rng = np.random.default_rng(4)
    for _ in range(10):
        dense = [rng.normal(scale=10.0 ** rng.integers(-6, 2), size=m.layout.total).astype(np.float32)
                 * (rng.random(m.layout.total) < 0.3) for _ in range(2)]
        pairs.append(tuple(SparseDiff.from_dense(m.layout, d) for d in dense))
    worst, symmetric = 0.0, True
    for phi_t, phi_l in pairs:
        got = apply_diffs(tiny.theta0, [phi_t, phi_l]).values
        oracle = loop_oracle(tiny.theta0, [phi_t, phi_l])
        half_ulp = np.spacing(np.abs(oracle).astype(np.float32)).astype(np.float64) / 2
        worst = max(worst, float(np.max(np.abs(got - oracle) / half_ulp)))
        flipped = apply_diffs(tiny.theta0, [phi_l, phi_t]).values
        symmetric &= np.array_equal(got.view(np.uint32), flipped.view(np.uint32))
    verdict(4, "composition matches 64-bit oracle and is order-invariant", worst <= 1.0 + 1e-9 and symmetric,
            f"worst error {worst:.3f} half-ulps over {len(pairs)} pairs, order-invariant {symmetric}")


# ---------------------------------------------------------------------------
# 5. gradient fidelity


def weighted(out: ad.Tensor, seed: int = 5) -> ad.Tensor:
    return ad.total(ad.mul(out, np.random.default_rng(seed).normal(size=out.shape)))


def op_cases(rng):
    """(name, f, point) for every differentiable op, at random small shapes."""
    m, k, n = (int(d) for d in rng.integers(1, 5, size=3))
    a, b, v = rng.normal(size=(m, k)), rng.normal(size=(k, n)), rng.normal(size=k)
    h = int(rng.integers(2, 6))
    x, g, beta = rng.normal(size=(m, h)), rng.normal(size=h), rng.normal(size=h)
    classes = int(rng.integers(2, 6))
    targets = rng.integers(0, classes, size=m)
    table, ids = rng.normal(size=(5, 3)), rng.integers(0, 5, size=(2, 3))
    cube, stack = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 3))
    return [
        ("add", lambda t: weighted(ad.add(a, t)), v),
        ("sub", lambda t: weighted(ad.sub(a, t)), v),
        ("mul", lambda t: weighted(ad.mul(t, v)), a),
        ("scale", lambda t: weighted(ad.scale(t, -1.7)), a),
        ("tanh", lambda t: weighted(ad.tanh(t)), a * 2),
        ("gelu", lambda t: weighted(ad.gelu(t)), a * 2),
        ("reshape", lambda t: weighted(ad.reshape(t, (-1,))), a),
        ("transpose", lambda t: weighted(ad.transpose(t, (1, 0))), a),
        ("slice_rows", lambda t: weighted(ad.slice_rows(t, 0, max(1, m // 2))), a),
        ("select", lambda t: weighted(ad.select(t, 1, axis=1)), cube),
        ("matmul", lambda t: weighted(ad.matmul(t, b)), a),
        ("batched matmul", lambda t: weighted(ad.matmul(t, stack)), cube),
        ("total", lambda t: ad.total(ad.mul(t, t)), a),
        ("layer_norm", lambda t: weighted(ad.layer_norm(t, ad.Tensor(g), ad.Tensor(beta))), x),
        ("layer_norm gain", lambda t: weighted(ad.layer_norm(ad.Tensor(x), t, ad.Tensor(beta))), g),
        ("softmax", lambda t: weighted(ad.softmax(t, axis=-1)), x),
        ("softmax_cross_entropy", lambda t: ad.softmax_cross_entropy(t, targets), rng.normal(size=(m, classes))),
        ("embedding_lookup", lambda t: weighted(ad.embedding_lookup(t, ids)), table),
        ("dropout", lambda t: weighted(ad.dropout(t, 0.3, (3, 1, "x"))), a),
    ]


def test_gradients_match_finite_differences(verdict):
    worst = {}
    for seed in range(5):
        for name, f, point in op_cases(np.random.default_rng(seed)):
            e32 = ad.grad_check(f, point.astype(np.float32), step=1e-3)
            e64 = ad.grad_check(f, point.astype(np.float64), step=1e-5)
            w32, w64 = worst.get(name, (0.0, 0.0))
            worst[name] = (max(w32, e32), max(w64, e64))

    spec = ModelSpec(vocab_size=12, hidden_size=8, layers=1, heads=2, ffn_size=12, max_seq_len=6)
    model = MicroTransformer(spec)
    batch, _ = mlm_corrupt(pad_batch([[CLS_ID, 5, 6, 7, 8], [CLS_ID, 9, 4]]), 0.5, seed=3, vocab_size=12)
    theta = model.init_params(0).values.astype(np.float64) * 3

    def mlm(x):
        params = {name: ad.reshape(ad.slice_rows(x, sl.start, sl.stop), shape)
                  for name, shape, sl in model.layout.spans()}
        return model.loss(x.tape, params, None, batch, (4, 1))

    worst["full MLM loss"] = (ad.grad_check(mlm, theta.astype(np.float32), 1e-3), ad.grad_check(mlm, theta, 1e-5))

    rng = np.random.default_rng(0)
    theta0 = rng.normal(size=40)
    offset = rng.normal(size=40)
    offset[np.abs(offset) < 0.05] = 0.3  # at least 5 steps away from every kink

    def anchor_err(step):
        theta = theta0 + offset
        _, g = l1_anchor(theta, theta0, 0.7, 40)
        err = 0.0
        for i in range(40):
            e = np.zeros(40)
            e[i] = step
            num = (l1_anchor(theta + e, theta0, 0.7, 40)[0] - l1_anchor(theta - e, theta0, 0.7, 40)[0]) / (2 * step)
            err = max(err, abs(num - g[i]) / max(1.0, abs(g[i])))
        return err

    worst["l1_anchor"] = (anchor_err(1e-3), anchor_err(1e-5))
    bad = {k: v for k, v in worst.items() if not (v[0] < 1e-3 and v[1] < 1e-6)}
    top32 = max(v[0] for v in worst.values())
    top64 = max(v[1] for v in worst.values())
    verdict(5, "gradients match finite differences", not bad,
            f"{len(worst)} checks, worst 32-bit {top32:.1e} (tol 1e-3), worst 64-bit {top64:.1e} (tol 1e-6), "
            f"failing {sorted(bad)}")


# ---------------------------------------------------------------------------
# 6-8. transfer experiments on the default synthetic suite

SEEDS = range(5)
LANG_SENTENCES, TASK_EXAMPLES, TEST_EXAMPLES = 1000, 500, 300
LANG_CFG = language_config(lr=2e-3, phase1_steps=200, phase2_steps=200, batch_size=8)
TASK_CFG = TrainConfig(lr=2e-3, phase1_steps=100, phase2_steps=200, batch_size=8)
DENSITY = 0.05


def pretrain_suite(suite, steps, source_sentences=1000, target_sentences=50):
    model = MicroTransformer(ModelSpec(vocab_size=suite.vocab_size_needed, max_seq_len=16))
    mlm = MlmConfig(vocab_size=suite.vocab_size_needed)
    sources = {s.tag for s in suite.sources}
    streams = {s.tag: ExampleStream(generate_corpus(s, source_sentences if s.tag in sources else target_sentences,
                                                    "pretrain"), "mlm", 16, s.tag, mlm)
               for s in suite.languages}
    return model, pretrain(model, MultiSourceStream(streams), seed=0, steps=steps, lr=2e-3)


@dataclass
class World:
    suite: object
    model: MicroTransformer
    theta0: ParameterSnapshot
    k: int
    cpu_seconds: float

    def corpus(self, tag):
        return generate_corpus(self.suite.get(tag), LANG_SENTENCES, "lang")

    def task_data(self, tag):
        return generate_task_data(self.suite.get(tag), TAGGING, TASK_EXAMPLES, "task")

    def test_data(self, tag):
        return generate_task_data(self.suite.get(tag), TAGGING, TEST_EXAMPLES, "test")


@pytest.fixture(scope="session")
def world():
    start = time.process_time()
    suite = build_suite()
    model, theta0 = pretrain_suite(suite, steps=8000)
    return World(suite, model, theta0, int(DENSITY * model.layout.total), time.process_time() - start)


@dataclass
class Transfer:
    scores: dict  # (configuration, seed) -> {target: score}
    languages: dict  # seed -> {tag: LanguageArtifact} for the lt strategy
    cpu_seconds: float


def score_targets(world, task_art, languages, targets, test):
    out = {}
    for t in targets:
        target = None if languages is None else languages[t]
        out[t] = evaluate(world.model, zero_shot_apply(world.theta0, task_art, target), task_art.head, test[t], TAGGING)
    return out


@pytest.fixture(scope="session")
def orderings(world):
    """Single-source transfer from src0 for each strategy, composed and task-only."""
    start = time.process_time()
    targets = tuple(s.tag for s in world.suite.targets)
    corpora = {t: world.corpus(t) for t in ("src0", *targets)}
    test = {t: world.test_data(t) for t in targets}
    data = {"src0": world.task_data("src0")}
    scores, lt_langs = {}, {}
    for seed in SEEDS:
        lang_cfg = replace(LANG_CFG, k=world.k, seed=seed)
        task_cfg = replace(TASK_CFG, k=world.k, seed=seed)
        for strategy in ("lt", "rand", "bitfit"):
            langs = {t: train_language_sft(world.model, world.theta0, corpora[t], t, lang_cfg, strategy)
                     for t in corpora}
            art, _ = train_task_sft(world.model, world.theta0, data, TAGGING, task_cfg, langs, strategy)
            scores[strategy, seed] = score_targets(world, art, langs, targets, test)
            if strategy == "lt":
                scores["ta-only", seed] = score_targets(world, art, None, targets, test)
                lt_langs[seed] = langs
    return Transfer(scores, lt_langs, time.process_time() - start)


def mean_score(scores, configuration):
    return float(np.mean([np.mean(list(v.values())) for (c, _), v in scores.items() if c == configuration]))


@pytest.mark.slow
def test_transfer_orderings(world, orderings, verdict):
    means = {c: mean_score(orderings.scores, c) for c in ("lt", "ta-only", "rand", "bitfit")}
    minutes = (world.cpu_seconds + orderings.cpu_seconds) / 60
    ok = (means["lt"] >= means["ta-only"] and means["lt"] >= means["rand"]
          and means["lt"] >= means["bitfit"] and means["rand"] >= means["bitfit"] and minutes < 30)
    detail = ", ".join(f"{c} {v:.1f}" for c, v in means.items())
    verdict(6, "composed LT >= TA-only, LT >= rand, LT and rand >= bitfit", ok,
            f"mean over {len(SEEDS)} seeds x 4 targets: {detail}; {minutes:.1f} CPU-min incl. pretraining (limit 30)")


@pytest.mark.slow
def test_multi_source_beats_single_source(world, orderings, verdict):
    targets = tuple(s.tag for s in world.suite.targets)
    sources = tuple(s.tag for s in world.suite.sources)
    test = {t: world.test_data(t) for t in targets}
    data = {s: world.task_data(s) for s in sources}
    multi = {}
    for seed in SEEDS:
        langs = dict(orderings.languages[seed])
        cfg = replace(LANG_CFG, k=world.k, seed=seed)
        for s in sources:
            if s not in langs:
                langs[s] = train_language_sft(world.model, world.theta0, world.corpus(s), s, cfg)
        art, _ = train_task_sft(world.model, world.theta0, data, TAGGING, replace(TASK_CFG, k=world.k, seed=seed),
                                langs)
        multi["multi", seed] = score_targets(world, art, langs, targets, test)
    single, many = mean_score(orderings.scores, "lt"), mean_score(multi, "multi")
    verdict(7, "multi-source >= single-source on unseen targets", many >= single,
            f"mean over {len(SEEDS)} seeds x {len(targets)} targets: multi ({'+'.join(sources)}) {many:.1f}, "
            f"single (src0) {single:.1f}")


@pytest.mark.slow
def test_language_mask_overlap(world, orderings, verdict):
    langs = orderings.languages[0]
    cfg = replace(LANG_CFG, k=world.k, seed=0)
    again = train_language_sft(world.model, world.theta0, world.corpus("tgt0"), "tgt0-again", cfg)
    mat = overlap_matrix([langs["tgt0"], again, langs["tgt1"], langs["src0"]])
    identical = mat.values[0, 1]
    shape_ok = np.array_equal(mat.values, mat.values.T) and np.all(np.diag(mat.values) == 100.0)

    # two languages with no shared vocabulary, on their own pretrained model
    disjoint = build_suite(n_sources=2, n_targets=0, shared_fraction=0.0)
    model, theta0 = pretrain_suite(disjoint, steps=2000)
    k = int(DENSITY * model.layout.total)
    arts = [train_language_sft(model, theta0, generate_corpus(s, LANG_SENTENCES, "lang"), s.tag,
                               replace(LANG_CFG, k=k, seed=0)) for s in disjoint.sources]
    apart = overlap_matrix(arts).values[0, 1]
    maskable = GroupPolicy().maskable(model.layout, model.tags()).popcount
    baseline = expected_random_overlap(k, maskable)
    ok = identical == 100.0 and shape_ok and apart < baseline + 10
    verdict(8, "mask overlap: identical runs 100, disjoint vocabularies near random", ok,
            f"identical {identical:.1f}; disjoint pair {apart:.1f} vs random baseline {baseline:.1f} + 10; "
            f"symmetric with diagonal 100: {shape_ok}")


# ---------------------------------------------------------------------------
# 9. container fuzzing

SPECIALS = np.float32([np.finfo(np.float32).max, -np.finfo(np.float32).max, np.finfo(np.float32).tiny,
                       np.float32(1e-45), -np.float32(1e-45), 1.0, -1.0])


def random_diff(rng) -> SparseDiff:
    shapes = {f"p{j}.w": tuple(int(d) for d in rng.integers(1, 7, size=int(rng.integers(1, 4))))
              for j in range(int(rng.integers(1, 6)))}
    layout = Layout.from_shapes(shapes)
    dense = rng.normal(scale=10.0 ** rng.integers(-8, 8), size=layout.total).astype(np.float32)
    special = rng.random(layout.total) < 0.1
    dense[special] = rng.choice(SPECIALS, size=int(special.sum()))
    dense[rng.random(layout.total) < rng.random()] = 0
    meta = {"language": "".join(rng.choice(list("abcxyz-_ "), size=int(rng.integers(0, 8)))),
            "seed": int(rng.integers(0, 2**31)), "density": float(rng.random())}
    return SparseDiff.from_dense(layout, dense, meta)


def corrupt(blob: bytes, rng) -> bytes:
    mode = int(rng.integers(0, 4))
    if mode == 0:
        return blob[: int(rng.integers(0, len(blob)))]
    if mode == 1:
        return blob + bytes(rng.integers(0, 256, size=int(rng.integers(1, 5)), dtype=np.uint8))
    data = bytearray(blob)
    i = int(rng.integers(0, len(data)))
    if mode == 2:
        data[i] ^= 1 << int(rng.integers(0, 8))
    else:
        data[i] = (data[i] + int(rng.integers(1, 256))) % 256
    return bytes(data)


def test_container_fuzz_round_trip_and_corruption(verdict):
    rng = np.random.default_rng(99)
    inexact, undetected = 0, 0
    for _ in range(1000):
        d = random_diff(rng)
        blob = serialize_diff(d)
        back = deserialize_diff(blob)
        same = (back == d and back.meta == d.meta and serialize_diff(back) == blob
                and np.array_equal(back.indices, d.indices)
                and np.array_equal(back.deltas.view(np.uint32), d.deltas.view(np.uint32)))
        inexact += not same
        try:
            deserialize_diff(corrupt(blob, rng))
            undetected += 1
        except DecodeError:
            pass
    verdict(9, "container fuzz: bit-exact round trip, corruption always rejected", inexact == 0 and undetected == 0,
            f"1000 cases: {inexact} inexact round trips, {undetected} corruptions decoded")


# ---------------------------------------------------------------------------
# 10. CLI reproducibility

CLI_CONFIG = {
    "data": {"pretrain_sentences": 60, "pretrain_target_sentences": 10, "lang_sentences": 40,
             "task_examples": 30, "test_examples": 20},
    "model": {"hidden_size": 8, "ffn_size": 16, "heads": 2, "layers": 1},
    "pretrain": {"steps": 20},
    "lang": {"phase1_steps": 4, "phase2_steps": 4},
    "task": {"phase1_steps": 4, "phase2_steps": 4},
    "sweep": {"task_levels": [0.02, 0.1], "lang_levels": [0.05], "seeds": [0, 1], "targets": ["tgt0"]},
}

CLI_COMMANDS = [
    ["gen-data"],
    ["pretrain"],
    ["train-lang", "--lang", "src0"],
    ["train-lang", "--lang", "tgt0"],
    ["train-task", "--source", "src0"],
    ["compose", "--lang", "tgt0"],
    ["eval", "--lang", "tgt0"],
    ["eval", "--lang", "tgt0", "--ta-only", "--metric", "span-f1"],
    ["overlap", "--langs", "src0,tgt0"],
    ["sweep-density"],
]


def cli_run(root, config, capsys) -> list[str]:
    stdout = []
    for cmd in CLI_COMMANDS:
        assert main([*cmd, "--config", str(config), "--out-dir", str(root)]) == 0, capsys.readouterr().err
        stdout.append(capsys.readouterr().out)
    return stdout


def snapshot_dir(root) -> dict[str, bytes | dict]:
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            rel = str(p.relative_to(root))
            if rel.startswith("manifests/"):
                manifest = json.loads(p.read_text())
                manifest.pop("wall_clock_seconds")
                files[rel] = manifest
            else:
                files[rel] = p.read_bytes()
    return files


def test_cli_reruns_are_bitwise_identical(tmp_path, capsys, verdict):
    config = tmp_path / "config.json"
    config.write_text(json.dumps(CLI_CONFIG))
    out_a = cli_run(tmp_path / "a", config, capsys)
    out_b = cli_run(tmp_path / "b", config, capsys)
    a, b = snapshot_dir(tmp_path / "a"), snapshot_dir(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    artifacts = sum(not k.startswith("manifests/") for k in a)
    ok = not differing and out_a == out_b and artifacts > 10
    verdict(10, "CLI reruns give identical artifacts and metrics", ok,
            f"{artifacts} artifacts + {len(a) - artifacts} manifests compared, differing {differing}, "
            f"stdout metrics identical {out_a == out_b}")
