"""``ltsft`` command-line interface.

Every command works inside a run directory (``--out-dir``)::

    data/        suite.json, <tag>.pretrain.txt, <tag>.corpus.txt, <tag>.<task>.{train,test}.tsv
    model/       theta0.snp
    langs/       <tag>.sft, <tag>.mask
    tasks/       <task>.sft, <task>.head, <task>.mask
    composed/    *.snp
    metrics/     *.tsv
    manifests/   <command>[-<tag>].json

Artifacts and metrics are pure functions of the resolved config and seeds;
wall-clock time is recorded only in manifests. Failures print one JSON line
on stderr and exit with a code from ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, synth
from .data import ExampleStream, MlmConfig, MultiSourceStream
from .model import HeadSpec, MicroTransformer, ModelSpec
from .params import (
    DecodeError,
    FingerprintMismatch,
    GroupPolicy,
    ParameterSnapshot,
    SparseDiff,
    apply_diffs,
    deserialize_diff,
    deserialize_mask,
    deserialize_snapshot,
    diff_density,
    read_manifest,
    serialize_diff,
    serialize_mask,
    serialize_snapshot,
)
from .train import TrainConfig, TrainingDiverged, pretrain
from .transfer import LanguageArtifact, evaluate, train_language_sft, train_task_sft

EXIT_CODES = {
    "usage": 2,
    "missing-file": 3,
    "fingerprint-mismatch": 4,
    "decode-error": 5,
    "config-error": 6,
    "training-error": 7,
}

DEFAULTS: dict = {
    "seed": 0,
    "suite": {"n_sources": 4, "n_targets": 4, "shared_fraction": 0.1, "seed": 0},
    "data": {
        "pretrain_sentences": 1000,
        "pretrain_target_sentences": 50,
        "lang_sentences": 1000,
        "task_examples": 500,
        "test_examples": 300,
    },
    "model": {"hidden_size": 64, "layers": 2, "heads": 4, "ffn_size": 128, "max_seq_len": 16, "dropout": 0.1},
    "pretrain": {"steps": 8000, "lr": 2e-3, "batch_size": 16},
    "lang": {"budget_k": 0.05, "lambda": 0.1, "lr": 2e-3, "phase1_steps": 200, "phase2_steps": 200,
             "batch_size": 8, "strategy": "lt"},
    "task": {"task": "category-tagging", "budget_k": 0.05, "lambda": 0.0, "lr": 2e-3, "phase1_steps": 100,
             "phase2_steps": 200, "batch_size": 8, "strategy": "lt", "cap": None},
    "sweep": {"task_levels": [0.02, 0.05, 0.1], "lang_levels": [0.02, 0.05, 0.1], "seeds": [0],
              "sources": ["src0"], "targets": None},
}

log = logging.getLogger("ltsft")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind

    @property
    def code(self) -> int:
        return EXIT_CODES[self.kind]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# ---------------------------------------------------------------------------
# config


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise CliError("config-error", f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliError("config-error", f"config key {path + key!r} must be an object")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        raw = _read_bytes(Path(args.config))
        try:
            loaded = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CliError("config-error", f"config is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise CliError("config-error", "config must be a JSON object")
        cfg = _merge(cfg, loaded)
    if args.seed is not None:
        cfg["seed"] = args.seed
    section = {"train-lang": "lang", "train-task": "task"}.get(args.command)
    if section:
        if args.budget_k is not None:
            cfg[section]["budget_k"] = _parse_budget(args.budget_k)
        if args.lam is not None:
            cfg[section]["lambda"] = args.lam
        if args.strategy is not None:
            cfg[section]["strategy"] = args.strategy
    return cfg


def _parse_budget(raw: str) -> int | float:
    try:
        value = int(raw)
    except ValueError:
        try:
            value = float(raw)
        except ValueError:
            raise CliError("config-error", f"--budget-k must be a count or a fraction, got {raw!r}") from None
        if not 0.0 < value <= 1.0:
            raise CliError("config-error", f"fractional --budget-k must be in (0, 1], got {raw!r}")
        return value
    if value < 1:
        raise CliError("config-error", f"--budget-k count must be positive, got {raw!r}")
    return value


def _budget(value, model: MicroTransformer, policy: GroupPolicy) -> int:
    maskable = policy.maskable(model.layout, model.tags()).popcount
    if isinstance(value, float):
        return analysis.budget_for_density(value, model.layout.total, maskable)
    if not isinstance(value, int) or value < 1:
        raise CliError("config-error", f"budget_k must be a positive count or a fraction, got {value!r}")
    if value > maskable:
        raise CliError("config-error", f"budget_k={value} exceeds the {maskable} maskable parameters")
    return value


def _train_config(section: dict, k: int, seed: int) -> TrainConfig:
    if section["strategy"] not in ("lt", "rand", "bitfit"):
        raise CliError("config-error", f"unknown strategy {section['strategy']!r}")
    try:
        return TrainConfig(k=k, lam=float(section["lambda"]), lr=float(section["lr"]),
                           phase1_steps=int(section["phase1_steps"]), phase2_steps=int(section["phase2_steps"]),
                           batch_size=int(section["batch_size"]), seed=seed)
    except (TypeError, ValueError) as exc:
        raise CliError("config-error", str(exc)) from None


def _task_spec(cfg: dict) -> synth.TaskSpec:
    try:
        return synth.TaskSpec(cfg["task"]["task"])
    except ValueError as exc:
        raise CliError("config-error", str(exc)) from None


# ---------------------------------------------------------------------------
# run directory


class Run:
    def __init__(self, root: Path, command: str, cfg: dict):
        self.root = root
        self.command = command
        self.cfg = cfg
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.metrics: dict = {}
        self.started = time.perf_counter()

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def _rel(self, p: Path) -> str:
        try:
            return str(p.resolve().relative_to(self.root.resolve()))
        except ValueError:
            return str(p)

    def read(self, p: Path) -> bytes:
        data = _read_bytes(p)
        self.inputs[self._rel(p)] = hashlib.sha256(data).hexdigest()
        return data

    def write(self, p: Path, data: bytes | str) -> None:
        if isinstance(data, str):
            data = data.encode("ascii")
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(p)
        self.outputs[self._rel(p)] = hashlib.sha256(data).hexdigest()

    def finish(self, name: str) -> dict:
        manifest = {
            "command": self.command,
            "config": self.cfg,
            "seeds": {"seed": self.cfg["seed"]},
            "inputs": self.inputs,
            "outputs": self.outputs,
            "metrics": self.metrics,
            "wall_clock_seconds": round(time.perf_counter() - self.started, 3),
        }
        p = self.path("manifests", f"{name}.json")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="ascii")
        return manifest

    # typed loaders -----------------------------------------------------------

    def suite(self) -> dict:
        try:
            return json.loads(self.read(self.path("data", "suite.json")))
        except json.JSONDecodeError as exc:
            raise CliError("decode-error", f"data/suite.json: {exc}") from None

    def model_and_theta0(self) -> tuple[MicroTransformer, ParameterSnapshot]:
        data = self.read(self.path("model", "theta0.snp"))
        spec = ModelSpec(**read_manifest(data)["meta"]["model"])
        model = MicroTransformer(spec)
        theta0 = deserialize_snapshot(data)
        model.layout.check(theta0.layout, "pretrained checkpoint")
        return model, theta0

    def diff(self, p: Path, model: MicroTransformer) -> SparseDiff:
        d = deserialize_diff(self.read(p))
        model.layout.check(d.layout, str(p))
        return d

    def head(self, p: Path) -> tuple[ParameterSnapshot, HeadSpec]:
        data = self.read(p)
        meta = read_manifest(data)["meta"]
        return deserialize_snapshot(data), HeadSpec(meta["head_kind"], int(meta["num_labels"]))


def _read_bytes(p: Path) -> bytes:
    try:
        return Path(p).read_bytes()
    except FileNotFoundError:
        raise CliError("missing-file", f"no such file: {p}") from None
    except IsADirectoryError:
        raise CliError("missing-file", f"expected a file, found a directory: {p}") from None


def _corpus(run: Run, tag: str, kind: str) -> list[tuple[int, ...]]:
    p = run.path("data", f"{tag}.{kind}.txt")
    run.read(p)
    return synth.read_corpus(p)


def _examples(run: Run, tag: str, task: synth.TaskSpec, split: str) -> list[synth.Example]:
    p = run.path("data", f"{tag}.{task.kind}.{split}.tsv")
    run.read(p)
    try:
        return synth.read_examples(p)
    except ValueError as exc:
        raise CliError("decode-error", str(exc)) from None


def _tags(raw: str | None, default: Sequence[str]) -> list[str]:
    if raw is None:
        return list(default)
    tags = [t for t in raw.split(",") if t]
    if not tags:
        raise CliError("config-error", "empty language list")
    return tags


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(run: Run, args) -> dict:
    s, d = run.cfg["suite"], run.cfg["data"]
    try:
        suite = synth.build_suite(int(s["n_sources"]), int(s["n_targets"]), float(s["shared_fraction"]),
                                  seed=int(s["seed"]))
    except (TypeError, ValueError) as exc:
        raise CliError("config-error", str(exc)) from None
    desc = {
        "vocab_size": suite.vocab_size_needed,
        "sources": [x.tag for x in suite.sources],
        "targets": [x.tag for x in suite.targets],
        "languages": {x.tag: {**asdict(x), "vocab": {c: list(v) for c, v in x.vocab.items()}}
                      for x in suite.languages},
    }
    run.write(run.path("data", "suite.json"), json.dumps(desc, indent=1, sort_keys=True) + "\n")
    for spec in suite.languages:
        n_pre = d["pretrain_sentences"] if spec in suite.sources else d["pretrain_target_sentences"]
        run.write(run.path("data", f"{spec.tag}.pretrain.txt"), _corpus_text(synth.generate_corpus(spec, n_pre, "pretrain")))
        run.write(run.path("data", f"{spec.tag}.corpus.txt"), _corpus_text(synth.generate_corpus(spec, d["lang_sentences"], "lang")))
        for task in (synth.TAGGING, synth.AGREEMENT):
            for split, n in (("train", d["task_examples"]), ("test", d["test_examples"])):
                exs = synth.generate_task_data(spec, task, n, "task" if split == "train" else "test")
                run.write(run.path("data", f"{spec.tag}.{task.kind}.{split}.tsv"), _examples_text(exs))
    run.metrics = {"languages": len(suite.languages), "vocab_size": suite.vocab_size_needed}
    return run.metrics


def _corpus_text(corpus) -> str:
    return "".join(" ".join(map(str, s)) + "\n" for s in corpus)


def _examples_text(examples) -> str:
    return "".join(" ".join(map(str, e.tokens)) + "\t" + " ".join(map(str, e.labels)) + "\n" for e in examples)


def cmd_pretrain(run: Run, args) -> dict:
    suite = run.suite()
    mc, pc = run.cfg["model"], run.cfg["pretrain"]
    try:
        spec = ModelSpec(vocab_size=int(suite["vocab_size"]), **mc)
    except (TypeError, ValueError) as exc:
        raise CliError("config-error", f"model: {exc}") from None
    model = MicroTransformer(spec)
    mlm = MlmConfig(vocab_size=spec.vocab_size)
    streams = {tag: ExampleStream(_corpus(run, tag, "pretrain"), "mlm", int(pc["batch_size"]), tag, mlm)
               for tag in sorted(suite["languages"])}
    theta0 = pretrain(model, MultiSourceStream(streams), run.cfg["seed"], int(pc["steps"]), float(pc["lr"]))
    run.write(run.path("model", "theta0.snp"), serialize_snapshot(theta0, {"model": asdict(spec)}))
    run.metrics = {"total_params": theta0.layout.total}
    return run.metrics


def cmd_train_lang(run: Run, args) -> dict:
    if not args.lang:
        raise CliError("usage", "train-lang needs --lang")
    model, theta0 = run.model_and_theta0()
    sec = run.cfg["lang"]
    policy = GroupPolicy()
    cfg = _train_config(sec, _budget(sec["budget_k"], model, policy), run.cfg["seed"])
    corpus = _corpus(run, args.lang, "corpus")
    art = train_language_sft(model, theta0, corpus, args.lang, cfg, sec["strategy"], policy)
    run.write(run.path("langs", f"{args.lang}.sft"), serialize_diff(art.diff))
    run.write(run.path("langs", f"{args.lang}.mask"), serialize_mask(art.mask, {"language": args.lang}))
    run.metrics = {"entries": art.diff.nnz, "density": diff_density(art.diff), "k": cfg.k,
                   "final_loss": art.manifest["final_loss"]}
    return run.metrics


def cmd_train_task(run: Run, args) -> dict:
    model, theta0 = run.model_and_theta0()
    suite = run.suite()
    task = _task_spec(run.cfg)
    sec = run.cfg["task"]
    policy = GroupPolicy()
    sources = _tags(args.source, suite["sources"][:1])
    cfg = _train_config(sec, _budget(sec["budget_k"], model, policy), run.cfg["seed"])
    languages = {}
    if not args.no_source_sft:
        paths = [Path(p) for p in args.source_sft] if args.source_sft else \
            [run.path("langs", f"{s}.sft") for s in sources]
        if len(paths) != len(sources):
            raise CliError("usage", "give one --source-sft per source language")
        languages = {s: LanguageArtifact(s, run.diff(p, model)) for s, p in zip(sources, paths)}
    datasets = {s: _examples(run, s, task, "train") for s in sources}
    art, _ = train_task_sft(model, theta0, datasets, task, cfg, languages, sec["strategy"], policy, sec["cap"])
    run.write(run.path("tasks", f"{task.kind}.sft"), serialize_diff(art.diff))
    run.write(run.path("tasks", f"{task.kind}.mask"), serialize_mask(art.mask, {"task": task.kind}))
    head_meta = {"head_kind": art.head_spec.kind, "num_labels": art.head_spec.num_labels, "task": task.kind,
                 "sources": list(art.sources)}
    run.write(run.path("tasks", f"{task.kind}.head"), serialize_snapshot(art.head, head_meta))
    run.metrics = {"entries": art.diff.nnz, "density": diff_density(art.diff), "k": cfg.k,
                   "final_loss": art.manifest["final_loss"], "sources": sources}
    return run.metrics


def _composition(run: Run, args, model, task_kind: str, lang: str | None) -> tuple[list[SparseDiff], str]:
    task_path = Path(args.task_sft) if args.task_sft else run.path("tasks", f"{task_kind}.sft")
    diffs = [run.diff(task_path, model)]
    if args.ta_only:
        if args.target_sft:
            raise CliError("usage", "--ta-only and --target-sft are mutually exclusive")
        return diffs, "ta-only"
    if args.target_sft:
        target_path = Path(args.target_sft)
    elif lang:
        target_path = run.path("langs", f"{lang}.sft")
    else:
        raise CliError("usage", "give --target-sft, --lang or --ta-only")
    diffs.append(run.diff(target_path, model))
    return diffs, "composed"


def cmd_compose(run: Run, args) -> dict:
    model, theta0 = run.model_and_theta0()
    task = _task_spec(run.cfg)
    diffs, mode = _composition(run, args, model, task.kind, args.lang)
    composed = apply_diffs(theta0, diffs)
    out = Path(args.out) if args.out else run.path("composed", f"{task.kind}-{args.lang or 'custom'}-{mode}.snp")
    run.write(out, serialize_snapshot(composed, {"model": asdict(model.spec), "mode": mode}))
    run.metrics = {"mode": mode, "output": run._rel(out)}
    return run.metrics


def cmd_eval(run: Run, args) -> dict:
    if not args.lang:
        raise CliError("usage", "eval needs --lang (the test language)")
    model, theta0 = run.model_and_theta0()
    task = _task_spec(run.cfg)
    head, head_spec = run.head(Path(args.head) if args.head else run.path("tasks", f"{task.kind}.head"))
    if head_spec.kind != task.head_kind:
        raise CliError("config-error", f"head is for {head_spec.kind!r} outputs, task needs {task.head_kind!r}")
    if args.model:
        snap = deserialize_snapshot(run.read(Path(args.model)))
        theta0.layout.check(snap.layout, "composed model")
        mode = "model"
    else:
        diffs, mode = _composition(run, args, model, task.kind, args.lang)
        snap = apply_diffs(theta0, diffs)
    examples = _examples(run, args.lang, task, "test")
    try:
        score = evaluate(model, snap, head, examples, task, args.metric)
    except ValueError as exc:
        raise CliError("config-error", str(exc)) from None
    name = f"eval-{task.kind}-{args.lang}-{mode}"
    run.write(run.path("metrics", f"{name}.tsv"),
              f"task\tlanguage\tconfiguration\tmetric\tscore\n{task.kind}\t{args.lang}\t{mode}\t{args.metric}\t{score:.6f}\n")
    run.metrics = {"score": score, "metric": args.metric, "configuration": mode, "language": args.lang}
    return run.metrics


def cmd_sweep(run: Run, args) -> dict:
    model, theta0 = run.model_and_theta0()
    suite = run.suite()
    task = _task_spec(run.cfg)
    sw = run.cfg["sweep"]
    if args.levels:
        try:
            levels = [float(x) for x in args.levels.split(",")]
        except ValueError:
            raise CliError("config-error", f"bad --levels {args.levels!r}") from None
        sw = {**sw, "task_levels": levels, "lang_levels": levels}
    sources = list(sw["sources"])
    targets = list(sw["targets"] or suite["targets"])
    lang_sec, task_sec = run.cfg["lang"], run.cfg["task"]
    setup = analysis.TransferSetup(
        model=model, theta0=theta0, task=task, sources=tuple(sources), targets=tuple(targets),
        corpora={t: _corpus(run, t, "corpus") for t in sources + targets},
        task_data={s: _examples(run, s, task, "train") for s in sources},
        test_data={t: _examples(run, t, task, "test") for t in targets},
        lang_cfg=_train_config(lang_sec, None, run.cfg["seed"]),
        task_cfg=_train_config(task_sec, None, run.cfg["seed"]),
        strategy=task_sec["strategy"],
    )
    try:
        grid = analysis.density_sweep(setup, sw["task_levels"], sw["lang_levels"], [int(s) for s in sw["seeds"]])
    except ValueError as exc:
        raise CliError("config-error", str(exc)) from None
    run.write(run.path("metrics", "density.tsv"), grid.to_tsv())
    run.metrics = {"cells": len(grid.cells), "failed": sum(c.metric is None for c in grid.cells)}
    return run.metrics


def cmd_overlap(run: Run, args) -> dict:
    if args.langs:
        tags = _tags(args.langs, [])
    else:
        tags = sorted(p.stem for p in run.path("langs").glob("*.mask"))
        if not tags:
            raise CliError("missing-file", f"no language masks under {run.path('langs')}")
    arts = []
    for t in tags:
        mask = deserialize_mask(run.read(run.path("langs", f"{t}.mask")))
        arts.append(LanguageArtifact(t, SparseDiff.empty(mask.layout), mask))
    try:
        matrix = analysis.overlap_matrix(arts)
    except FingerprintMismatch:
        raise
    except ValueError as exc:
        raise CliError("config-error", str(exc)) from None
    run.write(run.path("metrics", "overlap.tsv"), matrix.to_tsv())
    run.metrics = {"languages": tags}
    return run.metrics


def cmd_inspect(args) -> dict:
    data = _read_bytes(Path(args.path))
    manifest = read_manifest(data)
    kind = manifest.get("kind")
    if kind == "sft":
        d = deserialize_diff(data)
        return {"kind": kind, "entries": d.nnz, "density": diff_density(d), "total_params": d.layout.total,
                "fingerprint": d.fingerprint, "tensors": {n: int(i.size) for n, i, _ in d.per_tensor()},
                "meta": d.meta}
    if kind == "mask":
        m = deserialize_mask(data)
        return {"kind": kind, "entries": m.popcount, "density": m.popcount / m.layout.total,
                "total_params": m.layout.total, "fingerprint": m.fingerprint, "meta": manifest.get("meta", {})}
    s = deserialize_snapshot(data)
    return {"kind": kind, "total_params": s.layout.total, "fingerprint": s.fingerprint,
            "meta": manifest.get("meta", {})}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-lang": cmd_train_lang,
    "train-task": cmd_train_task,
    "compose": cmd_compose,
    "eval": cmd_eval,
    "sweep-density": cmd_sweep,
    "overlap": cmd_overlap,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ltsft", description="Lottery-ticket sparse fine-tuning toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file (overrides built-in defaults)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", default="run", help="run directory (default: ./run)")

    def training(p):
        p.add_argument("--budget-k", help="trainable parameter budget: a count, or a fraction of all parameters")
        p.add_argument("--lambda", dest="lam", type=float, help="L1 anchor weight")
        p.add_argument("--strategy", choices=("lt", "rand", "bitfit"))

    def composition(p):
        p.add_argument("--task-sft")
        p.add_argument("--target-sft")
        p.add_argument("--ta-only", action="store_true", help="apply the task SFT alone")
        p.add_argument("--lang", help="target language tag")

    common(sub.add_parser("gen-data", help="generate the synthetic suite"))
    common(sub.add_parser("pretrain", help="MLM-pretrain the reference model"))
    p = sub.add_parser("train-lang", help="train a language SFT")
    common(p), training(p)
    p.add_argument("--lang", required=True)
    p = sub.add_parser("train-task", help="train a task SFT on source language(s)")
    common(p), training(p)
    p.add_argument("--source", help="comma-separated source languages (several = multi-source)")
    p.add_argument("--source-sft", action="append", help="source language SFT file (repeat per source)")
    p.add_argument("--no-source-sft", action="store_true", help="train on the bare pretrained model")
    p = sub.add_parser("compose", help="write theta0 + task SFT (+ language SFT)")
    common(p), composition(p)
    p.add_argument("--out")
    p = sub.add_parser("eval", help="evaluate a composed model on a test language")
    common(p), composition(p)
    p.add_argument("--model", help="evaluate this snapshot instead of composing")
    p.add_argument("--head")
    p.add_argument("--metric", choices=("accuracy", "span-f1"), default="accuracy")
    p = sub.add_parser("sweep-density", help="task x language density grid")
    common(p)
    p.add_argument("--levels", help="comma-separated densities for both axes")
    p = sub.add_parser("overlap", help="pairwise overlap of language masks")
    common(p)
    p.add_argument("--langs", help="comma-separated language tags (default: every mask in langs/)")
    p = sub.add_parser("inspect-sft", help="describe an SFT, mask or snapshot file")
    p.add_argument("path")
    return parser


def _manifest_name(args) -> str:
    tag = getattr(args, "lang", None) or getattr(args, "source", None)
    return f"{args.command}-{tag.replace(',', '+')}" if tag else args.command


def run_command(argv: Sequence[str]) -> dict:
    args = build_parser().parse_args(list(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, stream=sys.stderr,
                        format="%(message)s")
    if args.command == "inspect-sft":
        return cmd_inspect(args)
    cfg = resolve_config(args)
    run = Run(Path(args.out_dir), args.command, cfg)
    COMMANDS[args.command](run, args)
    run.finish(_manifest_name(args))
    return run.metrics


def _classify(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, FingerprintMismatch):
        return CliError("fingerprint-mismatch", str(exc))
    if isinstance(exc, DecodeError):
        return CliError("decode-error", str(exc))
    if isinstance(exc, FileNotFoundError):
        return CliError("missing-file", str(exc))
    if isinstance(exc, TrainingDiverged):
        return CliError("training-error", str(exc))
    if isinstance(exc, (ValueError, KeyError, TypeError)):
        return CliError("config-error", f"{type(exc).__name__}: {exc}")
    raise exc


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        result = run_command(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        err = _classify(exc)
        print(json.dumps({"error": err.kind, "code": err.code, "message": str(err)}), file=sys.stderr)
        return err.code
    print(json.dumps(result, sort_keys=True, default=_jsonable))
    return 0


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj).__name__)


if __name__ == "__main__":
    sys.exit(main())
