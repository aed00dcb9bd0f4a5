import json
import shutil

import pytest

from ltsft.cli import EXIT_CODES, main
from ltsft.params import SparseDiff, deserialize_diff, serialize_diff

SMALL = {
    "data": {"pretrain_sentences": 40, "pretrain_target_sentences": 10, "lang_sentences": 30,
             "task_examples": 24, "test_examples": 16},
    "model": {"hidden_size": 8, "ffn_size": 16, "heads": 2, "layers": 1},
    "pretrain": {"steps": 10},
    "lang": {"phase1_steps": 3, "phase2_steps": 3},
    "task": {"phase1_steps": 3, "phase2_steps": 3},
    "sweep": {"task_levels": [0.05], "lang_levels": [0.05], "seeds": [0], "targets": ["tgt0"]},
}

PIPELINE = [
    ["gen-data"],
    ["pretrain"],
    ["train-lang", "--lang", "src0"],
    ["train-lang", "--lang", "tgt0"],
    ["train-task", "--source", "src0"],
    ["eval", "--lang", "tgt0"],
]


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_pipeline(capsys, root, config):
    for cmd in PIPELINE:
        code, out, err = cli(capsys, *cmd, "--config", config, "--out-dir", root)
        assert code == 0, err
    return json.loads(out)


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "config.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, config):
    root = tmp_path_factory.mktemp("run")
    for cmd in PIPELINE:
        assert main([*cmd, "--config", str(config), "--out-dir", str(root)]) == 0
    return root


def error_of(err: str) -> dict:
    lines = err.strip().splitlines()
    assert len(lines) == 1, err
    return json.loads(lines[0])


def test_pipeline_layout_and_metrics(run_dir):
    for rel in ("data/suite.json", "model/theta0.snp", "langs/src0.sft", "langs/tgt0.mask", "tasks/category-tagging.sft",
                "tasks/category-tagging.head", "metrics/eval-category-tagging-tgt0-composed.tsv"):
        assert (run_dir / rel).is_file(), rel
    manifests = sorted(p.name for p in (run_dir / "manifests").iterdir())
    assert manifests == ["eval-tgt0.json", "gen-data.json", "pretrain.json", "train-lang-src0.json",
                         "train-lang-tgt0.json", "train-task-src0.json"]
    m = json.loads((run_dir / "manifests" / "train-task-src0.json").read_text())
    assert {"command", "config", "seeds", "inputs", "outputs", "wall_clock_seconds", "metrics"} <= set(m)
    assert "langs/src0.sft" in m["inputs"] and "tasks/category-tagging.sft" in m["outputs"]


def test_compose_then_eval_equals_direct_eval(run_dir, config, capsys):
    base = ["--config", config, "--out-dir", run_dir]
    code, _, err = cli(capsys, "compose", "--lang", "tgt0", "--out", run_dir / "composed" / "x.snp", *base)
    assert code == 0, err
    _, direct, _ = cli(capsys, "eval", "--lang", "tgt0", *base)
    code, via, err = cli(capsys, "eval", "--lang", "tgt0", "--model", run_dir / "composed" / "x.snp", *base)
    assert code == 0, err
    assert json.loads(direct)["score"] == json.loads(via)["score"]
    explicit = ["--task-sft", run_dir / "tasks" / "category-tagging.sft", "--target-sft", run_dir / "langs" / "tgt0.sft"]
    _, again, _ = cli(capsys, "eval", "--lang", "tgt0", *explicit, *base)
    assert json.loads(again)["score"] == json.loads(direct)["score"]


def test_ta_only_and_span_f1(run_dir, config, capsys):
    base = ["--config", config, "--out-dir", run_dir]
    code, out, err = cli(capsys, "eval", "--lang", "tgt0", "--ta-only", "--metric", "span-f1", *base)
    assert code == 0, err
    res = json.loads(out)
    assert res["configuration"] == "ta-only" and 0 <= res["score"] <= 100


def test_inspect_empty_diff(tmp_path, run_dir, capsys):
    layout = deserialize_diff((run_dir / "langs" / "src0.sft").read_bytes()).layout
    p = tmp_path / "empty.sft"
    p.write_bytes(serialize_diff(SparseDiff.empty(layout)))
    code, out, _ = cli(capsys, "inspect-sft", p)
    info = json.loads(out)
    assert code == 0 and info["entries"] == 0 and info["density"] == 0.0
    code, out, _ = cli(capsys, "inspect-sft", run_dir / "langs" / "src0.sft")
    assert json.loads(out)["meta"]["language"] == "src0"


def test_overlap_and_sweep_commands(run_dir, config, capsys):
    base = ["--config", config, "--out-dir", run_dir]
    code, _, err = cli(capsys, "overlap", "--langs", "src0,tgt0", *base)
    assert code == 0, err
    rows = (run_dir / "metrics" / "overlap.tsv").read_text().splitlines()
    assert rows[0] == "language\tsrc0\ttgt0" and rows[1].split("\t")[1] == "100.0000"
    code, out, err = cli(capsys, "sweep-density", *base)
    assert code == 0, err
    assert json.loads(out) == {"cells": 1, "failed": 0}


def test_error_exit_codes(tmp_path, run_dir, config, capsys):
    base = ["--config", config, "--out-dir", run_dir]
    code, _, err = cli(capsys, "train-lang", "--lang", "src0", "--bogus", *base)
    assert code == EXIT_CODES["usage"] == 2 and error_of(err)["error"] == "usage"
    code, _, err = cli(capsys, "eval", "--lang", "tgt0", "--task-sft", tmp_path / "missing.sft", *base)
    assert code == EXIT_CODES["missing-file"] and error_of(err)["error"] == "missing-file"

    corrupt = tmp_path / "corrupt.sft"
    data = bytearray((run_dir / "langs" / "tgt0.sft").read_bytes())
    data[-3] ^= 0xFF
    corrupt.write_bytes(bytes(data))
    code, _, err = cli(capsys, "eval", "--lang", "tgt0", "--target-sft", corrupt, *base)
    assert code == EXIT_CODES["decode-error"] and error_of(err)["error"] == "decode-error"

    other = tmp_path / "other.json"
    other.write_text(json.dumps({**SMALL, "model": {**SMALL["model"], "hidden_size": 12}}))
    other_dir = tmp_path / "other"
    shutil.copytree(run_dir / "data", other_dir / "data")
    assert main(["pretrain", "--config", str(other), "--out-dir", str(other_dir)]) == 0
    capsys.readouterr()
    code, _, err = cli(capsys, "eval", "--lang", "tgt0", "--task-sft", run_dir / "tasks" / "category-tagging.sft",
                       "--target-sft", run_dir / "langs" / "tgt0.sft", "--head", run_dir / "tasks" / "category-tagging.head",
                       "--config", other, "--out-dir", other_dir)
    assert code == EXIT_CODES["fingerprint-mismatch"] and error_of(err)["error"] == "fingerprint-mismatch"

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lang": {"phase_one": 3}}))
    code, _, err = cli(capsys, "train-lang", "--lang", "src0", "--config", bad, "--out-dir", run_dir)
    assert code == EXIT_CODES["config-error"] and "phase_one" in error_of(err)["message"]
    code, _, err = cli(capsys, "train-lang", "--lang", "src0", "--budget-k", "1.5", *base)
    assert code == EXIT_CODES["config-error"]
    assert len(set(EXIT_CODES.values())) == len(EXIT_CODES)


def test_budget_flag_accepts_count_and_fraction(run_dir, config, capsys):
    base = ["--config", config, "--out-dir", run_dir]
    code, out, err = cli(capsys, "train-lang", "--lang", "tgt1", "--budget-k", "37", "--strategy", "rand", *base)
    assert code == 0, err
    assert json.loads(out)["k"] == 37
    code, out, _ = cli(capsys, "train-lang", "--lang", "tgt1", "--budget-k", "0.01", "--lambda", "0", *base)
    k = json.loads(out)["k"]
    _, out, _ = cli(capsys, "inspect-sft", run_dir / "langs" / "tgt1.sft")
    assert k == round(0.01 * json.loads(out)["total_params"])
