from dataclasses import dataclass

import numpy as np
import pytest

from ltsft import autodiff as ad
from ltsft.data import ExampleStream, MlmConfig
from ltsft.model import MicroTransformer, ModelSpec
from ltsft.params import Layout, ParameterSnapshot
from ltsft.synth import TAGGING, build_suite, generate_corpus, generate_task_data

SMALL_SIZES = {"noun": 6, "verb": 4, "modifier": 4, "function": 3}


@dataclass
class Tiny:
    suite: object
    model: MicroTransformer
    theta0: ParameterSnapshot

    def corpus(self, tag, n=40, stream="lang"):
        return generate_corpus(self.suite.get(tag), n, stream)

    def tagging(self, tag, n=40, stream="task"):
        return generate_task_data(self.suite.get(tag), TAGGING, n, stream)

    def mlm_stream(self, tag, batch_size=4):
        return ExampleStream(self.corpus(tag), "mlm", batch_size, tag, MlmConfig(vocab_size=self.model.spec.vocab_size))

    def tagging_stream(self, tag, batch_size=4):
        return ExampleStream(self.tagging(tag), "token", batch_size, tag)


@pytest.fixture(scope="session")
def tiny():
    suite = build_suite(n_sources=2, n_targets=2, shared_fraction=0.25, category_sizes=SMALL_SIZES, seed=1)
    spec = ModelSpec(vocab_size=suite.vocab_size_needed, hidden_size=8, layers=1, heads=2, ffn_size=16,
                     max_seq_len=12, dropout=0.1)
    model = MicroTransformer(spec)
    return Tiny(suite, model, model.init_params(0))


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion at the end of the session

_VERDICTS: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def verdict():
    """Record a criterion's outcome, then fail the test if it did not hold."""

    def record(number: int, name: str, ok: bool, detail: str = "") -> None:
        _VERDICTS[number] = (name, bool(ok), detail)
        print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {name}; {detail}")
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, 11):
        if n in _VERDICTS:
            name, ok, detail = _VERDICTS[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {name}: {detail}")
        else:
            terminalreporter.write_line(f"[----] {n:2d} no verdict (deselected, or errored before checking)")


@dataclass
class ToyBatch:
    x: np.ndarray
    y: np.ndarray
    lang: str = ""


class Quadratic:
    """Two-parameter least squares: mean 0.5 * (x . w - y)^2."""

    layout = Layout.from_shapes({"w": (2,)})

    def tags(self):
        return {"w": "ffn"}

    def init_head(self, head_spec, seed):
        return None

    def loss(self, tape, params, head, batch, dropout_key=None):
        pred = ad.matmul(tape.constant(batch.x), ad.reshape(params["w"], (2, 1)))
        r = ad.sub(ad.reshape(pred, (-1,)), tape.constant(batch.y))
        return ad.scale(ad.total(ad.mul(r, r)), 0.5 / len(batch.y))

    @staticmethod
    def grad(w, batch):
        return batch.x.T @ (batch.x @ w - batch.y) / len(batch.y)


class FixedBatches:
    def __init__(self, *batches):
        self.batches = batches

    def batch_at(self, step, seed):
        return self.batches[step % len(self.batches)]

    def batches_per_epoch(self):
        return len(self.batches)
