import numpy as np
import pytest

from ltsft import autodiff as ad
from ltsft.model import (
    CLS_ID,
    IGNORE,
    MASK_ID,
    HeadSpec,
    MicroTransformer,
    ModelSpec,
    forward_loss,
    mlm_corrupt,
    pad_batch,
)
from ltsft.params import FingerprintMismatch, GroupPolicy

TINY = ModelSpec(vocab_size=12, hidden_size=8, layers=1, heads=2, ffn_size=12, max_seq_len=6, dropout=0.1)


def unflatten(x: ad.Tensor, layout):
    out = {}
    for name, shape, sl in layout.spans():
        out[name] = ad.reshape(ad.slice_rows(x, sl.start, sl.stop), shape)
    return out


def tiny_mlm_batch():
    plain = pad_batch([[CLS_ID, 5, 6, 7, 8], [CLS_ID, 9, 4]], kind="token")
    batch, _ = mlm_corrupt(plain, 0.5, seed=3, vocab_size=TINY.vocab_size)
    assert (batch.labels != IGNORE).any()
    return batch


def test_default_parameter_groups():
    m = MicroTransformer()
    sizes = m.group_sizes()
    assert m.layout.total == 135168
    assert sizes == {"input-embedding": 34816, "output-embedding": 33280, "layer-norm": 640,
                     "bias": 896, "attention": 32768, "ffn": 32768}
    maskable = GroupPolicy().maskable(m.layout, m.tags())
    assert maskable.popcount == m.layout.total - 33280 - 640


def test_tied_output_embedding_drops_decoder_matrix():
    m = MicroTransformer(ModelSpec(tie_output_embedding=True))
    assert "mlm.decoder.weight" not in m.layout.names
    assert "mlm.decoder.bias" in m.layout.names


def test_init_is_seeded():
    m = MicroTransformer(TINY)
    assert m.init_params(1) == m.init_params(1)
    assert m.init_params(1) != m.init_params(2)
    hs = HeadSpec("sequence", 3)
    assert m.init_head(hs, 5) == m.init_head(hs, 5)
    assert m.init_head(None, 5) is None


@pytest.mark.parametrize("dtype, step, tol", [(np.float32, 1e-3, 1e-3), (np.float64, 1e-5, 1e-6)])
def test_full_mlm_loss_gradient(dtype, step, tol):
    m = MicroTransformer(TINY)
    theta = m.init_params(0).values.astype(np.float64) * 3  # away from the near-linear init regime
    batch = tiny_mlm_batch()
    f = lambda x: m.loss(x.tape, unflatten(x, m.layout), None, batch, (4, 1))
    assert ad.grad_check(f, theta.astype(dtype), step) < tol


@pytest.mark.parametrize("kind", ["token", "sequence"])
def test_head_gradients(kind):
    m = MicroTransformer(TINY)
    hs = HeadSpec(kind, 3)
    body = m.init_params(0)
    head = m.init_head(hs, 1)
    head = head.replace(head.values * 20)
    rows = [[CLS_ID, 5, 6, 7], [CLS_ID, 8, 9]]
    labels = [[IGNORE, 0, 1, 2], [IGNORE, 2, 1]] if kind == "token" else [0, 2]
    batch = pad_batch(rows, labels, kind)
    params = {n: ad.Tensor(a.astype(np.float64)) for n, a in body.items()}
    f = lambda x: m.loss(x.tape, params, unflatten(x, head.layout), batch, (0, 0))
    assert ad.grad_check(f, head.values.astype(np.float64), 1e-5) < 1e-6


def test_forward_loss_matches_direct_evaluation_and_checks_fingerprint():
    m = MicroTransformer(TINY)
    snap = m.init_params(0)
    batch = tiny_mlm_batch()
    loss, grad, head_grad = forward_loss(m, snap, None, batch)
    assert head_grad is None and grad.shape == (snap.layout.total,)
    tape = ad.Tape()
    direct = m.loss(tape, {n: tape.leaf(a) for n, a in snap.items()}, None, batch).item()
    assert loss == direct
    # the output decoder is trained by MLM, so its gradient is non-zero
    assert np.any(grad[snap.layout.span("mlm.decoder.weight")])
    other = MicroTransformer(ModelSpec(vocab_size=13, hidden_size=8, layers=1, heads=2, ffn_size=12, max_seq_len=6))
    with pytest.raises(FingerprintMismatch):
        forward_loss(other, snap, None, batch)


def test_mlm_without_targets_is_zero():
    m = MicroTransformer(TINY)
    # a sentence of only [CLS] has nothing to mask
    batch, pos = mlm_corrupt(pad_batch([[CLS_ID]], kind="token"), 0.5, 0, TINY.vocab_size)
    assert pos.size == 0
    loss, grad, _ = forward_loss(m, m.init_params(0), None, batch)
    assert loss == 0.0 and not grad.any()


def test_padding_does_not_change_predictions():
    m = MicroTransformer(TINY)
    snap, head = m.init_params(0), m.init_head(HeadSpec("token", 4), 0)
    short = pad_batch([[CLS_ID, 5, 6]], [[IGNORE, 0, 1]], "token")
    padded = pad_batch([[CLS_ID, 5, 6], [CLS_ID, 5, 6, 7, 8]], [[IGNORE, 0, 1], [IGNORE, 0, 1, 2, 3]], "token")
    a = m.predict(snap, head, short)[0, :3]
    b = m.predict(snap, head, padded)[0, :3]
    np.testing.assert_array_equal(a, b)


def test_mlm_corruption_statistics():
    rows = [[CLS_ID, *range(4, 14)] for _ in range(400)]
    plain = pad_batch(rows, kind="token")
    batch, pos = mlm_corrupt(plain, 0.15, seed=0, vocab_size=50)
    frac = pos.shape[0] / (400 * 10)
    assert abs(frac - 0.15) < 0.02
    chosen = batch.ids[pos[:, 0], pos[:, 1]]
    assert abs(np.mean(chosen == MASK_ID) - 0.8) < 0.05
    # the CLS column is never a prediction target
    assert not (batch.labels[:, 0] != IGNORE).any()
    again, _ = mlm_corrupt(plain, 0.15, seed=0, vocab_size=50)
    np.testing.assert_array_equal(batch.ids, again.ids)


def test_sequence_too_long_is_rejected():
    m = MicroTransformer(TINY)
    batch = pad_batch([[CLS_ID, *range(4, 11)]], [0], "sequence")
    with pytest.raises(ValueError):
        forward_loss(m, m.init_params(0), m.init_head(HeadSpec("sequence", 2), 0), batch)
