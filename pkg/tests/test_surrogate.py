"""Causality, layer-split decomposition, hook identity, persistence."""

import numpy as np
import pytest

from moedit import numerics as nm
from moedit.surrogate import (
    FrozenModelError,
    Spans,
    Surrogate,
    SurrogateConfig,
    VisualInput,
    pretrain,
    token_accuracy,
)

CFG = SurrogateConfig(width=32, layers=3, heads=4, vocab=32, n_visual=4,
                      visual_dim=8, max_seq=16, edit_layer=2)


@pytest.fixture(scope="module")
def model():
    return Surrogate.init(CFG, np.random.default_rng(0))


def _inputs(rng, batch=2, n_prompt=3, n_output=2):
    vis = rng.normal(size=(batch, CFG.n_visual, CFG.visual_dim)).astype(np.float32)
    prompts = rng.integers(0, CFG.vocab, size=(batch, n_prompt))
    outputs = rng.integers(0, CFG.vocab, size=(batch, n_output))
    return vis, prompts, outputs


def test_spans_partition_sequence():
    s = Spans(4, 3, 2)
    assert (s.visual, s.prompt, s.output) == (slice(0, 4), slice(4, 7), slice(7, 9))
    assert s.total == 9


def test_empty_visual_is_all_zero_rows():
    v = VisualInput.empty(CFG)
    assert v.is_empty and not np.any(v.feats)
    with pytest.raises(ValueError):
        VisualInput(feats=np.ones((4, 8), dtype=np.float32), is_empty=True)


def test_causality_future_tokens_do_not_change_past_logits(model):
    rng = np.random.default_rng(1)
    vis, prompts, outputs = _inputs(rng)
    logits_a, spans = model.forward(vis, prompts, outputs)
    outputs_b = outputs.copy()
    outputs_b[:, -1] = (outputs_b[:, -1] + 1) % CFG.vocab
    logits_b, _ = model.forward(vis, prompts, outputs_b)
    # everything strictly before the changed position is bitwise identical
    assert np.array_equal(logits_a.data[:, : spans.total - 1], logits_b.data[:, : spans.total - 1])
    assert not np.array_equal(logits_a.data[:, -1], logits_b.data[:, -1])


def test_visual_rows_do_influence_text_positions(model):
    rng = np.random.default_rng(2)
    vis, prompts, outputs = _inputs(rng)
    la, _ = model.forward(vis, prompts, outputs)
    lb, _ = model.forward(vis + 1.0, prompts, outputs)
    assert not np.allclose(la.data[:, -1], lb.data[:, -1])


def test_layer_split_decomposition_matches_full_forward(model):
    rng = np.random.default_rng(3)
    vis, prompts, outputs = _inputs(rng)
    full, _ = model.forward(vis, prompts, outputs)
    for layer in range(CFG.layers + 1):
        hs = model.embed(vis, prompts, outputs)
        mid = model.forward_to_layer(hs, layer)
        split = model.forward_from_layer(mid, layer)
        np.testing.assert_allclose(split.data, full.data, atol=1e-6)


def test_identity_hook_is_bitwise_noop(model):
    rng = np.random.default_rng(4)
    vis, prompts, outputs = _inputs(rng)
    plain, _ = model.forward(vis, prompts, outputs)
    hooked, _ = model.forward_edited(vis, prompts, outputs, lambda hs: hs)
    assert np.array_equal(plain.data, hooked.data)


def test_hook_shift_propagates_to_logits(model):
    rng = np.random.default_rng(5)
    vis, prompts, outputs = _inputs(rng)
    plain, _ = model.forward(vis, prompts, outputs)

    def bump(hs):
        return type(hs)(nm.shift(hs.h, 0.5), hs.spans)

    hooked, _ = model.forward_edited(vis, prompts, outputs, bump)
    assert not np.allclose(plain.data, hooked.data)


def test_hook_shape_change_rejected(model):
    rng = np.random.default_rng(6)
    vis, prompts, outputs = _inputs(rng)

    def truncate(hs):
        return type(hs)(hs.h[:, 0:3, :], hs.spans)

    with pytest.raises(nm.ShapeError):
        model.forward_edited(vis, prompts, outputs, truncate)


def test_sequence_log_prob_matches_manual_sum(model):
    rng = np.random.default_rng(7)
    vis, prompts, outputs = _inputs(rng)
    logits, spans = model.forward(vis, prompts, outputs)
    got = model.sequence_log_prob(logits, spans, outputs).data
    rows = model.output_logits(logits, spans).data
    for b in range(2):
        want = 0.0
        for j, t in enumerate(outputs[b]):
            row = rows[b, j] - rows[b, j].max()
            want += row[t] - np.log(np.exp(row).sum())
        assert abs(got[b] - want) < 1e-4


def test_greedy_decode_stops_at_end_token(model):
    rng = np.random.default_rng(8)
    vis = rng.normal(size=(CFG.n_visual, CFG.visual_dim)).astype(np.float32)
    prompt = rng.integers(0, CFG.vocab, size=3)
    toks = model.greedy_decode(vis, prompt, max_new=5)
    assert 1 <= len(toks) <= 5
    if CFG.end_token in toks:
        assert toks.index(CFG.end_token) == len(toks) - 1


def test_save_load_roundtrip_bitwise(model, tmp_path):
    model.save(tmp_path / "m")
    back = Surrogate.load(tmp_path / "m")
    assert back.cfg == model.cfg
    for k, p in model.params.items():
        np.testing.assert_array_equal(back.params[k].data, p.data)
    rng = np.random.default_rng(9)
    vis, prompts, outputs = _inputs(rng)
    a, _ = model.forward(vis, prompts, outputs)
    b, _ = back.forward(vis, prompts, outputs)
    np.testing.assert_array_equal(a.data, b.data)


def test_freeze_blocks_updates():
    m = Surrogate.init(CFG, np.random.default_rng(10))
    m.freeze()
    with pytest.raises(FrozenModelError):
        m.trainable()
    with pytest.raises(FrozenModelError):
        pretrain(m, [], np.random.default_rng(0))
    assert all(not p.requires_grad for p in m.params.values())


def test_pretrain_learns_toy_mapping_and_freezes():
    cfg = SurrogateConfig(width=32, layers=2, heads=4, vocab=16, n_visual=2,
                          visual_dim=4, max_seq=12, edit_layer=1)
    model = Surrogate.init(cfg, np.random.default_rng(11))
    rng = np.random.default_rng(12)
    rows = []
    for concept in range(4):
        base = rng.normal(size=(2, 4)).astype(np.float32)
        answer = 2 + concept
        for _ in range(6):
            feats = (base + 0.05 * rng.normal(size=(2, 4))).astype(np.float32)
            rows.append((VisualInput(feats), (1, 0), (answer, 0)))
    res = pretrain(model, rows, np.random.default_rng(13), lr=3e-3,
                   batch_size=16, max_steps=1500, target_accuracy=0.99,
                   check_every=100)
    assert res.token_accuracy >= 0.99, res
    assert model.frozen
    assert token_accuracy(model, rows) >= 0.99
