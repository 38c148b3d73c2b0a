"""Reverse-mode correctness: finite differences, accumulation, determinism."""

import numpy as np
import pytest

from moedit import numerics as nm


def _fp64(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return nm.tensor(rng.normal(size=shape) * scale, requires_grad=True)


def test_backward_rejects_nonscalar():
    x = nm.tensor(np.ones(3), requires_grad=True)
    with pytest.raises(nm.ShapeError):
        nm.backward(nm.relu(x))


def test_backward_rejects_constant_loss():
    x = nm.tensor(np.ones(3))
    with pytest.raises(ValueError):
        nm.backward(nm.sum_(x))


def test_fanout_accumulates_gradient():
    with nm.use_dtype(np.float64):
        x = nm.tensor(np.array([3.0]), requires_grad=True)
        y = nm.add(nm.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1 = 7
        grads = nm.backward(nm.sum_(y))
    np.testing.assert_allclose(grads[x], [7.0], rtol=1e-12)


def test_broadcast_add_reduces_gradient():
    with nm.use_dtype(np.float64):
        x = nm.tensor(np.zeros((4, 3)), requires_grad=True)
        b = nm.tensor(np.zeros((1, 3)), requires_grad=True)
        grads = nm.backward(nm.sum_(nm.add(x, b)))
    assert grads[b].shape == (1, 3)
    np.testing.assert_array_equal(grads[b], np.full((1, 3), 4.0))


def test_constant_subgraphs_record_no_trace():
    a = nm.tensor(np.ones((3, 3)))
    b = nm.tensor(np.ones((3, 3)))
    out = nm.matmul(a, b)
    assert not out.requires_grad and out._parents == ()


def test_frozen_weight_matmul_skips_weight_gradient():
    x = nm.tensor(np.ones((2, 3)), requires_grad=True)
    w = nm.tensor(np.ones((3, 4)))  # frozen
    grads = nm.backward(nm.sum_(nm.matmul(x, w)))
    assert w not in grads and x in grads


def test_grad_check_composite_expression():
    with nm.use_dtype(np.float64):
        w1 = _fp64((5, 4), 1, 0.5)
        w2 = _fp64((4, 3), 2, 0.5)
        bias = _fp64((1, 3), 3, 0.1)
        x = nm.tensor(np.random.default_rng(4).normal(size=(6, 5)))

        def loss_fn():
            h = nm.relu(nm.matmul(x, w1))
            y = nm.add(nm.matmul(h, w2), bias)
            return nm.mean(nm.mul(nm.sigmoid(y), y))

        res = nm.grad_check(loss_fn, [("w1", w1), ("w2", w2), ("b", bias)])
    assert res.max_rel_err < 1e-7, res


def test_grad_check_softmax_family():
    with nm.use_dtype(np.float64):
        logits = _fp64((4, 6), 5)
        ref = nm.tensor(np.random.default_rng(6).normal(size=(4, 6)))
        targets = np.array([0, 2, 5, 1])

        def loss_fn():
            ce = nm.cross_entropy(logits, targets)
            kl = nm.mean(nm.kl_divergence(ref, logits))
            ent = nm.mean(nm.mul(nm.softmax(logits), nm.log_softmax(logits)))
            return nm.add(nm.add(ce, kl), ent)

        res = nm.grad_check(loss_fn, [("logits", logits)])
    assert res.max_rel_err < 1e-7, res


def test_grad_check_layer_norm_attention_block():
    rng = np.random.default_rng(7)
    with nm.use_dtype(np.float64):
        x = nm.tensor(rng.normal(size=(2, 5, 8)))
        gamma = _fp64((8,), 8, 0.3)
        beta = _fp64((8,), 9, 0.1)
        wq = _fp64((8, 8), 10, 0.4)
        wk = _fp64((8, 8), 11, 0.4)
        wv = _fp64((8, 8), 12, 0.4)
        gamma.data += 1.0
        mask = nm.tensor(np.triu(np.full((5, 5), -1e9), k=1))

        def loss_fn():
            h = nm.layer_norm(x, gamma, beta)
            q = nm.matmul(h, wq)
            k = nm.matmul(h, wk)
            v = nm.matmul(h, wv)
            scores = nm.scale(nm.matmul(q, nm.swap_last2(k)), 8 ** -0.5)
            att = nm.softmax(nm.add(scores, mask), axis=-1)
            return nm.mean(nm.mul(nm.matmul(att, v), nm.matmul(att, v)))

        res = nm.grad_check(
            loss_fn,
            [("gamma", gamma), ("beta", beta), ("wq", wq), ("wk", wk), ("wv", wv)],
        )
    assert res.max_rel_err < 1e-6, res


def test_grad_check_gather_select_concat_paths():
    rng = np.random.default_rng(13)
    with nm.use_dtype(np.float64):
        table = _fp64((6, 4), 14, 0.5)
        proj = _fp64((4, 3), 15, 0.5)
        ids = np.array([[0, 2, 2], [5, 1, 0]])
        idx = np.array([[0, 1, 2], [2, 2, 0]])

        def loss_fn():
            rows = nm.gather_rows(table, ids)  # (2,3,4)
            h = nm.matmul(rows, proj)  # (2,3,3)
            left = h[:, 0:2, :]
            right = h[:, 2:3, :]
            both = nm.concat([left, right], axis=1)
            picked = nm.select_last(both, idx)
            return nm.sum_(nm.softplus(picked))

        res = nm.grad_check(loss_fn, [("table", table), ("proj", proj)])
    assert res.max_rel_err < 1e-7, res


def test_backward_bitwise_deterministic():
    rng = np.random.default_rng(20)
    w = nm.tensor(rng.normal(size=(16, 16)).astype(np.float32), requires_grad=True)
    x = nm.tensor(rng.normal(size=(8, 16)).astype(np.float32))

    def run():
        y = nm.relu(nm.matmul(x, w))
        z = nm.softmax(nm.matmul(y, nm.swap_last2(y)))
        return nm.backward(nm.mean(nm.matmul(z, y)))[w].tobytes()

    assert run() == run()


def test_graph_trace_visits_each_node_once():
    x = nm.tensor(np.ones(2), requires_grad=True)
    y = nm.mul(x, x)
    z = nm.add(y, y)
    g = nm.Graph.trace(nm.sum_(z))
    assert len({id(n) for n in g.nodes}) == len(g.nodes)


def test_grad_check_sampled_coords_cover_every_param():
    with nm.use_dtype(np.float64):
        w = _fp64((10, 10), 30)
        v = _fp64((3,), 31)

        def loss_fn():
            return nm.sum_(nm.mul(w, w)) + nm.sum_(nm.mul(v, v))

        res = nm.grad_check(
            loss_fn, [("w", w), ("v", v)], max_coords_per_param=5,
            rng=np.random.default_rng(0),
        )
    assert res.coords_checked == 5 + 3
    assert res.max_rel_err < 1e-6
