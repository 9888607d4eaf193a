import math

import numpy as np
import pytest

from distnas import autodiff as ad
from distnas.data import gen_dataset
from distnas.space import CellSpace, enumerate_all, onehot
from distnas.supernet import Batch, Supernet


def _np_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def reference_loss(net, mix, x, y):
    """Straight-line numpy forward of the mixed supernet, written independently."""
    W = {n: node.value for n, node in zip(net.weights.names, net.weights.nodes)}
    sp = net.space
    nodes = [x @ W["stem.W"] + W["stem.b"]]
    for j in range(1, sp.num_intermediate_nodes + 1):
        acc = np.zeros((x.shape[0], net.hidden_dim))
        for e, (i, t) in enumerate(sp.edges):
            if t != j:
                continue
            h = nodes[i]
            for k, kind in enumerate(sp.ops):
                if kind == "skip":
                    out = h
                elif kind == "zero":
                    out = 0.0 * h
                elif kind == "avg":
                    out = np.repeat(h.mean(axis=1, keepdims=True), h.shape[1], axis=1)
                else:
                    pre = h @ W[f"e{e}.{kind}.W"] + W[f"e{e}.{kind}.b"]
                    out = np.maximum(pre, 0) if kind == "dense_relu" else np.tanh(pre)
                acc = acc + mix[e, k] * out
        nodes.append(acc)
    cell = sum(nodes[1:]) / sp.num_intermediate_nodes
    logits = cell @ W["head.W"] + W["head.b"]
    logp = np.log(_np_softmax(logits))
    return -logp[np.arange(len(y)), y].mean()


@pytest.fixture
def batch():
    rng = np.random.default_rng(5)
    return Batch(rng.standard_normal((12, 2)), rng.integers(0, 3, 12))


def test_zero_weights_give_ln3(batch):
    net = Supernet(CellSpace(), seed=1)
    net.zero_weights()
    assert ad.forward(net.forward_mixed(np.zeros((6, 3)), batch)) == pytest.approx(math.log(3), abs=1e-14)
    assert ad.forward(net.forward_discrete((0,) * 6, batch)) == pytest.approx(math.log(3), abs=1e-14)


@pytest.mark.parametrize("ops", [("skip", "dense_relu", "zero"), ("avg", "dense_tanh", "skip", "zero")])
def test_mixed_matches_reference(batch, ops):
    space = CellSpace(ops=ops)
    net = Supernet(space, seed=3)
    logits = np.random.default_rng(2).standard_normal((space.num_edges, space.num_ops))
    got = ad.forward(net.forward_mixed(logits, batch))
    want = reference_loss(net, _np_softmax(logits), batch.inputs, batch.labels)
    assert got == pytest.approx(want, rel=1e-12)


def test_onehot_equivalence_100_archs(batch):
    space = CellSpace()
    net = Supernet(space, seed=4)
    rng = np.random.default_rng(0)
    all_archs = list(enumerate_all(space))
    for idx in rng.choice(len(all_archs), 100, replace=False):
        arch = all_archs[idx]
        d = net.logits_discrete(arch, batch.inputs).value
        m = net.logits_mixture(onehot(space, arch), batch.inputs).value
        np.testing.assert_allclose(d, m, atol=1e-10)


def test_all_zero_arch_equals_head_only(batch):
    net = Supernet(CellSpace(), seed=6)
    z = ad.forward(net.forward_discrete((2,) * 6, batch))
    # cell output is all zero, so only the head bias reaches the logits
    b = net.weights["head.b"].value
    logp = np.log(_np_softmax(np.tile(b, (len(batch), 1))))
    assert z == pytest.approx(-logp[np.arange(len(batch)), batch.labels].mean(), rel=1e-14)


def test_op_permutation_invariance(batch):
    a = CellSpace(ops=("skip", "dense_relu", "zero"))
    b = CellSpace(ops=("zero", "skip", "dense_relu"))
    na, nb = Supernet(a, seed=8), Supernet(b, seed=8)
    # layouts differ only by op order; both nets own the same single dense block per edge
    nb.weights.assign(na.weights.flatten())
    logits = np.random.default_rng(9).standard_normal((6, 3))
    la = ad.forward(na.forward_mixed(logits, batch))
    lb = ad.forward(nb.forward_mixed(logits[:, [2, 0, 1]], batch))
    assert la == pytest.approx(lb, abs=1e-10)


def test_mixed_loss_gradients_finite_difference(batch):
    space = CellSpace(num_intermediate_nodes=2)
    net = Supernet(space, hidden_dim=3, seed=0)
    rng = np.random.default_rng(1)
    for _ in range(5):
        logits = rng.standard_normal((space.num_edges, space.num_ops))
        a = ad.param(logits)
        net.weights.zero_grad()
        net.forward_mixed(a, batch).backward()
        f = lambda v: float(net.forward_mixed(v.reshape(logits.shape), batch).value)
        num = ad.numeric_grad(f, logits.ravel())
        err = np.abs(a.grad.ravel() - num) / np.maximum(1, np.abs(num))
        assert err.max() < 1e-4
        wg = net.weights.flat_grad()
        w0 = net.weights.flatten()
        idx = rng.choice(w0.size, 20, replace=False)
        for i in idx:
            h = 1e-5
            wp, wm = w0.copy(), w0.copy()
            wp[i] += h
            wm[i] -= h
            net.weights.assign(wp)
            lp = ad.forward(net.forward_mixed(logits, batch))
            net.weights.assign(wm)
            lm = ad.forward(net.forward_mixed(logits, batch))
            net.weights.assign(w0)
            assert abs(wg[i] - (lp - lm) / (2 * h)) < 1e-4 * max(1, abs(wg[i]))


def test_accuracy_near_chance_with_random_weights():
    ds = gen_dataset("blobs", 6000, 1.0, seed=0)
    net = Supernet(CellSpace(), seed=0)
    net.zero_weights()
    rng = np.random.default_rng(0)
    net.weights["head.W"].value = rng.standard_normal((16, 3)) * 1e-3
    acc = net.accuracy((1,) * 6, ds.val)
    # zero cell, tiny head: predictions collapse to one class, a third of balanced data
    assert abs(acc - 1 / 3) < 0.05


def test_accuracy_zero_and_empty():
    net = Supernet(CellSpace(), num_classes=2, seed=0)
    net.zero_weights()
    net.weights["head.b"].value = np.array([1.0, 0.0])
    b = Batch(np.zeros((4, 2)), np.ones(4, dtype=int))
    assert net.accuracy((0,) * 6, b) == 0.0
    with pytest.raises(ValueError):
        net.accuracy((0,) * 6, [])


def test_separable_data_trained_to_high_accuracy():
    ds = gen_dataset("blobs", 300, 0.5, seed=1)
    net = Supernet(CellSpace(), seed=0)
    for _ in range(150):
        net.sgd_weight_step((1,) * 6, ds.train, 0.05, 0.9)
    assert net.accuracy((1,) * 6, ds.val) >= 0.95


def test_sgd_lr_zero_unchanged(batch):
    net = Supernet(CellSpace(), seed=0)
    w0 = net.weights.flatten()
    net.sgd_weight_step(np.zeros((6, 3)), batch, 0.0, 0.9)
    np.testing.assert_array_equal(net.weights.flatten(), w0)


def test_sgd_one_step_matches_hand_update(batch):
    net = Supernet(CellSpace(), seed=0)
    w0 = net.weights.flatten()
    net.loss_and_grad((1, 0, 1, 2, 1, 0), batch)
    g = net.weights.flat_grad()
    net.sgd_weight_step((1, 0, 1, 2, 1, 0), batch, 0.1, 0.9)
    np.testing.assert_allclose(net.weights.flatten(), w0 - 0.1 * g, rtol=0, atol=1e-15)


def test_sgd_loss_decreases(batch):
    net = Supernet(CellSpace(), seed=0)
    losses = [net.sgd_weight_step(np.zeros((6, 3)), batch, 0.05, 0.9) for _ in range(50)]
    assert losses[-1] < losses[0]


def test_sgd_non_finite_leaves_weights(batch):
    net = Supernet(CellSpace(), seed=0)
    net.weights["head.b"].value = np.array([np.inf, 0.0, 0.0])
    w0 = net.weights.flatten()
    with np.errstate(invalid="ignore"), pytest.raises(ad.NonFiniteError):
        net.sgd_weight_step((0,) * 6, batch, 0.1)
    np.testing.assert_array_equal(net.weights.flatten(), w0)


def test_shape_and_label_errors(batch):
    net = Supernet(CellSpace(), seed=0)
    with pytest.raises(ad.ShapeError):
        net.forward_mixed(np.zeros((5, 3)), batch)
    with pytest.raises(ValueError):
        net.forward_discrete((0,) * 6, Batch(np.zeros((2, 2)), np.array([0, 3])))


def test_distinct_weight_blocks():
    net = Supernet(CellSpace(ops=("skip", "dense_relu", "dense_tanh")), seed=0)
    blocks = [n for n in net.weights.names if n.startswith("e")]
    assert len(blocks) == len(set(blocks)) == 6 * 2 * 2


def test_weights_save_load_round_trip(tmp_path):
    net = Supernet(CellSpace(), seed=12)
    net.save_weights(tmp_path / "w")
    back = Supernet.load_weights(tmp_path / "w")
    np.testing.assert_array_equal(back.weights.flatten(), net.weights.flatten())
