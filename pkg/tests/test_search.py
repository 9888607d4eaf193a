import json

import numpy as np
import pytest

from distnas import autodiff as ad
from distnas.data import gen_dataset
from distnas.ngvi import ArchDistribution, VAdamState, vadam_step
from distnas.search import (
    SearchConfig,
    SearchDiverged,
    SearchTrace,
    arch_grad_first_order,
    arch_grad_second_order,
    darts_step,
    mu_hash,
    run_balenas,
    run_darts_baseline,
    unrolled_grad,
)
from distnas.space import CellSpace, format_arch
from distnas.supernet import Batch, Supernet


@pytest.fixture(scope="module")
def ds():
    return gen_dataset("moons", 240, 0.15, seed=0)


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=32, hidden_dim=8, delta=10.0)
    base.update(kw)
    return SearchConfig(**base)


def _net_and_batch(seed=0):
    space = CellSpace()
    net = Supernet(space, 2, 6, 2, seed=seed)
    rng = np.random.default_rng(seed)
    return net, Batch(rng.standard_normal((20, 2)), rng.integers(0, 2, 20))


def test_first_order_grad_finite_differences():
    net, b = _net_and_batch()
    rng = np.random.default_rng(3)
    for _ in range(5):
        alpha = rng.standard_normal((6, 3))
        g = arch_grad_first_order(net, alpha, b)
        f = lambda v: ad.forward(net.forward_mixed(v.reshape(6, 3), b))
        num = ad.numeric_grad(f, alpha.ravel())
        err = np.abs(g.ravel() - num) / np.maximum(1, np.abs(num))
        assert err.max() < 1e-4


def test_first_order_grad_zero_signal_and_frozen_weights():
    net, b = _net_and_batch()
    net.weights["head.W"].value = np.zeros_like(net.weights["head.W"].value)
    np.testing.assert_array_equal(arch_grad_first_order(net, np.zeros((6, 3)), b), 0.0)
    assert all(n.grad is None or not np.any(n.grad) for n in net.weights.nodes)


def test_gradient_scales_with_loss():
    net, b = _net_and_batch(1)
    alpha = np.random.default_rng(0).standard_normal((6, 3))
    a1, a2 = ad.param(alpha), ad.param(alpha)
    net.forward_mixed(a1, b).backward()
    ad.mul(net.forward_mixed(a2, b), 3.5).backward()
    np.testing.assert_allclose(a2.grad, 3.5 * a1.grad, rtol=1e-12, atol=1e-17)


def test_second_order_limit_is_first_order():
    net, b = _net_and_batch(2)
    rng = np.random.default_rng(5)
    tr = Batch(rng.standard_normal((20, 2)), rng.integers(0, 2, 20))
    alpha = rng.standard_normal((6, 3))
    w0 = net.weights.flatten()
    g2 = arch_grad_second_order(net, alpha, tr, b, 1e-8)
    g1 = arch_grad_first_order(net, alpha, b)
    assert np.abs(g2 - g1).max() < 1e-5
    np.testing.assert_array_equal(net.weights.flatten(), w0)
    assert np.array_equal(g2, arch_grad_second_order(net, alpha, tr, b, 1e-8))


def test_unrolled_grad_analytic_toy():
    # L_train = 0.5 (w - a)^2 ; L_val = 0.5 (w - c)^2 + 0.5 lam a^2
    c, lam = 2.0, 0.3

    def train(w, a):
        return w - a, -(w - a)

    def val(w, a):
        return w - c, lam * a

    for w, a, xi in [(0.5, -1.0, 0.1), (3.0, 2.0, 0.5), (-1.0, 0.7, 0.01)]:
        w1 = w - xi * (w - a)
        want = (w1 - c) * xi + lam * a
        got = unrolled_grad(np.array([w]), np.array([a]), train, val, xi)
        assert got[0] == pytest.approx(want, abs=1e-4)
    with pytest.raises(ValueError):
        unrolled_grad(np.zeros(1), np.zeros(1), train, val, 0.0)


def test_reduction_first_step_matches_darts():
    net, b = _net_and_batch(4)
    grad_fn = lambda a: arch_grad_first_order(net, a, b)
    mk = lambda: VAdamState(ArchDistribution(np.zeros((6, 3)), np.zeros((6, 3)), 0.0, 20), beta=0.05, gamma=0.9, M=1, sample=False)
    a, d = mk(), mk()
    for _ in range(3):
        vadam_step(a, grad_fn)
        darts_step(d, grad_fn, 0.0)
        np.testing.assert_allclose(a.dist.mu, d.dist.mu, rtol=0, atol=1e-10)


def test_no_steps_returns_prior(ds):
    dist, arch, trace = run_balenas(small_cfg(epochs=0), ds)
    np.testing.assert_array_equal(dist.mu, 0.0)
    assert arch == (0,) * 6 and len(trace) == 0


def test_run_is_deterministic(ds, tmp_path):
    cfg = small_cfg(seed=3)
    run_balenas(cfg, ds, out_dir=tmp_path / "a", record_wall_time=False)
    run_balenas(cfg, ds, out_dir=tmp_path / "b", record_wall_time=False)
    for name in ("trace.jsonl", "dist.json", "weights.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_trace_complete_and_well_formed(ds):
    cfg = small_cfg(diag_every=2)
    _, arch, trace = run_balenas(cfg, ds)
    steps = trace.column("step")
    assert steps == list(range(1, len(steps) + 1))
    rec = trace.records[0]
    for key in ("train_loss", "val_loss", "mu_hash", "skip_ratio", "trace_estimate", "dominant_eig", "wall_ms", "sampled_arch"):
        assert key in rec
    assert trace.records[1]["trace_estimate"] is not None and trace.records[0]["trace_estimate"] is None
    assert format_arch(arch) == trace.records[-1]["arch"]
    with pytest.raises(ValueError):
        trace.append({"step": steps[-1]})


@pytest.mark.parametrize("runner", [run_balenas, run_darts_baseline])
def test_checkpoint_resume_reproduces_trace(ds, tmp_path, runner):
    cfg = small_cfg(epochs=3, checkpoint_every=5, seed=1)
    full = runner(cfg, ds, out_dir=tmp_path / "full", record_wall_time=False)
    ck = tmp_path / "full" / "checkpoint"
    assert json.loads((ck / "dist.json").read_text())["step"] == 5
    resumed = runner(cfg, ds, out_dir=tmp_path / "res", resume_from=ck, record_wall_time=False)
    assert (tmp_path / "full" / "trace.jsonl").read_bytes() == (tmp_path / "res" / "trace.jsonl").read_bytes()
    assert resumed[1] == full[1]


def test_exploration_visits_more_archs_than_darts(ds):
    bal, dar = set(), set()
    for seed in range(5):
        cfg = small_cfg(seed=seed, init_seed=seed)
        bal.update(run_balenas(cfg, ds)[2].column("sampled_arch"))
        dar.update(run_darts_baseline(cfg, ds)[2].column("arch"))
    assert len(bal) > len(dar)


def test_darts_baseline_returns_valid_arch(ds):
    mu, arch, trace = run_darts_baseline(small_cfg(), ds)
    assert mu.shape == (6, 3) and len(arch) == 6 and all(0 <= k < 3 for k in arch)
    assert trace.column("sampled_arch") == trace.column("arch")


def test_second_order_search_runs(ds):
    _, arch, trace = run_balenas(small_cfg(epochs=1, order="second", xi=0.05), ds)
    assert len(trace) > 0 and all(np.isfinite(trace.column("val_loss")))


def test_divergence_aborts_with_trace(ds):
    cfg = small_cfg(divergence_factor=0.0, divergence_patience=3)
    with pytest.raises(SearchDiverged) as exc:
        run_balenas(cfg, ds)
    assert len(exc.value.trace) == 3


def test_proxy_selection_is_reproducible(ds):
    cfg = small_cfg(selection="proxy", K=20)
    assert run_balenas(cfg, ds)[1] == run_balenas(cfg, ds)[1]


@pytest.mark.parametrize(
    "kw", [{"epochs": -1}, {"order": "third"}, {"order": "second", "xi": 0.0}, {"selection": "best"}, {"weight_sample": "x"}]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SearchConfig(**kw)


def test_config_round_trip():
    cfg = SearchConfig(M=2, ops=("skip", "dense_tanh", "zero"))
    assert SearchConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        SearchConfig.from_dict({"bogus": 1})


def test_mu_hash_depends_on_bits():
    a = np.zeros((6, 3))
    b = a.copy()
    b[0, 0] = 1e-300
    assert mu_hash(a) == mu_hash(a.copy()) != mu_hash(b)


def test_trace_jsonl_round_trip(tmp_path):
    t = SearchTrace()
    t.append({"step": 1, "val_loss": 0.1, "wall_ms": 3.0})
    t.append({"step": 2, "val_loss": 0.2, "wall_ms": 1.0})
    t.write_jsonl(tmp_path / "t.jsonl", wall_time=False)
    back = SearchTrace.read_jsonl(tmp_path / "t.jsonl")
    assert back.records == [{"step": 1, "val_loss": 0.1}, {"step": 2, "val_loss": 0.2}]
