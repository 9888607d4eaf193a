"""Curvature diagnostics: Hessian trace, dominant eigenvalue, discretization gap."""
from __future__ import annotations

import csv

import numpy as np

from . import autodiff as ad
from .space import discretize_argmax, onehot


def rademacher(rng, n):
    return rng.integers(0, 2, size=n) * 2.0 - 1.0


def hutchinson_trace(loss_fn, p: ad.ParamSet, n_probes, rng, return_stderr=False):
    """Estimate Tr(H) as the mean of v^T H v over Rademacher probes."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng(rng)
    vals = np.empty(n_probes)
    for i in range(n_probes):
        v = rademacher(rng, p.size)
        vals[i] = v @ ad.hvp(loss_fn, p, v)
    est = float(np.sort(vals).sum() / n_probes)
    if return_stderr:
        se = float(vals.std(ddof=1) / np.sqrt(n_probes)) if n_probes > 1 else float("nan")
        return est, se
    return est


def dominant_eigenvalue(loss_fn, p: ad.ParamSet, iters=100, tol=1e-6, rng=None, max_restarts=3):
    """Largest-magnitude Hessian eigenvalue by power iteration; returns ``|lambda|``."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(rng)
    for _ in range(max_restarts + 1):
        v = rng.standard_normal(p.size)
        v /= np.linalg.norm(v)
        lam = None
        collapsed = False
        for _ in range(iters):
            hv = ad.hvp(loss_fn, p, v)
            norm = np.linalg.norm(hv)
            if norm == 0.0:
                collapsed = True
                break
            rq = abs(float(v @ hv))
            v = hv / norm
            if lam is not None and abs(rq - lam) <= tol * lam:
                return rq
            lam = rq
        if not collapsed:
            return lam
    raise ArithmeticError(f"power iteration hit a zero iterate {max_restarts + 1} times")


def discretization_gap(loss_fn, p: ad.ParamSet, target):
    """Measured vs. second-order predicted loss change when moving ``p`` to ``target``.

    Returns ``(measured, taylor)`` with ``measured = L(target) - L(p)`` and
    ``taylor = 0.5 d^T H d``, ``d = target - p``. The linear term is omitted
    from ``taylor``, so the two agree when ``p`` is a stationary point of a
    quadratic.
    """
    x = p.flatten()
    d = np.asarray(target, dtype=np.float64).ravel() - x
    l0, _ = ad.value_and_grad(loss_fn, p)
    if not np.any(d):
        return 0.0, 0.0
    l1, _ = ad.value_and_grad(loss_fn, p, x + d)
    taylor = 0.5 * float(d @ ad.hvp(loss_fn, p, d))
    return l1 - l0, taylor


def arch_loss_fn(net, batches, mixture=False):
    """Loss over the architecture parameters only; weights are frozen."""
    batches = list(batches) if not hasattr(batches, "inputs") else [batches]

    def loss_fn(p):
        a = p["alpha"]
        with ad.frozen(net.weights):
            terms = [(net.forward_mixture if mixture else net.forward_mixed)(a, b) for b in batches]
        out = terms[0]
        for t in terms[1:]:
            out = ad.add(out, t)
        return ad.mul(out, 1.0 / len(terms))

    return loss_fn


def supernet_discretization_gap(net, alpha, val_batches):
    """Gap between the loss at the continuous mixture ``alpha`` and at its argmax one-hot."""
    alpha = np.asarray(alpha, dtype=np.float64)
    p = ad.ParamSet([("alpha", alpha)])
    target = onehot(net.space, discretize_argmax(alpha))
    return discretization_gap(arch_loss_fn(net, val_batches, mixture=True), p, target)


def expected_loss_identity_check(A, mu, sigma2, n_samples, rng):
    """Monte-Carlo vs. closed form for E[0.5 (mu+eps)^T A (mu+eps)], eps ~ N(0, sigma2 I).

    Returns ``(mc, analytic, stderr)``.
    """
    a = np.diag(A) if np.ndim(A) == 2 else np.asarray(A, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    rng = np.random.default_rng(rng)
    analytic = 0.5 * float(mu @ (a * mu)) + 0.5 * sigma2 * float(a.sum())
    if sigma2 == 0:
        v = 0.5 * float(mu @ (a * mu))
        return v, analytic, 0.0
    x = mu + np.sqrt(sigma2) * rng.standard_normal((n_samples, mu.size))
    vals = 0.5 * (x * x) @ a
    return float(vals.mean()), analytic, float(vals.std(ddof=1) / np.sqrt(n_samples))


def write_diag_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "trace_est", "dom_eig", "measured_gap", "taylor_gap"])
        for r in rows:
            w.writerow([r["step"]] + [_fmt(r.get(k)) for k in ("trace_est", "dom_eig", "measured_gap", "taylor_gap")])


def _fmt(x):
    return "" if x is None else repr(float(x))
