"""Natural-gradient variational inference for diagonal Gaussians.

The distribution is stored through its mean ``mu`` and the scaled precision
statistic ``s``; the variance is never stored and always derived as
``1 / (N * (s + delta_tilde))``.

All ``grad_fn`` callbacks return the gradient of the *per-sample average*
loss at a parameter draw. The ``N`` factor enters only through the variance
and the prior strength ``delta_tilde = delta / N``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ArchDistribution:
    mu: np.ndarray
    s: np.ndarray
    delta_tilde: float
    N: int

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=np.float64)
        self.s = np.array(self.s, dtype=np.float64)
        if self.s.shape != self.mu.shape:
            raise ValueError(f"mu and s shapes differ: {self.mu.shape} vs {self.s.shape}")
        if self.N < 1:
            raise ValueError("N must be a positive integer")
        if self.delta_tilde < 0:
            raise ValueError("delta_tilde must be nonnegative")
        if np.any(self.s < 0):
            raise ValueError("s must be nonnegative")

    @classmethod
    def prior(cls, shape, delta=1.0, N=1, s0=0.0):
        """Start at the prior mean with ``s = s0`` (``s0 = 0`` gives variance ``1/delta``)."""
        return cls(np.zeros(shape), np.full(shape, float(s0)), delta / N, N)

    @property
    def dim(self):
        return self.mu.size

    @property
    def delta(self):
        return self.delta_tilde * self.N

    @property
    def sigma2(self):
        with np.errstate(divide="ignore"):
            return 1.0 / (self.N * (self.s + self.delta_tilde))

    @property
    def sigma(self):
        return np.sqrt(self.sigma2)

    def copy(self):
        return ArchDistribution(self.mu.copy(), self.s.copy(), self.delta_tilde, self.N)


def sample(dist: ArchDistribution, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal(dist.mu.shape)
    sig = dist.sigma
    if np.all(np.isinf(sig)):
        raise ValueError("cannot sample: s + delta_tilde is zero")
    return dist.mu + sig * eps


def kl_diag_gauss(mu, sigma2, delta) -> float:
    """KL( N(mu, diag(sigma2)) || N(0, I/delta) )."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0) or delta <= 0:
        raise ValueError("sigma2 and delta must be positive")
    ds = delta * sigma2
    return float(0.5 * np.sum(ds + delta * mu * mu - 1.0 - np.log(ds)))


def elbo_estimate(dist: ArchDistribution, loss_fn, n_samples, rng) -> float:
    """Monte-Carlo negative ELBO: mean of ``N * loss`` over draws plus the closed-form KL."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    vals = np.empty(n_samples)
    for i in range(n_samples):
        v = float(loss_fn(sample(dist, rng)))
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss sample {v}")
        vals[i] = v
    return dist.N * float(np.mean(vals)) + kl_diag_gauss(dist.mu, dist.sigma2, dist.delta)


def sorted_mean(samples):
    """Mean over axis 0 that does not depend on the order of the samples."""
    a = np.sort(np.asarray(samples, dtype=np.float64), axis=0)
    return a.sum(axis=0) / a.shape[0]


@dataclass
class VAdamState:
    dist: ArchDistribution
    mu_prev: np.ndarray = None
    step: int = 0
    beta: float = 0.05
    gamma: float = 0.9
    M: int = 3
    sample: bool = True
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.mu_prev is None:
            self.mu_prev = self.dist.mu.copy()
        self.mu_prev = np.array(self.mu_prev, dtype=np.float64)
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.M < 1:
            raise ValueError("M must be >= 1")


def _draws(state: VAdamState, rng):
    if not state.sample:
        return [state.dist.mu.copy() for _ in range(state.M)]
    return [sample(state.dist, rng) for _ in range(state.M)]


def _avg_grad(state, grad_fn, rng):
    g = sorted_mean([np.asarray(grad_fn(th), dtype=np.float64) for th in _draws(state, rng)])
    if g.shape != state.dist.mu.shape:
        raise ValueError(f"gradient shape {g.shape} does not match mu {state.dist.mu.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient estimate")
    return g


def von_step(state: VAdamState, grad_fn, hess_diag_fn, rng=None):
    """Variational online-Newton step with an explicit Hessian diagonal."""
    d = state.dist
    thetas = _draws(state, rng)
    g = sorted_mean([grad_fn(th) for th in thetas])
    h = sorted_mean([hess_diag_fn(th) for th in thetas])
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
        raise FloatingPointError("non-finite gradient or Hessian estimate")
    s_new = (1 - state.beta) * d.s + state.beta * h
    if np.any(s_new < 0):
        msg = f"step {state.step}: clamped {int(np.sum(s_new < 0))} negative precision entries"
        log.warning(msg)
        state.warnings.append(msg)
        s_new = np.maximum(s_new, 0.0)
    mu_new = d.mu - state.beta * (g + d.delta_tilde * d.mu) / (s_new + d.delta_tilde)
    state.mu_prev = d.mu
    d.mu, d.s = mu_new, s_new
    state.step += 1
    return g


def vprop_step(state: VAdamState, grad_fn, rng=None):
    """Vprop: the Hessian diagonal is replaced by the squared gradient."""
    d = state.dist
    g = _avg_grad(state, grad_fn, rng)
    s_new = (1 - state.beta) * d.s + state.beta * (g * g)
    mu_new = d.mu - state.beta * (g + d.delta_tilde * d.mu) / (s_new + d.delta_tilde)
    state.mu_prev = d.mu
    d.mu, d.s = mu_new, s_new
    state.step += 1
    return g


def vadam_step(state: VAdamState, grad_fn, rng=None):
    """Vprop update plus a heavy-ball term rescaled by the old/new precision ratio.

    The draws are taken from the distribution *before* the update. On a
    non-finite gradient the state is left untouched.
    """
    d = state.dist
    g = _avg_grad(state, grad_fn, rng)
    s_new = (1 - state.beta) * d.s + state.beta * (g * g)
    denom = s_new + d.delta_tilde
    mu_new = d.mu - state.beta * (g + d.delta_tilde * d.mu) / denom
    if state.gamma:
        mu_new = mu_new + state.gamma * ((d.s + d.delta_tilde) / denom) * (d.mu - state.mu_prev)
    state.mu_prev = d.mu
    d.mu, d.s = mu_new, s_new
    state.step += 1
    return g


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class BBBState:
    """Bayes-by-backprop baseline with ``sigma = softplus(rho)``.

    Minimises the negative ELBO divided by ``N`` so step sizes are
    comparable with the natural-gradient optimizers.
    """

    mu: np.ndarray
    rho: np.ndarray
    lr_mu: float = 0.01
    lr_sigma: float = 0.01
    delta: float = 1.0
    N: int = 1
    M: int = 1
    step: int = 0

    @classmethod
    def create(cls, mu, sigma, **kw):
        return cls(np.array(mu, dtype=np.float64), softplus_inv(sigma), **kw)

    @property
    def sigma(self):
        return softplus(self.rho)


def bbb_step(state: BBBState, elbo_grad_fn, rng):
    """Reparameterised SGD step on (mu, rho).

    ``elbo_grad_fn(theta)`` returns the gradient of the average data loss at
    a draw; the KL part is handled in closed form.
    """
    sig = state.sigma
    gm = np.zeros_like(state.mu)
    gs = np.zeros_like(state.mu)
    for _ in range(state.M):
        eps = rng.standard_normal(state.mu.shape)
        g = np.asarray(elbo_grad_fn(state.mu + sig * eps), dtype=np.float64)
        gm += g
        gs += g * eps
    gm /= state.M
    gs /= state.M
    dt = state.delta / state.N
    gm = gm + dt * state.mu
    gs = gs + dt * sig - 1.0 / (state.N * sig)
    grho = gs / (1.0 + np.exp(-state.rho))
    state.mu = state.mu - state.lr_mu * gm
    state.rho = state.rho - state.lr_sigma * grho
    state.step += 1


# ---------------------------------------------------------------------------
# checkpoints


def save_distribution(path, dist: ArchDistribution, step=0, mu_prev=None, extra=None):
    """Write a checkpoint as JSON; floats use the shortest round-trip repr."""
    rec = {
        "format": "distnas-dist/1",
        "shape": list(dist.mu.shape),
        "mu": dist.mu.ravel().tolist(),
        "s": dist.s.ravel().tolist(),
        "delta_tilde": float(dist.delta_tilde),
        "N": int(dist.N),
        "step": int(step),
    }
    if mu_prev is not None:
        rec["mu_prev"] = np.asarray(mu_prev).ravel().tolist()
    if extra:
        rec.update(extra)
    Path(path).write_text(json.dumps(rec, indent=1, sort_keys=True))


def load_distribution(path):
    """Return ``(dist, step, mu_prev, record)``."""
    rec = json.loads(Path(path).read_text())
    shape = tuple(rec["shape"])
    dist = ArchDistribution(
        np.array(rec["mu"]).reshape(shape), np.array(rec["s"]).reshape(shape), rec["delta_tilde"], rec["N"]
    )
    mu_prev = None if "mu_prev" not in rec else np.array(rec["mu_prev"]).reshape(shape)
    return dist, rec["step"], mu_prev, rec
