"""Conjugate Bayesian linear regression, the analytic oracle for posterior recovery."""
from dataclasses import dataclass

import numpy as np

from distnas.ngvi import ArchDistribution, BBBState, VAdamState, bbb_step, vadam_step, von_step

TRUE_W = np.array([1.0, -2.0, 0.5, 1.5, -1.0])


@dataclass
class Problem:
    X: np.ndarray
    y: np.ndarray
    noise: float
    delta: float

    @property
    def N(self):
        return len(self.y)

    @property
    def precision(self):
        return self.X.T @ self.X / self.noise**2 + self.delta * np.eye(self.X.shape[1])

    @property
    def post_mean(self):
        return np.linalg.solve(self.precision, self.X.T @ self.y / self.noise**2)

    @property
    def meanfield_var(self):
        # optimal diagonal-Gaussian variance under a full-covariance posterior
        return 1.0 / np.diag(self.precision)

    # per-sample average negative log likelihood: l(th) = mean_i (y_i - x_i th)^2 / (2 noise^2)
    def grad(self, th):
        return self.X.T @ (self.X @ th - self.y) / (self.N * self.noise**2)

    def hess_diag(self, th):
        return np.diag(self.X.T @ self.X) / (self.N * self.noise**2)


def make_problem(seed=0, N=200, noise=0.5, delta=1.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, TRUE_W.size))
    y = X @ TRUE_W + noise * rng.standard_normal(N)
    return Problem(X, y, noise, delta)


def run_von(prob, steps=500, beta=0.1, seed=1):
    st = VAdamState(ArchDistribution.prior(prob.X.shape[1], prob.delta, prob.N), beta=beta, gamma=0.0, M=1)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        von_step(st, prob.grad, prob.hess_diag, rng)
    return st


def run_vadam(prob, steps=20000, beta=0.01, gamma=0.9, M=1, seed=1):
    """Returns (state, mean of mu over the second half of the run)."""
    st = VAdamState(ArchDistribution.prior(prob.X.shape[1], prob.delta, prob.N), beta=beta, gamma=gamma, M=M)
    rng = np.random.default_rng(seed)
    acc = np.zeros(prob.X.shape[1])
    for t in range(steps):
        vadam_step(st, prob.grad, rng)
        if t >= steps // 2:
            acc += st.dist.mu
    return st, acc / (steps - steps // 2)


def run_bbb(prob, steps=40000, lr=0.05, seed=2):
    """Returns (state, averaged mu, averaged sigma^2) over the second half."""
    d = prob.X.shape[1]
    st = BBBState.create(np.zeros(d), np.full(d, 0.5), lr_mu=lr, lr_sigma=lr, delta=prob.delta, N=prob.N, M=1)
    rng = np.random.default_rng(seed)
    mu_acc = np.zeros(d)
    s2_acc = np.zeros(d)
    for t in range(steps):
        bbb_step(st, prob.grad, rng)
        if t >= steps // 2:
            mu_acc += st.mu
            s2_acc += st.sigma**2
    n = steps - steps // 2
    return st, mu_acc / n, s2_acc / n
