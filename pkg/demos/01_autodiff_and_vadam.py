# coding: utf-8

# # Gradients, then a Gaussian over parameters
#
# A short tour of the two building blocks: the reverse-mode tape and the
# VAdam update that learns a diagonal Gaussian instead of a point estimate.
# Run with `python demos/01_autodiff_and_vadam.py`.

# In[1]:

import numpy as np

from distnas import autodiff as ad
from distnas.ngvi import ArchDistribution, VAdamState, vadam_step

np.set_printoptions(precision=4, suppress=True)


# ## The tape
#
# Leaves made with `ad.param` collect gradients; `ad.constant` leaves do not.
# A softmax-weighted sum of two features, pushed through a cross-entropy:

# In[2]:

rng = np.random.default_rng(0)
x = ad.constant(rng.standard_normal((4, 3)))
W = ad.param(rng.standard_normal((3, 2)))
loss = ad.cross_entropy(ad.matmul(x, W), [0, 1, 1, 0])
loss.backward()
print("loss", float(loss.value))
print("dL/dW\n", W.grad)


# Central differences agree to ~1e-10:

# In[3]:

def f(flat):
    return float(ad.cross_entropy(ad.matmul(x, ad.constant(flat.reshape(3, 2))), [0, 1, 1, 0]).value)

num = ad.numeric_grad(f, W.value.ravel())
print("max |reverse - numeric|", np.abs(W.grad.ravel() - num).max())


# ## VAdam on a problem with a known answer
#
# Bayesian linear regression with a Gaussian prior has a closed-form
# posterior. VAdam sees only gradients of the mean negative log-likelihood,
# yet its mean should settle on the posterior mean, and its variance
# 1 / (N (s + delta/N)) near the posterior marginals.

# In[4]:

N, d, noise, delta = 200, 5, 0.5, 1.0
X = rng.standard_normal((N, d))
w_true = np.array([1.0, -2.0, 0.5, 1.5, -1.0])
y = X @ w_true + noise * rng.standard_normal(N)

Lam = X.T @ X / noise**2 + delta * np.eye(d)
post_mean = np.linalg.solve(Lam, X.T @ y / noise**2)

grad = lambda th: X.T @ (X @ th - y) / (N * noise**2)

state = VAdamState(ArchDistribution.prior(d, delta, N), beta=0.01, gamma=0.9, M=1)
avg = np.zeros(d)
steps = 20000
for t in range(steps):
    vadam_step(state, grad, rng)
    if t >= steps // 2:
        avg += state.dist.mu
avg /= steps - steps // 2


# In[5]:

print("posterior mean ", post_mean)
print("VAdam (averaged)", avg)
print("posterior sd   ", np.sqrt(np.diag(np.linalg.inv(Lam))))
print("VAdam sd       ", state.dist.sigma)


# The means agree closely. The sd is about three times too wide: `s` tracks
# the square of the full-batch gradient at sampled points, which is a crude
# stand-in for curvature. The VON variant uses the Hessian diagonal directly
# and lands on the mean-field variance exactly (see `tests/test_ngvi.py`).
