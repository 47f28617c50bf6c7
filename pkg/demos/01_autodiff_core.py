"""
The numpy autodiff core
=======================

Build a small graph, pull gradients out of it, and check them against
central differences.  Then look at the Jacobi SVD that the diagnostics use.
"""

import numpy as np

from multialign import tensor as T
from multialign.tensor import Tensor, gradcheck, svd_values

rng = np.random.default_rng(0)

# a two-layer network with a softplus head, written directly against the ops
x = Tensor(rng.standard_normal((5, 3)))
w1 = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w2 = Tensor(rng.standard_normal((4, 1)), requires_grad=True)
loss = T.softplus(T.tanh(x @ w1) @ w2).mean()
grads = T.backward(loss)
print("loss", loss.item())
print("dL/dw2", grads[w2].ravel())

# the same graph as a function of its leaves, handed to the finite-difference checker
err = gradcheck(lambda ts: T.softplus(T.tanh(Tensor(x.data) @ ts[0]) @ ts[1]).mean(), [w1.data, w2.data])
print(f"max relative error vs central differences: {err:.2e}")

# no_grad turns recording off, e.g. for sampling
with T.no_grad():
    y = T.tanh(x @ w1)
print("recorded under no_grad:", y.requires_grad)

# singular values: compare against LAPACK on a tall random matrix
a = rng.standard_normal((40, 6))
print("jacobi :", np.round(svd_values(a), 6))
print("lapack :", np.round(np.linalg.svd(a, compute_uv=False), 6))

# rank deficiency shows up as exact-looking zeros at the tail
b = rng.standard_normal((8, 2)) @ rng.standard_normal((2, 5))
print("rank-2 :", svd_values(b))
