"""
The GCQ network: shapes, equivariance and hand-written gradients
=================================================================

"""

import numpy as np
from gcq import GCQNetwork
from gcq.model import gradcheck_max_error, random_problem
from gcq.nn import Adam, masked_mse

# encoder 8-32-32, one graph convolution, CAV mask, Q head 32-32-32-16, three actions
net = GCQNetwork(seed=0)
for name, shape, size in net.describe():
    print(f"{name:<14} {str(shape):>9} {size:>6}")
print("total", net.count_parameters())

# one observation with 6 real nodes padded to 10 slots
X, A, M, target, sel = random_problem(seed=1, n_nodes=6, n_max=10)
Q = net.forward(X, A, M)
print("\nQ values, one row per slot (zero rows are HDVs or padding):")
print(np.round(Q, 3))

# reordering the vehicles reorders the outputs and nothing else
perm = np.concatenate([np.random.default_rng(0).permutation(6), np.arange(6, 10)])
Qp = net.forward(X[perm], A[np.ix_(perm, perm)], M[perm])
print("permutation deviation:", np.abs(Qp - Q[perm]).max())

# backpropagation is written by hand; compare it with central differences
print("max relative gradient error over 20 problems: %.2e" % gradcheck_max_error(range(20)))

# a few Adam steps on the masked loss: only (CAV slot, chosen action) entries count
adam = Adam(lr=1e-3)
for it in range(201):
    Q = net.forward(X, A, M)
    loss, dQ = masked_mse(Q, target, sel)
    grads, _ = net.backward(dQ)
    adam.step(net.parameters(), grads)
    if it % 50 == 0:
        print(f"step {it:3d} masked loss {loss:.4f}")
