"""Cut and operator norms of step kernels, and sampled graphs converging to a graphon."""

import numpy as np

from gbqf.experiments import graphon_convergence_table
from gbqf.graphon import Block, Constant, StepKernel, cut_norm, op_norm

rng = np.random.default_rng(1)
print(" k   cut      op       op/cut")
for k in (1, 2, 4, 8):
    w = rng.uniform(-1, 1, (k, k))
    kern = StepKernel(np.linspace(0, 1, k + 1), 0.5 * (w + w.T))
    c, o = cut_norm(kern), op_norm(kern)
    print(f"{k:2d}  {c:.4f}  {o:.4f}  {o / c:.3f}")

# sampled graphs have an empty diagonal, so the distance includes a 1/n-sized term
for w, name in ((Constant(0.5), "constant 0.5"), (Block([[1.0, 0.5], [0.5, 1.0]]), "2-block")):
    print(f"{name}:  n   E[dist]  se")
    for n, mean, se in graphon_convergence_table(w, [4, 8, 16], samples=20, seed=0):
        print(f"{' ' * len(name)}  {n:2d}   {mean:.4f}  {se:.4f}")
