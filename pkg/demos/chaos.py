"""Finite-N block system against its graphon mean-field limit.

Two classes, N particles each, all started in the same product state. D_N is
the trace distance between the one-particle marginal and the limit path,
averaged over particles and paths; it should not grow with N.
Takes a minute or two.
"""

import numpy as np

from gbqf.experiments import chaos_sweep, qubit_model, zz_coupling

z = 0.5
psi = np.array([np.sqrt((1 + z) / 2), np.sqrt((1 - z) / 2)], dtype=complex)
W = [[1.0, 0.5], [0.5, 1.0]]
Ns = [1, 2, 3]

res = chaos_sweep(2, Ns, qubit_model(), zz_coupling(), W, np.array([psi, psi]), T=1.0, dt=1e-3, K=20, seed=0)

print(" N   E[D_N(T)]   se")
for N, d, s in zip(Ns, res.mean_D, res.se_D):
    print(f"{N:2d}   {d:.5f}    {s:.5f}")
print(f"log-log slope {res.slope:.2f}; non-increasing within 2 se: {res.non_increasing(2.0)}")
