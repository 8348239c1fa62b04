"""Uncontrolled qubit ensemble under homodyne measurement of sigma_z.

Every label starts maximally mixed. Measurement drives each path to one of
the two eigenstates, so V = 1 - z^2 decays to zero, and its mean tracks
V_0 - 4 int E[V^2] ds up to Monte-Carlo error.
"""

import numpy as np

from gbqf.experiments import state_reduction
from gbqf.meanfield import UGrid

res = state_reduction(UGrid(8), T=10.0, K=200, seed=0)

print("    t      E[V]     residual   3 se")
for n in np.linspace(0, len(res.times) - 1, 11).astype(int):
    print(
        f"{res.times[n]:5.1f}  {res.mean_V[n]:.2e}  {res.residual[n]:+.4f}  {3 * res.residual_se[n]:.4f}"
    )

# where did the paths end up? V_T ~ 0 means a pure eigenstate
print("paths with V_T < 1e-6:", int(np.sum(res.V_T < 1e-6)), "of", res.V_T.size)
