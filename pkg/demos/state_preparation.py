"""Feedback steering of a qubit population toward label-dependent targets.

Labels below 1/2 are pushed to the ground state and labels above to the
excited state. The plot-free readout is the mean fidelity to the ground state
on each half.
"""

import numpy as np

from gbqf import qla
from gbqf.experiments import feedback_alpha, state_preparation
from gbqf.meanfield import UGrid

res = state_preparation(UGrid(8), T=10.0, K=50, seed=0)

print("    t   F(u<1/2)  F(u>=1/2)")
for n in np.linspace(0, len(res.times) - 1, 11).astype(int):
    print(f"{res.times[n]:5.1f}  {res.mean_over(True)[n]:.4f}   {res.mean_over(False)[n]:.2e}")
print("control clips:", res.clip_events)

# once at the target, the feedback switches itself off
print("alpha at target, lower half:", feedback_alpha(0.25, qla.RHO_G))
print("alpha at target, upper half:", feedback_alpha(0.75, qla.RHO_E))
