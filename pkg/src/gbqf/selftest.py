"""Quick oracle checks, run by ``gbqf selftest``. Each returns a bool."""

from __future__ import annotations

import numpy as np

from . import qla
from .experiments import feedback_alpha, qubit_model, zz_coupling
from .filtering import FilterModel, innovation_diffusion, lindblad_drift, simulate_filter, simulate_sse
from .graphon import StepKernel, cut_norm, op_norm
from .meanfield import UGrid, solve_graphon_lindblad
from .graphon import Product
from .nbody import (
    BlockSystemConfig,
    check_counting_identities,
    permutation_apply,
    permute_drivers,
    simulate_nbody_sse,
)
from .sde import NoisePath, TimeGrid, generate_noise


def contraction_lemma(rng):
    for d in (2, 3):
        for _ in range(10):
            A = qla.random_two_body(d, rng)
            g = qla.pure_density(qla.random_pure_state(d, rng))
            eye = np.eye(d)
            lhs = np.kron(eye, g) @ A @ np.kron(eye, g)
            rhs = np.kron(qla.mean_field_contract(A, g), g)
            if qla.hs_norm(lhs - rhs) > 1e-10:
                return False
    return True


def eigenstate_fixed_points(rng):
    m = FilterModel(np.zeros((2, 2)), qla.SZ)
    zero = [
        lindblad_drift(np.eye(2) / 2, m),
        lindblad_drift(qla.RHO_G, m),
        innovation_diffusion(qla.RHO_G, m),
        innovation_diffusion(np.eye(2) / 2, m) - qla.SZ,
    ]
    return all(np.abs(z).max() < 1e-14 for z in zero)


def counting(rng):
    for N in (1, 2):
        g = [qla.pure_density(qla.random_pure_state(2, rng)) for _ in range(2)]
        if check_counting_identities(2, N, np.array(g)) > 1e-10:
            return False
    return True


def sandwich(rng):
    for _ in range(20):
        k = int(rng.integers(1, 7))
        w = rng.uniform(-1, 1, (k, k))
        kern = StepKernel(np.concatenate([[0], np.sort(rng.uniform(0, 1, k - 1)), [1]]), w + w.T)
        c, o = cut_norm(kern), op_norm(kern)
        if not (c <= o + 1e-12 and o <= 4 * c + 1e-12):
            return False
    return True


def sse_density_coupling(rng):
    m = FilterModel(qla.SX, qla.SZ)
    psi = qla.random_pure_state(2, rng)
    grid = TimeGrid(0, 0.5, 500)
    noise = generate_noise(1, grid, 7)
    a = simulate_sse(m, psi, grid, noise)
    b, _ = simulate_filter(m, qla.pure_density(psi), grid, noise)
    return qla.hs_norm(qla.pure_density(a.states) - b.states).max() < 1e-2


def feedback_equilibrium(rng):
    return abs(feedback_alpha(0.25, qla.RHO_G)) < 1e-12 and abs(
        feedback_alpha(0.75, qla.RHO_E)
    ) < 1e-12


def mean_field_symmetry(rng):
    grid = TimeGrid(0, 1, 200)
    mf = solve_graphon_lindblad(
        qubit_model(), zz_coupling(), Product(), UGrid(8), grid, np.eye(2) / 2
    )
    return np.abs(qla.bloch_z(mf.m)).max() < 1e-12


def permutation_equivariance(rng):
    c, N = 2, 2
    xi = np.kron(np.array([[1, 0.5], [0.5, 1]]), np.ones((N, N)))
    np.fill_diagonal(xi, 0)
    m = FilterModel(qla.SX, qla.SZ)
    psi = np.array([qla.random_pure_state(2, rng)] * 2)
    cfg = BlockSystemConfig(c, N, m, zz_coupling(), xi, psi)
    grid = TimeGrid(0, 0.2, 100)
    noise = generate_noise(c * N, grid, 3)
    perms = [[1, 0], [1, 0]]
    moved = NoisePath(grid, permute_drivers(noise.increments, perms, c, N))
    a = simulate_nbody_sse(cfg, grid, noise)
    b = simulate_nbody_sse(cfg, grid, moved)
    return np.abs(permutation_apply(a.states, perms, c, N, 2) - b.states).max() < 1e-8


CHECKS = [
    ("contraction lemma", contraction_lemma),
    ("eigenstate fixed points", eigenstate_fixed_points),
    ("counting identities", counting),
    ("cut/operator norm sandwich", sandwich),
    ("pure-state vs density filter", sse_density_coupling),
    ("feedback equilibria", feedback_equilibrium),
    ("mean-field z symmetry", mean_field_symmetry),
    ("class permutation equivariance", permutation_equivariance),
]


def run_selftest(seed=0):
    rng = np.random.default_rng(seed)
    return {name: bool(fn(rng)) for name, fn in CHECKS}
