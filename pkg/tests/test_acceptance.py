"""Acceptance criteria, one test each, at the stated tolerances."""

import itertools
import time

import numpy as np

from gbqf import qla
from gbqf.experiments import (
    chaos_sweep,
    feedback_alpha,
    qubit_model,
    state_preparation,
    state_reduction,
    zz_coupling,
)
from gbqf.filtering import (
    FilterModel,
    normalize_linear,
    simulate_filter,
    simulate_linear,
    simulate_sse,
    trace_martingale,
)
from gbqf.graphon import Block, Product, StepKernel, cut_norm, deterministic_weights, op_norm
from gbqf.meanfield import UGrid, picard_iterate, solve_graphon_lindblad, stability_experiment
from gbqf.nbody import (
    BlockSystemConfig,
    check_counting_identities,
    permutation_apply,
    permute_drivers,
    simulate_nbody_sse,
)
from gbqf.sde import NoisePath, TimeGrid, coarsen, generate_noise

ZZ = np.kron(qla.SZ, qla.SZ)
BLOCK_W = np.array([[1.0, 0.5], [0.5, 1.0]])


def reference_filter():
    rng = np.random.default_rng(0)
    model = FilterModel(qla.random_hermitian(2, rng), qla.SZ, 1.0)
    return model, qla.random_pure_state(2, rng)


def test_01_purity_preservation(report):
    start = time.time()
    model, psi = reference_filter()
    loss = []
    for dt in (4e-3, 2e-3, 1e-3):
        grid = TimeGrid.from_dt(1.0, dt)
        noise = generate_noise(1, grid, 1, list(range(50)))
        traj, _ = simulate_filter(model, qla.pure_density(psi), grid, noise)
        loss.append(float(np.mean(np.max(1 - qla.purity(traj.states), axis=0))))
    elapsed = time.time() - start
    ok = loss[0] > loss[1] > loss[2] and loss[2] < 1e-2 and elapsed < 10
    report(1, "purity preservation", ok, f"loss={np.round(loss, 5).tolist()} t={elapsed:.1f}s")
    assert ok


def test_02_linear_nonlinear_oracle(report):
    start = time.time()
    model, psi = reference_filter()
    model = model.with_eta(0.7)
    gaps = []
    for n in (10_000, 20_000):
        grid = TimeGrid(0, 1, n)
        y = generate_noise(1, grid, 2)
        lin = simulate_linear(model, qla.pure_density(psi), grid, y)
        norm, dw = normalize_linear(lin, y, model)
        traj, _ = simulate_filter(model, qla.pure_density(psi), grid, dw)
        gaps.append(float(qla.hs_norm(norm.states - traj.states).max()))
    elapsed = time.time() - start
    ok = gaps[0] <= 1e-2 and gaps[0] / gaps[1] >= 1.25 and elapsed < 30
    report(2, "linear/nonlinear oracle", ok, f"gaps={gaps} t={elapsed:.1f}s")
    assert ok


def test_03_trace_martingale(report):
    # the left-point identity is exact for the Euler step of the linear filter
    rng = np.random.default_rng(3)
    model = FilterModel(qla.random_hermitian(2, rng), qla.SZ, 0.7)
    rho0 = qla.random_density(2, rng)
    grid = TimeGrid(0, 1, 1000)
    y = generate_noise(1, grid, 3, list(range(100)))
    lin = simulate_linear(model, rho0, grid, y, scheme="euler")
    tr = np.moveaxis(np.real(qla.trace(lin.states)), 0, -1)
    residual = float(np.abs(tr - trace_martingale(lin, y, model)).max())
    bound = 20 * grid.dt * np.linalg.norm(model.L, 2) ** 2
    ok = residual <= bound
    report(3, "trace martingale", ok, f"residual={residual:.3g} bound={bound:.3g}")
    assert ok


def test_04_sse_density_coupling(report):
    model, psi = reference_filter()
    base = TimeGrid(0, 1, 4000)
    noise = generate_noise(1, base, 4, list(range(20)))
    gaps = []
    for f in (8, 4, 2, 1):
        c = coarsen(noise, f)
        a = simulate_sse(model, psi, c.grid, c)
        b, _ = simulate_filter(model, qla.pure_density(psi), c.grid, c)
        gaps.append(float(np.mean(qla.hs_norm(qla.pure_density(a.states) - b.states).max(axis=0))))
    ratios = [gaps[k] / gaps[k + 1] for k in range(3)]
    ok = min(ratios) >= 1.25
    report(4, "SSE/density coupling", ok, f"ratios={np.round(ratios, 3).tolist()}")
    assert ok


def test_05_counting_identities(report):
    start = time.time()
    rng = np.random.default_rng(5)
    worst = 0.0
    for N in (1, 2, 3):
        for _ in range(20):
            gammas = np.array(
                [qla.pure_density(qla.random_pure_state(2, rng)) for _ in range(2 * N)]
            )
            worst = max(worst, check_counting_identities(2, N, gammas))
    elapsed = time.time() - start
    ok = worst <= 1e-10 and elapsed < 5
    report(5, "counting identities", ok, f"worst={worst:.2e} t={elapsed:.1f}s")
    assert ok


def test_06_contraction_lemma_and_bound(report):
    rng = np.random.default_rng(6)
    worst, violations = 0.0, 0
    for k in range(200):
        d = 2 + k % 2
        A = qla.random_two_body(d, rng)
        g = qla.pure_density(qla.random_pure_state(d, rng))
        eye = np.eye(d)
        lhs = np.kron(eye, g) @ A @ np.kron(eye, g)
        worst = max(worst, qla.hs_norm(lhs - np.kron(qla.mean_field_contract(A, g), g)))
        rho = qla.random_density(d, rng)
        if qla.hs_norm(qla.mean_field_contract(A, rho)) > qla.hs_norm(rho) * qla.hs_norm(A):
            violations += 1
    ok = worst <= 1e-10 and violations == 0
    report(6, "contraction lemma and norm bound", ok, f"worst={worst:.2e} violations={violations}")
    assert ok


def test_07_cut_norm_sandwich(report):
    start = time.time()
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(100):
        k = int(rng.integers(1, 9))
        cuts = np.sort(rng.uniform(0, 1, k - 1))
        w = rng.uniform(-1, 1, (k, k))
        kern = StepKernel(np.concatenate([[0], cuts, [1]]), 0.5 * (w + w.T))
        c, o = cut_norm(kern), op_norm(kern)
        if not (c <= o + 1e-12 and o <= 4 * c + 1e-12):
            violations += 1
    elapsed = time.time() - start
    ok = violations == 0 and elapsed < 20
    report(7, "cut-norm sandwich", ok, f"violations={violations} t={elapsed:.1f}s")
    assert ok


def test_08_propagation_of_chaos(report):
    z = 0.5
    psi = np.array([np.sqrt((1 + z) / 2), np.sqrt((1 - z) / 2)], dtype=complex)
    res = chaos_sweep(
        2, [1, 2, 3, 4], qubit_model(), zz_coupling(), BLOCK_W, np.array([psi, psi]),
        T=1.0, dt=1e-3, K=50, seed=0,
    )
    ok = res.non_increasing(2.0) and np.all(np.abs(res.mean_D0) <= 1e-12)
    report(
        8, "propagation of chaos", ok,
        f"E[D]={np.round(res.mean_D, 5).tolist()} se={np.round(res.se_D, 5).tolist()} "
        f"D0max={np.abs(res.mean_D0).max():.1e} slope={res.slope:.2f}",
    )
    assert ok


def test_09_two_solver_agreement(report):
    grid = TimeGrid(0, 1, 1000)
    idx = np.arange(100, 1001, 100)
    cases = [
        ("reference", qubit_model(), Product(), UGrid(4), np.eye(2) / 2),
        ("2-block", FilterModel(qla.SX, qla.SZ), Block(BLOCK_W), UGrid(2), qla.RHO_E),
    ]
    details, ok = [], True
    for name, model, w, ug, rho0 in cases:
        det = solve_graphon_lindblad(model, ZZ, w, ug, grid, rho0)
        pic = picard_iterate(model, ZZ, w, ug, grid, rho0, K=500, iterations=8, seed=0, tol=1e-6)
        gap = qla.hs_norm(pic.m - det.m)[idx]
        se = pic.diagnostics["se"][idx]
        worst = float(np.max(gap / (3 * se)))
        ok = ok and bool(np.all(gap <= 3 * se))
        details.append(f"{name}: max gap/(3se)={worst:.2f}")
    report(9, "mean-field two-solver agreement", ok, "; ".join(details))
    assert ok


def test_10_graphon_stability(report):
    model = FilterModel(qla.SX, qla.SZ)
    grid = TimeGrid.from_dt(2.0, 1e-3)
    gaps, ratios = [], []
    for eps in (0.05, 0.1, 0.2):
        r = stability_experiment(
            Block(BLOCK_W), Block(BLOCK_W - eps), model, ZZ, UGrid(8), grid, qla.RHO_E, K=200, seed=0
        )
        gaps.append(r.sup_gap)
        ratios.append(r.ratio)
    band = max(ratios) / min(ratios)
    ok = gaps[0] < gaps[1] < gaps[2] and band <= 3
    report(10, "graphon stability", ok, f"ratios={np.round(ratios, 4).tolist()} band={band:.2f}")
    assert ok


def test_11_state_reduction(report):
    start = time.time()
    res = state_reduction(UGrid(8), T=10.0, K=200, seed=0, dt=5e-3)
    elapsed = time.time() - start
    excess = float(np.max(np.abs(res.residual) - 3 * res.residual_se))
    ok = res.mean_V[-1] < 0.05 and excess <= 0.05 and elapsed < 120
    report(
        11, "state reduction", ok,
        f"E[V_T]={res.mean_V[-1]:.2e} max(|R|-3se)={excess:.3f} t={elapsed:.1f}s",
    )
    assert ok


def test_12_state_preparation(report):
    res = state_preparation(UGrid(8), T=10.0, K=50, seed=0, dt=5e-3)
    lower, upper = res.mean_over(True)[-1], res.mean_over(False)[-1]
    eq = abs(feedback_alpha(0.25, qla.RHO_G))
    ok = lower >= 0.9 and upper <= 0.1 and eq <= 1e-12
    report(12, "state preparation", ok, f"F(J-)={lower:.4f} F(J+)={upper:.2e} clips={res.clip_events}")
    assert ok


def test_13_class_symmetry(report):
    c, N = 2, 3
    rng = np.random.default_rng(13)
    model = FilterModel(qla.random_hermitian(2, rng), qla.SZ)
    xi = deterministic_weights(Block(BLOCK_W), c * N)
    psi = qla.random_pure_state(2, rng, size=(c,))
    cfg = BlockSystemConfig(c, N, model, ZZ, xi, psi)
    grid = TimeGrid(0, 1, 1000)
    noise = generate_noise(c * N, grid, 13)
    base = simulate_nbody_sse(cfg, grid, noise)
    worst = 0.0
    perms = list(itertools.permutations(range(N)))
    for k in range(6):
        p = [list(perms[k]), list(perms[(5 * k + 1) % len(perms)])]
        moved = NoisePath(grid, permute_drivers(noise.increments, p, c, N))
        other = simulate_nbody_sse(cfg, grid, moved)
        worst = max(worst, np.abs(permutation_apply(base.states, p, c, N, 2) - other.states).max())
    ok = worst <= 1e-8
    report(13, "class-symmetry equivariance", ok, f"worst={worst:.2e}")
    assert ok
