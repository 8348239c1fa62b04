import csv

import numpy as np
import pytest

from gbqf import qla
from gbqf.filtering import FilterModel, simulate_filter
from gbqf.graphon import Block, Constant, Product, StepKernel
from gbqf.meanfield import (
    MeanFieldPath,
    UGrid,
    block_reduce,
    coupling_hamiltonian,
    ensemble_statistics,
    kernel_matrix,
    label_noise,
    picard_iterate,
    simulate_block_system,
    simulate_graphon_particle,
    simulate_mckean_vlasov,
    solve_graphon_lindblad,
    stability_experiment,
)
from gbqf.sde import NoisePath, TimeGrid, generate_noise

ZZ = np.kron(qla.SZ, qla.SZ)
Z2 = np.zeros((2, 2))


def lindblad_exact(H, L, rho0, times):
    # vectorized generator, exponentiated through its eigen-decomposition
    d = H.shape[0]
    eye = np.eye(d)
    LdL = L.conj().T @ L
    gen = (
        -1j * (np.kron(H, eye) - np.kron(eye, H.T))
        + np.kron(L, L.conj())
        - 0.5 * (np.kron(LdL, eye) + np.kron(eye, LdL.T))
    )
    w, v = np.linalg.eig(gen)
    c = np.linalg.solve(v, rho0.reshape(-1))
    return np.array([(v @ (np.exp(w * t) * c)).reshape(d, d) for t in times])


def test_ugrid():
    g = UGrid(4)
    np.testing.assert_allclose(g.labels, [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(g.weights.sum(), 1.0)
    with pytest.raises(ValueError):
        UGrid(0)


def test_coupling_hamiltonian_by_hand():
    rng = np.random.default_rng(0)
    ug = UGrid(3)
    A = qla.random_two_body(2, rng)
    m = np.array([qla.random_density(2, rng) for _ in range(3)])
    kmat = kernel_matrix(Product(), ug.labels, ug)
    out = coupling_hamiltonian(A, kmat, m)
    for a in range(3):
        ref = sum(ug.labels[a] * ug.labels[b] * qla.mean_field_contract(A, m[b]) for b in range(3)) / 3
        np.testing.assert_allclose(out[a], ref, atol=1e-14)
        np.testing.assert_allclose(out[a], qla.dagger(out[a]), atol=1e-14)


def test_solver_decoupled_matches_lindblad():
    rng = np.random.default_rng(1)
    H, L = qla.random_hermitian(2, rng), 0.7 * qla.SZ + 0.3 * qla.SX
    m = FilterModel(H, L)
    grid = TimeGrid(0, 1, 200)
    rho0 = np.array([qla.random_density(2, rng) for _ in range(3)])
    path = solve_graphon_lindblad(m, ZZ, Constant(0.0), UGrid(3), grid, rho0)
    for b in range(3):
        exact = lindblad_exact(H, L, rho0[b], grid.times)
        np.testing.assert_allclose(path.m[:, b], exact, atol=1e-9)


def test_solver_trivial_constant():
    grid = TimeGrid(0, 1, 50)
    rho0 = qla.random_density(2, np.random.default_rng(2))
    path = solve_graphon_lindblad(FilterModel(Z2, Z2), np.zeros((4, 4)), Product(), UGrid(4), grid, rho0)
    np.testing.assert_allclose(path.m, np.broadcast_to(rho0, path.m.shape), atol=1e-14)


def test_reference_model_z_stays_zero():
    grid = TimeGrid(0, 2, 400)
    path = solve_graphon_lindblad(FilterModel(Z2, qla.SZ), ZZ, Product(), UGrid(16), grid, np.eye(2) / 2)
    assert np.abs(qla.bloch_z(path.m)).max() < 1e-14


def test_rk4_fourth_order():
    rng = np.random.default_rng(3)
    m = FilterModel(qla.SX, qla.SZ)
    rho0 = qla.pure_density(qla.random_pure_state(2, rng))
    w = Block([[1, 0.4], [0.4, 0.9]])
    finals = []
    for n in (20, 40, 80):
        p = solve_graphon_lindblad(m, 3 * ZZ, w, UGrid(2), TimeGrid(0, 1, n), rho0)
        finals.append(p.m[-1])
    e1 = qla.hs_norm(finals[0] - finals[1]).max()
    e2 = qla.hs_norm(finals[1] - finals[2]).max()
    assert 10 < e1 / e2 < 22


def test_path_interpolation_and_csv(tmp_path):
    grid = TimeGrid(0, 1, 4)
    m = np.arange(5, dtype=complex)[:, None, None, None] * np.ones((5, 2, 2, 2))
    path = MeanFieldPath(grid, UGrid(2), m)
    np.testing.assert_allclose(path.at(0.25), m[1])
    np.testing.assert_allclose(path.at(0.375), 1.5 * np.ones((2, 2, 2)))
    np.testing.assert_allclose(path.at(1.0), m[4])
    out = tmp_path / "mf.csv"
    path.to_csv(out)
    rows = list(csv.reader(open(out)))
    assert rows[0][:4] == ["t", "u", "re0", "im0"]
    assert len(rows) == 1 + 5 * 2
    assert float(rows[3][0]) == 0.25 and float(rows[3][1]) == 0.25


def test_particle_reduces_to_filter():
    rng = np.random.default_rng(4)
    m = FilterModel(qla.SX, qla.SZ)
    grid = TimeGrid(0, 1, 300)
    nz = generate_noise(1, grid, 5)
    rho0 = qla.random_density(2, rng)
    ref, _ = simulate_filter(m, rho0, grid, nz)
    mf = solve_graphon_lindblad(m, ZZ, Product(), UGrid(4), grid, rho0)
    a, _ = simulate_graphon_particle(0.3, mf, m, ZZ, Constant(0.0), grid, nz, rho0)
    np.testing.assert_allclose(a.states, ref.states, atol=1e-13)
    # A = I x I gives the identity mean-field operator: a global phase only
    b, _ = simulate_graphon_particle(0.3, mf, m, np.eye(4), Product(), grid, nz, rho0)
    np.testing.assert_allclose(b.states, ref.states, atol=1e-12)
    with pytest.raises(ValueError):
        simulate_graphon_particle(1.3, mf, m, ZZ, Product(), grid, nz, rho0)


def test_ensemble_mean_matches_mean_path():
    m = FilterModel(qla.SX, qla.SZ)
    grid = TimeGrid(0, 1, 500)
    ug = UGrid(2)
    w = Block([[1, 0.5], [0.5, 1]])
    mf = solve_graphon_lindblad(m, ZZ, w, ug, grid, qla.RHO_E)
    nz = label_noise(grid, 0, 2, 500)
    mean, se = ensemble_statistics(m, ZZ, w, ug, grid, nz, qla.RHO_E, mf)
    gap = qla.hs_norm(mean - mf.m)
    idx = np.arange(50, 501, 50)
    assert np.all(gap[idx] <= 3 * se[idx] + 5 * grid.dt)


def test_labels_uncorrelated():
    m = FilterModel(qla.SX, qla.SZ)
    grid = TimeGrid(0, 1, 200)
    ug = UGrid(2)
    mf = solve_graphon_lindblad(m, ZZ, Product(), ug, grid, np.eye(2) / 2)
    K = 400
    nz = label_noise(grid, 3, 2, K)
    traj, _ = simulate_graphon_particle(
        ug.labels, mf, m, ZZ, Product(), grid,
        NoisePath(grid, np.swapaxes(nz.increments, 0, 1)), np.eye(2) / 2, record_every=200,
    )
    z = qla.bloch_z(traj.final)
    za, zb = z[:, 0] - z[:, 0].mean(), z[:, 1] - z[:, 1].mean()
    prod = za * zb
    assert abs(prod.mean()) <= 3 * prod.std(ddof=1) / np.sqrt(K)


def test_picard_uncoupled_converges_at_once():
    m = FilterModel(qla.SX, qla.SZ)
    grid = TimeGrid(0, 0.5, 100)
    p = picard_iterate(m, ZZ, Constant(0.0), UGrid(2), grid, qla.RHO_E, K=20, iterations=4, tol=0.0)
    assert p.diagnostics["distances"][1] == 0.0
    assert len(p.diagnostics["distances"]) == 2
    with pytest.raises(ValueError):
        picard_iterate(m, ZZ, Constant(0.0), UGrid(2), grid, qla.RHO_E, K=2, iterations=0)


def test_picard_contracts():
    m = FilterModel(qla.SX, qla.SZ)
    grid = TimeGrid(0, 0.5, 100)
    p = picard_iterate(m, 2 * ZZ, Product(), UGrid(2), grid, qla.RHO_E, K=50, iterations=4)
    d = p.diagnostics["distances"]
    assert d[1] < 0.5 * d[0] and d[2] < 0.5 * d[1]
    assert not p.diagnostics["diverging"]


def test_picard_agrees_with_solver():
    m = FilterModel(qla.SX, qla.SZ)
    grid = TimeGrid(0, 0.5, 250)
    w = Block([[1, 0.5], [0.5, 1]])
    p = picard_iterate(m, ZZ, w, UGrid(2), grid, qla.RHO_E, K=300, iterations=6, tol=1e-8)
    ref = solve_graphon_lindblad(m, ZZ, w, UGrid(2), grid, qla.RHO_E)
    idx = np.arange(25, 251, 25)
    gap = qla.hs_norm(p.m - ref.m)[idx]
    assert np.all(gap <= 3 * p.diagnostics["se"][idx] + 5 * grid.dt)


def test_block_reduce():
    W = [[1, 0.5], [0.5, 0.2]]
    np.testing.assert_allclose(block_reduce(Block(W), 2), W)
    fine = StepKernel.uniform(np.kron(np.array(W), np.ones((2, 2))))
    np.testing.assert_allclose(block_reduce(fine, 2), W)
    with pytest.raises(ValueError):
        block_reduce(Product(), 2)
    with pytest.raises(ValueError):
        block_reduce(StepKernel.uniform([[1, 0.5, 0], [0.5, 1, 0], [0, 0, 1]]), 2)


def test_block_system_single_class_and_decoupled():
    m = FilterModel(qla.SX, qla.SZ)
    grid = TimeGrid(0, 1, 200)
    nz = generate_noise(1, grid, 1)
    traj = simulate_block_system(m, ZZ, [[1.0]], grid, nz, qla.RHO_E[None])
    mf = solve_graphon_lindblad(m, ZZ, Constant(1.0), UGrid(1), grid, qla.RHO_E)
    ref, _ = simulate_graphon_particle(0.5, mf, m, ZZ, Constant(1.0), grid, nz, qla.RHO_E)
    np.testing.assert_allclose(traj.states[:, 0], ref.states, atol=1e-13)
    nz2 = generate_noise(2, grid, 2)
    traj = simulate_block_system(m, ZZ, np.zeros((2, 2)), grid, nz2, np.array([qla.RHO_E, qla.RHO_G]))
    for i, r in enumerate((qla.RHO_E, qla.RHO_G)):
        ref, _ = simulate_filter(m, r, grid, nz2.select_drivers([i]))
        np.testing.assert_allclose(traj.states[:, i], ref.states, atol=1e-13)


def test_block_means_match_fine_grid():
    m = FilterModel(qla.SX, qla.SZ)
    grid = TimeGrid(0, 1, 200)
    w = Block([[1, 0.3], [0.3, 0.8]])
    rho0 = np.array([qla.RHO_E, np.eye(2) / 2])
    coarse = solve_graphon_lindblad(m, ZZ, w, UGrid(2), grid, rho0)
    fine = solve_graphon_lindblad(m, ZZ, w, UGrid(8), grid, np.repeat(rho0, 4, axis=0))
    cell = fine.m.reshape(grid.n_steps + 1, 2, 4, 2, 2).mean(axis=2)
    np.testing.assert_allclose(cell, coarse.m, atol=1e-12)


def test_block_system_sse_form_batches():
    m = FilterModel(qla.SX, qla.SZ)
    grid = TimeGrid(0, 0.5, 100)
    nz = generate_noise(2, grid, 0, path_index=[0, 1, 2])
    psi = np.array([[1, 0], [0, 1]], dtype=complex)
    traj = simulate_block_system(m, ZZ, [[1, 0.5], [0.5, 1]], grid, nz, psi, form="sse")
    assert traj.states.shape == (101, 3, 2, 2)
    np.testing.assert_allclose(np.linalg.norm(traj.states, axis=-1), 1, atol=1e-12)
    with pytest.raises(ValueError):
        simulate_block_system(m, ZZ, [[1]], grid, generate_noise(1, grid, 0), psi[:1], form="x")


def test_stability_identical_and_initial():
    m = FilterModel(qla.SX, qla.SZ)
    grid = TimeGrid(0, 0.5, 100)
    w = Block([[1, 0.5], [0.5, 1]])
    same = stability_experiment(w, w, m, ZZ, UGrid(2), grid, qla.RHO_E, K=5, n_records=10)
    assert same.sup_gap == 0.0 and same.l1 == 0.0
    other = Block([[0.9, 0.5], [0.5, 1]])
    res = stability_experiment(w, other, m, ZZ, UGrid(2), grid, qla.RHO_E, K=5, n_records=10)
    assert res.gap[0] == 0.0 and res.sup_gap > 0
    assert res.l1 == pytest.approx(0.025)


def test_mckean_vlasov_uncoupled_is_filter():
    m = FilterModel(qla.SX, qla.SZ)
    grid = TimeGrid(0, 0.5, 100)
    nz = label_noise(grid, 0, 2, 3)
    traj = simulate_mckean_vlasov(m, ZZ, Constant(0.0), UGrid(2), grid, nz, qla.RHO_E)
    ref, _ = simulate_filter(m, qla.RHO_E, grid, nz)
    np.testing.assert_allclose(traj.states, ref.states, atol=1e-13)
