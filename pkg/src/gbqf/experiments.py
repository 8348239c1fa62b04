"""Experiment drivers for the qubit reference models.

Every driver is deterministic given its seed: noise is keyed by
``(seed, path, driver)`` and reductions run in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qla
from .filtering import FilterModel
from .graphon import (
    Block,
    Product,
    cut_distance,
    deterministic_weights,
    sample_bernoulli,
    step_from_adjacency,
)
from .meanfield import (
    UGrid,
    kernel_matrix,
    label_noise,
    simulate_block_system,
    simulate_mckean_vlasov,
    solve_graphon_lindblad,
)
from .nbody import BlockSystemConfig, marginal, simulate_nbody_sse
from .filtering import simulate_ensemble
from .sde import NoisePath, TimeGrid, generate_noise, map_chunks

DEFAULT_U = 50.0
GAIN_COMMUTATOR = -8.0
GAIN_POPULATION = 5.0
QUBIT_T = 10.0
QUBIT_DT = 5e-3


def zz_coupling():
    return np.kron(qla.SZ, qla.SZ)


def qubit_model(control=False):
    """``H = 0``, ``L = sigma_z``, ``eta = 1``; control enters through ``sigma_x``."""
    return FilterModel(
        np.zeros((2, 2)), qla.SZ, 1.0, H_ctrl=qla.SX if control else None
    )


# -- control laws ----------------------------------------------------------------


def feedback_target(u):
    """``rho_g`` on labels below one half, ``rho_e`` from one half on."""
    u = np.asarray(u, dtype=float)
    return np.where((u < 0.5)[..., None, None], qla.RHO_G, qla.RHO_E)


def feedback_alpha(u, rho, U=DEFAULT_U):
    """State feedback driving labels ``u < 1/2`` to ``rho_g`` and the rest to ``rho_e``."""
    alpha = _feedback_raw(u, rho)
    return np.clip(alpha, -U, U)


def _feedback_raw(u, rho):
    rho = np.asarray(rho, dtype=complex)
    target = feedback_target(u)
    comm = qla.SX @ rho - rho @ qla.SX
    t1 = qla.trace(comm @ target)
    t2 = np.real(qla.trace(rho @ target))
    return np.real(GAIN_COMMUTATOR * 1j * t1) + GAIN_POPULATION * (1.0 - t2)


class ControlLaw:
    """Scalar control ``alpha(t, u, rho)`` clamped to ``[-U, U]``."""

    def __init__(self, U=DEFAULT_U):
        self.U = float(U)
        self.clip_events = 0

    def raw(self, t, u, rho):
        raise NotImplementedError

    def __call__(self, t, u, rho):
        a = np.asarray(self.raw(t, u, rho), dtype=float)
        self.clip_events += int(np.count_nonzero(np.abs(a) > self.U))
        return np.clip(a, -self.U, self.U)

    def for_labels(self, u):
        """Adapter to the ``control(t, rho)`` signature of the filters."""
        return lambda t, rho: self(t, u, rho)


class Zero(ControlLaw):
    def raw(self, t, u, rho):
        return np.zeros(np.shape(rho)[:-2])


class ConstantControl(ControlLaw):
    def __init__(self, value, U=DEFAULT_U):
        super().__init__(U)
        self.value = float(value)

    def raw(self, t, u, rho):
        return np.full(np.shape(rho)[:-2], self.value)


class StatePrepFeedback(ControlLaw):
    def raw(self, t, u, rho):
        return _feedback_raw(u, rho)


class Table(ControlLaw):
    """Piecewise-constant open-loop control ``values[n]`` on ``[times[n], times[n+1])``."""

    def __init__(self, times, values, U=DEFAULT_U):
        super().__init__(U)
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)

    def raw(self, t, u, rho):
        n = int(np.clip(np.searchsorted(self.times, t + 1e-12) - 1, 0, len(self.values) - 1))
        return np.full(np.shape(rho)[:-2], self.values[n])


# -- propagation of chaos ---------------------------------------------------------


@dataclass
class ChaosSweepResult:
    N: list
    mean_D: np.ndarray
    se_D: np.ndarray
    mean_D0: np.ndarray
    cut_term: np.ndarray
    inv_sqrt_N: np.ndarray
    fitted_C: float
    slope: float
    times: np.ndarray = None
    curves: dict = field(default_factory=dict)

    def rows(self):
        return [
            [n, m, s, m0, cut, r]
            for n, m, s, m0, cut, r in zip(
                self.N, self.mean_D, self.se_D, self.mean_D0, self.cut_term, self.inv_sqrt_N
            )
        ]

    def non_increasing(self, n_se=2.0):
        """Each mean is at most the previous one plus ``n_se`` pooled standard errors."""
        m, s = self.mean_D, self.se_D
        return all(
            m[k + 1] <= m[k] + n_se * np.hypot(s[k], s[k + 1]) for k in range(len(m) - 1)
        )


def chaos_sweep(
    c,
    N_list,
    model,
    A,
    W,
    psi0,
    T=1.0,
    dt=1e-3,
    K=50,
    seed=0,
    n_records=50,
    scheme="milstein",
    threads=None,
):
    """Distance of N-body marginals from coupled limit copies, for each ``N``.

    Particle ``(i, l)`` and its limit copy share driver ``i * N + l`` of path
    ``k``. The limit copy is the class-``i`` representative of the block
    system, whose mean field comes from the deterministic solver. Paths are
    split into chunks over ``threads`` workers; results do not depend on it.
    """
    if model.eta != 1.0:
        raise ValueError("chaos sweep runs in pure-state form (eta = 1)")
    W = np.atleast_2d(np.asarray(W, dtype=float))
    psi0 = np.asarray(psi0, dtype=complex)
    d = model.d
    if c * max(N_list) > 10 and d == 2:
        raise qla.MemoryCapExceeded("c * N above 10 qubits")
    grid = TimeGrid.from_dt(T, dt)
    every = max(1, grid.n_steps // n_records)
    block = Block(W)
    meanfield = solve_graphon_lindblad(
        model, A, block, UGrid(c), grid, qla.pure_density(psi0)
    )
    rows = {"mean": [], "se": [], "mean0": [], "cut": []}
    curves = {}
    times = None
    for N in N_list:
        n = c * N
        xi = deterministic_weights(block, n)
        cfg = BlockSystemConfig(c, N, model, A, xi, psi0)

        def run(paths, N=N, n=n, cfg=cfg):
            noise = generate_noise(n, grid, seed, list(paths))
            body = simulate_nbody_sse(
                cfg, grid, noise, record_every=every, scheme=scheme
            )
            # limit copies: batch (paths, N); copy (k, l) of class i uses slot i*N + l
            inc = noise.increments.reshape(len(paths), grid.n_steps, c, N)
            limit_noise = NoisePath(grid, np.moveaxis(inc, -1, 1), seed, noise.keys)
            limit = simulate_block_system(
                model, A, W, grid, limit_noise, psi0, form="sse",
                meanfield=meanfield, record_every=every, scheme=scheme,
            )
            out = np.empty((len(body.times), len(paths), c, N))
            for i in range(c):
                for l in range(N):
                    rho = marginal(body.states, i, l, c, N, d, pure=True)
                    phi = limit.states[:, :, l, i]
                    overlap = np.real(
                        np.einsum("...i,...ij,...j->...", np.conj(phi), rho, phi)
                    )
                    out[:, :, i, l] = np.clip(1.0 - overlap, 0.0, 1.0)
            return body.times, out

        parts = map_chunks(run, range(K), threads)
        times = parts[0][0]
        D = np.concatenate([p[1] for p in parts], axis=1)
        per_path = D.reshape(len(times), K, -1).mean(axis=-1)
        curves[N] = (D.reshape(len(times), K, -1).mean(axis=1), per_path.mean(axis=1))
        rows["mean"].append(per_path[-1].mean())
        rows["se"].append(per_path[-1].std(ddof=1) / np.sqrt(K) if K > 1 else 0.0)
        rows["mean0"].append(per_path[0].mean())
        rows["cut"].append(cut_distance(step_from_adjacency(xi), block))
    mean = np.array(rows["mean"])
    cut = np.array(rows["cut"])
    inv = 1.0 / np.sqrt(np.asarray(N_list, dtype=float))
    rhs = np.array(rows["mean0"]) + cut + inv
    with np.errstate(divide="ignore"):
        fitted_C = float(np.max(np.log(np.maximum(mean, 1e-300) / rhs)) / T)
        pos = mean > 0
        if pos.sum() >= 2:
            slope = float(np.polyfit(np.log(cut + inv)[pos], np.log(mean[pos]), 1)[0])
        else:
            slope = float("nan")
    return ChaosSweepResult(
        list(N_list),
        mean,
        np.array(rows["se"]),
        np.array(rows["mean0"]),
        cut,
        inv,
        fitted_C,
        slope,
        times,
        curves,
    )


# -- qubit example: state reduction and preparation -------------------------------


@dataclass
class StateReductionResult:
    times: np.ndarray
    mean_V: np.ndarray
    mean_V2: np.ndarray
    V_T: np.ndarray
    residual: np.ndarray
    residual_se: np.ndarray

    @property
    def V0(self):
        return float(self.mean_V[0])


def lyapunov(rho):
    """``1 - z^2``, zero exactly at the two measurement eigenstates."""
    return 1.0 - qla.bloch_z(rho) ** 2


def state_reduction(ugrid, T=QUBIT_T, K=200, seed=0, dt=QUBIT_DT, w=None):
    """Uncontrolled qubit ensemble started from the maximally mixed state."""
    model = qubit_model()
    A = zz_coupling()
    w = Product() if w is None else w
    grid = TimeGrid.from_dt(T, dt)
    rho0 = np.eye(2) / 2
    noise = label_noise(grid, seed, ugrid.M, K)
    mf = solve_graphon_lindblad(model, A, w, ugrid, grid, rho0)
    extra_u = mf.coupling(A, w, ugrid.labels)
    sub = model.with_extra(lambda t: extra_u(t)[:, None])
    x0 = np.broadcast_to(rho0, (ugrid.M, K, 2, 2)).copy()
    V_path = np.empty((grid.n_steps + 1, K))
    V2_path = np.empty((grid.n_steps + 1, K))

    def record(n, x):
        v = lyapunov(x)  # (M, K)
        V_path[n] = v.mean(axis=0)
        V2_path[n] = (v**2).mean(axis=0)

    simulate_ensemble(sub, x0, grid, noise, record)
    # per-path residual of E[V_t] = V_0 - 4 int E[V_s^2] ds (left Riemann sum)
    integral = np.concatenate(
        [np.zeros((1, K)), np.cumsum(V2_path[:-1], axis=0) * grid.dt]
    )
    R = V_path - V_path[0] + 4.0 * integral
    return StateReductionResult(
        grid.times,
        V_path.mean(axis=1),
        V2_path.mean(axis=1),
        V_path[-1],
        R.mean(axis=1),
        R.std(axis=1, ddof=1) / np.sqrt(K),
    )


@dataclass
class StatePreparationResult:
    times: np.ndarray
    labels: np.ndarray
    fidelity: np.ndarray  # (n_records, M) mean fidelity to rho_g per label
    clip_events: int

    def mean_over(self, lower):
        sel = self.labels < 0.5 if lower else self.labels >= 0.5
        return self.fidelity[:, sel].mean(axis=1)


def state_preparation(
    ugrid, T=QUBIT_T, K=50, seed=0, dt=QUBIT_DT, U=DEFAULT_U, w=None, n_records=200
):
    """Feedback-controlled qubit ensemble started from the maximally mixed state.

    The feedback makes the mean equation depend on the whole law, so the
    mean field is the running ensemble mean over the ``K`` replicas per label.
    """
    model = qubit_model(control=True)
    A = zz_coupling()
    w = Product() if w is None else w
    grid = TimeGrid.from_dt(T, dt)
    noise = label_noise(grid, seed, ugrid.M, K)
    law = StatePrepFeedback(U)
    u = ugrid.labels[:, None]
    every = max(1, grid.n_steps // n_records)
    traj = simulate_mckean_vlasov(
        model, A, w, ugrid, grid, noise, np.eye(2) / 2,
        control=lambda t, x: law(t, u, x), record_every=every,
    )
    fid = np.real(traj.states[..., 1, 1]).mean(axis=2)  # <g|rho|g>, pure target
    return StatePreparationResult(traj.times, ugrid.labels, fid, law.clip_events)


# -- cost functional ------------------------------------------------------------


@dataclass
class CostResult:
    labels: np.ndarray
    J: np.ndarray
    se: np.ndarray


def cost_eval(
    control, cost, terminal, ugrid, grid, K, seed=0, model=None, A=None, w=None, rho0=None
):
    """Monte-Carlo ``J_u = E[int C(alpha, rho, Gamma) ds + F(rho_T, Gamma_T)]`` per label.

    ``Gamma_{t,u} = int w(u, v) m_{t,v} dv`` is read off the deterministic
    mean path. The control is applied open loop in the mean equation.
    """
    model = qubit_model(control=True) if model is None else model
    A = zz_coupling() if A is None else A
    w = Product() if w is None else w
    rho0 = np.eye(model.d) / model.d if rho0 is None else rho0
    M = ugrid.M
    mf = solve_graphon_lindblad(model, A, w, ugrid, grid, rho0)
    kmat = kernel_matrix(w, ugrid.labels, ugrid)
    Gamma = np.einsum("ab,nbxy->naxy", kmat, mf.m) / M
    extra_u = mf.coupling(A, w, ugrid.labels)
    sub = model.with_extra(lambda t: extra_u(t)[:, None])
    noise = label_noise(grid, seed, M, K)
    x0 = np.broadcast_to(np.asarray(rho0, dtype=complex), (M, K) + np.shape(rho0)).copy()
    u = ugrid.labels[:, None]
    acc = np.zeros((M, K))
    dt = grid.dt
    times = grid.times

    def ctrl(t, x):
        return control(t, u, x)

    def record(n, x):
        if n < grid.n_steps:
            a = ctrl(times[n], x)
            acc[...] += cost(a, x, Gamma[n][:, None]) * dt
        else:
            acc[...] += terminal(x, Gamma[n][:, None])

    simulate_ensemble(sub, x0, grid, noise, record, control=ctrl)
    se = acc.std(axis=1, ddof=1) / np.sqrt(K) if K > 1 else np.zeros(M)
    return CostResult(ugrid.labels, acc.mean(axis=1), se)


# -- graph convergence --------------------------------------------------------------


def graphon_convergence_table(w, n_list, samples, seed=0, grid=None, deterministic=False):
    """Mean and standard error of ``cut_distance(sampled graph, w)`` per ``n``.

    ``w`` is discretized by midpoints on ``grid`` cells (default: ``n``).
    """
    rows = []
    for n in n_list:
        target = w.to_step(grid or n)
        vals = []
        for s in range(1 if deterministic else samples):
            if deterministic:
                xi = deterministic_weights(w, n)
            else:
                xi = sample_bernoulli(w, n, np.random.SeedSequence([seed, n, s]))
            vals.append(cut_distance(step_from_adjacency(xi), target, approximate=True))
        vals = np.array(vals)
        se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
        rows.append((n, vals.mean(), se))
    return rows


__all__ = [
    "ChaosSweepResult",
    "ConstantControl",
    "ControlLaw",
    "StatePrepFeedback",
    "Table",
    "Zero",
    "chaos_sweep",
    "cost_eval",
    "feedback_alpha",
    "graphon_convergence_table",
    "state_preparation",
    "state_reduction",
]
