"""Graphon mean-field systems on a finite grid of particle labels.

The mean state ``m_{t,u}`` of the label-``u`` particle follows a closed
nonlinear Lindblad equation, solved here with RK4. Conditional particle
trajectories are then ordinary single-particle filters whose extra
Hamiltonian is the graphon-weighted mean-field operator built from ``m``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qla
from .filtering import (
    _lindblad,
    innovation_derivative,
    innovation_diffusion,
    simulate_ensemble,
    simulate_filter,
    simulate_sse,
)
from .graphon import Block, StepKernel, l1_norm
from .sde import NoisePath, TimeGrid, generate_noise, integrate, write_csv

DEFAULT_M = 32


class InvariantViolation(AssertionError):
    pass


@dataclass(frozen=True)
class UGrid:
    """Midpoints of ``M`` equal cells of [0, 1] with weights ``1 / M``."""

    M: int = DEFAULT_M

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("need at least one label")

    @property
    def labels(self):
        return (np.arange(self.M) + 0.5) / self.M

    @property
    def weights(self):
        return np.full(self.M, 1.0 / self.M)


def kernel_matrix(w, u, ugrid):
    """``w(u_a, v_b)`` for evaluation labels ``u`` against the quadrature grid."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return np.asarray(w.eval(u[:, None], ugrid.labels[None, :]), dtype=float)


def coupling_hamiltonian(A, kmat, m):
    """``sum_b kmat[a, b] A^{m_b} / M`` for every row ``a``; ``m`` is ``(..., M, d, d)``."""
    Am = qla.mean_field_contract(A, m)
    M = m.shape[-3]
    return np.einsum("ab,...bxy->...axy", kmat, Am) / M


def _broadcast_labels(rho0, M):
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.ndim == 2:
        rho0 = np.broadcast_to(rho0, (M,) + rho0.shape).copy()
    if rho0.shape[0] != M:
        raise ValueError(f"need one initial state per label ({M})")
    return rho0


@dataclass
class MeanFieldPath:
    """Mean states ``m[n, b]`` at every time of ``grid`` and every label."""

    grid: TimeGrid
    ugrid: UGrid
    m: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def at(self, t):
        """Linear interpolation in time."""
        x = (t - self.grid.t0) / self.grid.dt
        n = int(np.clip(np.floor(x + 1e-9), 0, self.grid.n_steps))
        f = x - n
        if n >= self.grid.n_steps or abs(f) < 1e-9:
            return self.m[min(n, self.grid.n_steps)]
        return (1 - f) * self.m[n] + f * self.m[n + 1]

    def coupling(self, A, w, u):
        """Extra Hamiltonian ``t -> int w(u, v) A^{m_{t,v}} dv`` for labels ``u``.

        Scalar ``u`` gives a ``(d, d)`` term, an array of labels a stack.
        """
        kmat = kernel_matrix(w, u, self.ugrid)
        table = coupling_hamiltonian(A, kmat, self.m)
        scalar = np.ndim(u) == 0
        if scalar:
            table = table[:, 0]
        grid = self.grid

        def extra(t):
            x = (t - grid.t0) / grid.dt
            n = int(np.clip(np.floor(x + 1e-9), 0, grid.n_steps))
            f = x - n
            if n >= grid.n_steps or abs(f) < 1e-9:
                return table[min(n, grid.n_steps)]
            return (1 - f) * table[n] + f * table[n + 1]

        return extra

    def to_csv(self, path):
        times = self.grid.times
        labels = self.ugrid.labels
        n_t, M = self.m.shape[:2]
        flat = self.m.reshape(n_t, M, -1)
        header = ["t", "u"]
        for j in range(flat.shape[-1]):
            header += [f"re{j}", f"im{j}"]
        rows = []
        for a in range(n_t):
            for b in range(M):
                vals = np.empty(2 * flat.shape[-1])
                vals[0::2] = flat[a, b].real
                vals[1::2] = flat[a, b].imag
                rows.append(np.concatenate([[times[a], labels[b]], vals]))
        write_csv(path, header, rows)


def solve_graphon_lindblad(model, A, w, ugrid, grid, rho0, check=True):
    """Deterministic mean-field equations, RK4 in time, midpoint quadrature in u."""
    M = ugrid.M
    m = _broadcast_labels(rho0, M)
    kmat = kernel_matrix(w, ugrid.labels, ugrid)
    L = model.L
    H = model.H

    def rhs(x):
        h = H + coupling_hamiltonian(A, kmat, x)
        if check and qla.hs_norm(h - qla.dagger(h)).max() > 1e-10:
            raise InvariantViolation("mean-field Hamiltonian is not Hermitian")
        return _lindblad(x, h, L)

    dt = grid.dt
    out = np.empty((grid.n_steps + 1,) + m.shape, dtype=complex)
    out[0] = m
    for n in range(grid.n_steps):
        k1 = rhs(m)
        k2 = rhs(m + 0.5 * dt * k1)
        k3 = rhs(m + 0.5 * dt * k2)
        k4 = rhs(m + dt * k3)
        m = m + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(m)):
            raise FloatingPointError(f"non-finite mean state after step {n}")
        if check:
            drift = np.abs(qla.trace(m) - 1).max()
            herm = qla.hs_norm(m - qla.dagger(m)).max()
            if drift > 1e-10 or herm > 1e-10:
                raise InvariantViolation(
                    f"trace drift {drift:.2e} / hermiticity {herm:.2e} at step {n}"
                )
        m = qla.project_to_density(m)
        out[n + 1] = m
    return MeanFieldPath(grid, ugrid, out)


def simulate_graphon_particle(
    u, meanfield, model, A, w, grid, noise, gamma0, control=None, record_every=1
):
    """Filter for the particle(s) at label(s) ``u`` in a frozen mean field.

    An array of labels must match the trailing batch axis of ``noise``.
    """
    if np.any(np.asarray(u) < 0) or np.any(np.asarray(u) > 1):
        raise ValueError("labels must lie in [0, 1]")
    extra = meanfield.coupling(A, w, u)
    return simulate_filter(
        model.with_extra(extra), gamma0, grid, noise, control, record_every
    )


def label_noise(grid, seed, M, K):
    """Independent noise per (label, replica); batch shape ``(M, K)``."""
    keys = [(b, k) for b in range(M) for k in range(K)]
    noise = generate_noise(1, grid, seed, keys)
    inc = noise.increments.reshape((M, K) + noise.increments.shape[1:])
    return NoisePath(grid, inc, seed, tuple(keys))


def _run_labels(model, A, w, ugrid, grid, noise, rho0, meanfield, accumulate):
    """All labels and replicas in one batched integration; streams statistics."""
    M = ugrid.M
    K = noise.batch_shape[1]
    rho0 = _broadcast_labels(rho0, M)
    x0 = np.broadcast_to(rho0[:, None], (M, K) + rho0.shape[1:]).copy()
    extra_u = meanfield.coupling(A, w, ugrid.labels)
    sub = model.with_extra(lambda t: extra_u(t)[:, None])
    simulate_ensemble(sub, x0, grid, noise, accumulate)


def ensemble_statistics(model, A, w, ugrid, grid, noise, rho0, meanfield):
    """Ensemble mean per (time, label) and the MC standard error of its HS norm."""
    n_t = grid.n_steps + 1
    M = ugrid.M
    K = noise.batch_shape[1]
    d = model.d
    mean = np.empty((n_t, M, d, d), dtype=complex)
    sq = np.empty((n_t, M))

    def accumulate(n, x):
        mean[n] = x.mean(axis=1)
        sq[n] = np.mean(np.real(qla.hs_inner(x, x)), axis=1)

    _run_labels(model, A, w, ugrid, grid, noise, rho0, meanfield, accumulate)
    var = np.clip(sq - np.real(qla.hs_inner(mean, mean)), 0.0, None)
    se = np.sqrt(var / max(K - 1, 1))
    return mean, se


def picard_iterate(
    model, A, w, ugrid, grid, rho0, K, iterations, seed=0, start=None, tol=None
):
    """Fixed-point iteration of the law-dependent particle system.

    Each sweep freezes the mean path, simulates ``K`` replicas per label with
    the same noise every sweep, and replaces the path by the ensemble means.
    Stops early once the sup-HS change between sweeps is at most ``tol``.
    """
    if iterations < 1:
        raise ValueError("need at least one iteration")
    M = ugrid.M
    rho0 = _broadcast_labels(rho0, M)
    if start is None:
        m = np.broadcast_to(rho0, (grid.n_steps + 1,) + rho0.shape).copy()
        path = MeanFieldPath(grid, ugrid, m)
    else:
        path = start
    noise = label_noise(grid, seed, M, K)
    distances = []
    se = None
    for _ in range(iterations):
        mean, se = ensemble_statistics(model, A, w, ugrid, grid, noise, rho0, path)
        dist = qla.hs_norm(mean - path.m).max()
        distances.append(float(dist))
        path = MeanFieldPath(grid, ugrid, mean)
        if tol is not None and dist <= tol:
            break
    diverging = any(
        distances[i] < distances[i + 1] < distances[i + 2] < distances[i + 3]
        for i in range(len(distances) - 3)
    )
    path.diagnostics = {"distances": distances, "diverging": diverging, "se": se}
    return path


# -- block-wise reduction -----------------------------------------------------


def block_reduce(w, c, tol=1e-12):
    """Weights ``w_ji`` of a kernel constant on the ``c`` equal blocks."""
    if not isinstance(w, StepKernel):
        raise ValueError("block reduction needs a step kernel")
    coarse = np.linspace(0.0, 1.0, c + 1)
    merged = np.union1d(w.boundaries, coarse)
    merged = merged[np.concatenate([[True], np.diff(merged) > tol])]
    merged[-1] = 1.0
    fine = w.refine(merged)
    mid = 0.5 * (merged[:-1] + merged[1:])
    cls = np.minimum((mid * c).astype(int), c - 1)
    W = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            vals = fine.weights[np.ix_(cls == i, cls == j)]
            if np.ptp(vals) > tol:
                raise ValueError("kernel is not constant on the class blocks")
            W[i, j] = vals.flat[0]
    return W


def simulate_block_system(
    model,
    A,
    W,
    grid,
    noise,
    gamma0,
    form="density",
    meanfield=None,
    record_every=1,
    scheme="milstein",
):
    """One representative per class, driven by driver ``i`` of ``noise``.

    ``gamma0`` holds one state per class: density matrices for
    ``form="density"`` and vectors for ``form="sse"``. The mean field comes
    from the graphon Lindblad solver on ``c`` labels unless supplied.
    Returns the trajectory with the class axis after the noise batch axes.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    c = W.shape[0]
    if noise.n_drivers != c:
        raise ValueError(f"need {c} drivers, got {noise.n_drivers}")
    gamma0 = np.asarray(gamma0, dtype=complex)
    rho0 = gamma0 if form == "density" else qla.pure_density(gamma0)
    kernel = Block(W)
    ugrid = UGrid(c)
    if meanfield is None:
        meanfield = solve_graphon_lindblad(model, A, kernel, ugrid, grid, rho0)
    extra = meanfield.coupling(A, kernel, ugrid.labels)
    # move the class (driver) axis into the batch: batch + (c, n_steps, 1)
    inc = np.moveaxis(noise.increments, -1, -2)[..., None]
    per_class = NoisePath(grid, inc, noise.seed, noise.keys)
    batch = noise.batch_shape
    x0 = np.broadcast_to(gamma0, batch + gamma0.shape).copy()
    sub = model.with_extra(extra)
    if form == "density":
        traj, _ = simulate_filter(
            sub, x0, grid, per_class, record_every=record_every, scheme=scheme
        )
    elif form == "sse":
        traj = simulate_sse(
            sub, x0, grid, per_class, record_every=record_every, scheme=scheme
        )
    else:
        raise ValueError("form must be 'density' or 'sse'")
    traj.extras["meanfield"] = meanfield
    return traj


# -- stability with respect to the graphon -------------------------------------


@dataclass
class StabilityResult:
    times: np.ndarray
    gap: np.ndarray
    se: np.ndarray
    l1: float

    @property
    def sup_gap(self):
        return float(self.gap.max())

    @property
    def ratio(self):
        return self.sup_gap / self.l1 if self.l1 > 0 else float("nan")


def stability_experiment(
    w_a, w_b, model, A, ugrid, grid, rho0, K, seed=0, n_records=100
):
    """``E int ||gamma_a - gamma_b||_2^2 du`` along time under shared noise."""
    M = ugrid.M
    rho0 = _broadcast_labels(rho0, M)
    noise = label_noise(grid, seed, M, K)
    x0 = np.broadcast_to(rho0[:, None], (M, K) + rho0.shape[1:]).copy()
    every = max(1, grid.n_steps // n_records)
    states = []
    for w in (w_a, w_b):
        mf = solve_graphon_lindblad(model, A, w, ugrid, grid, rho0)
        extra_u = mf.coupling(A, w, ugrid.labels)
        sub = model.with_extra(lambda t, e=extra_u: e(t)[:, None])
        traj, _ = simulate_filter(sub, x0, grid, noise, record_every=every)
        states.append(traj)
    diff = states[0].states - states[1].states
    per_path = np.real(qla.hs_inner(diff, diff)).mean(axis=1)  # mean over labels
    gap = per_path.mean(axis=-1)
    se = per_path.std(axis=-1, ddof=1) / np.sqrt(K) if K > 1 else np.zeros_like(gap)
    return StabilityResult(states[0].times, gap, se, l1_norm(w_a - w_b))


# -- law-coupled ensembles ------------------------------------------------------


def simulate_mckean_vlasov(
    model, A, w, ugrid, grid, noise, rho0, control=None, record_every=1
):
    """Particles at every label whose mean field is the running ensemble mean.

    ``noise`` has batch shape ``(M, K)``. Unlike the frozen-path filters this
    closes the law dependence with the empirical mean over the ``K``
    replicas of each label, so it also applies under state feedback where
    the mean equation is not closed.
    """
    M = ugrid.M
    K = noise.batch_shape[1]
    rho0 = _broadcast_labels(rho0, M)
    x0 = np.broadcast_to(rho0[:, None], (M, K) + rho0.shape[1:]).copy()
    kmat = kernel_matrix(w, ugrid.labels, ugrid)
    L = model.L

    def drift(x, t):
        h = model.H + coupling_hamiltonian(A, kmat, x.mean(axis=1))[:, None]
        if control is not None and model.H_ctrl is not None:
            alpha = control(t, x)
            h = h + np.asarray(alpha)[..., None, None] * model.H_ctrl
        return _lindblad(x, h, L)

    traj = integrate(
        drift,
        [lambda x, t: innovation_diffusion(x, model)],
        x0,
        grid,
        noise,
        post_step=qla.project_to_density,
        record_every=record_every,
        milstein=[lambda x, t, v: innovation_derivative(x, model, v)],
    )
    return traj
