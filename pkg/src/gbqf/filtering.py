"""Diffusive quantum filtering for one measured particle.

Four integrators share one model: the nonlinear density filter (optionally
controlled), the linear unnormalized filter driven by an exogenous output
path, its normalization, and the pure-state (stochastic Schrodinger) form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import qla
from .sde import NoisePath, Trajectory, integrate


class NormalizationBreakdown(ArithmeticError):
    def __init__(self, step):
        super().__init__(f"non-positive trace of the linear filter at record {step}")
        self.step = step


@dataclass(frozen=True)
class FilterModel:
    """Free Hamiltonian ``H``, measurement operator ``L`` and efficiency ``eta``.

    ``H_ctrl`` is multiplied by the scalar control. ``extra_hamiltonian(t)``
    adds a time-dependent Hermitian term, possibly batched; graphon mean-field
    couplings enter through it.
    """

    H: np.ndarray
    L: np.ndarray
    eta: float = 1.0
    H_ctrl: np.ndarray | None = None
    extra_hamiltonian: Callable | None = None

    def __post_init__(self):
        H = np.asarray(self.H, dtype=complex)
        L = np.asarray(self.L, dtype=complex)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "L", L)
        if H.shape != L.shape or H.shape[0] != H.shape[1]:
            raise ValueError("H and L must be square matrices of equal size")
        if qla.hs_norm(H - qla.dagger(H)) > qla.EPS_HERM:
            raise ValueError("H must be Hermitian")
        if self.H_ctrl is not None:
            Hc = np.asarray(self.H_ctrl, dtype=complex)
            object.__setattr__(self, "H_ctrl", Hc)
            if Hc.shape != H.shape or qla.hs_norm(Hc - qla.dagger(Hc)) > qla.EPS_HERM:
                raise ValueError("H_ctrl must be Hermitian with the shape of H")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")

    @property
    def d(self):
        return self.H.shape[0]

    def with_extra(self, extra):
        return FilterModel(self.H, self.L, self.eta, self.H_ctrl, extra)

    def with_eta(self, eta):
        return FilterModel(self.H, self.L, eta, self.H_ctrl, self.extra_hamiltonian)

    def hamiltonian(self, t=0.0, alpha=0.0):
        h = self.H
        if self.H_ctrl is not None and np.any(alpha):
            h = h + np.asarray(alpha)[..., None, None] * self.H_ctrl
        if self.extra_hamiltonian is not None:
            h = h + self.extra_hamiltonian(t)
        return h


@dataclass
class ObservationRecord:
    """Per-step output increments; shapes are ``batch + (n_steps,)``."""

    dY: np.ndarray
    dW: np.ndarray
    compensator: np.ndarray


def _lindblad(rho, h, L):
    Ld = qla.dagger(L)
    LdL = Ld @ L
    return (
        -1j * (h @ rho - rho @ h)
        + L @ rho @ Ld
        - 0.5 * (LdL @ rho + rho @ LdL)
    )


def lindblad_drift(rho, model, t=0.0, alpha=0.0):
    return _lindblad(rho, model.hamiltonian(t, alpha), model.L)


def measurement_signal(rho, L):
    """``tr((L + L^dagger) rho)``, real for Hermitian ``rho``."""
    return np.real(qla.trace((L + qla.dagger(L)) @ rho))


def innovation_diffusion(rho, model):
    L = model.L
    c = measurement_signal(rho, L)
    g = L @ rho + rho @ qla.dagger(L) - c[..., None, None] * rho
    return np.sqrt(model.eta) * g


def innovation_derivative(rho, model, v):
    """Directional derivative of :func:`innovation_diffusion` at ``rho`` along ``v``."""
    L = model.L
    c = measurement_signal(rho, L)[..., None, None]
    cv = np.real(qla.trace((L + qla.dagger(L)) @ v))[..., None, None]
    g = L @ v + v @ qla.dagger(L) - c * v - cv * rho
    return np.sqrt(model.eta) * g


SCHEMES = ("milstein", "euler")


def _check_scheme(scheme):
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    return scheme == "milstein"


def _broadcast_initial(x0, noise, core_ndim):
    x0 = np.asarray(x0, dtype=complex)
    batch = noise.batch_shape
    if x0.ndim == core_ndim and batch:
        x0 = np.broadcast_to(x0, batch + x0.shape).copy()
    return x0


def simulate_filter(
    model, rho0, grid, noise, control=None, record_every=1, scheme="milstein"
):
    """Nonlinear filter with density projection after each step.

    ``scheme`` is "milstein" (default) or "euler". ``control(t, rho)``
    returns the scalar control for each batch member; it is evaluated on the
    projected left-endpoint state.
    """
    use_milstein = _check_scheme(scheme)
    if noise.n_drivers != 1:
        raise ValueError("single-particle filter takes exactly one driver")
    rho0 = _broadcast_initial(rho0, noise, 2)
    if not qla.is_density(rho0):
        raise ValueError("initial state must be a density matrix")
    sqrt_eta = np.sqrt(model.eta)
    comp = np.zeros(noise.batch_shape + (grid.n_steps,))
    alphas = {}

    def current_alpha(x, t):
        key = float(t)
        if key not in alphas:
            alphas.clear()
            alphas[key] = 0.0 if control is None else control(t, x)
        return alphas[key]

    def drift(x, t):
        return lindblad_drift(x, model, t, current_alpha(x, t))

    def diffusion(x, t):
        return innovation_diffusion(x, model)

    def observe(n, t, x, dw):
        comp[..., n] = measurement_signal(x, model.L)

    traj = integrate(
        drift,
        [diffusion],
        rho0,
        grid,
        noise,
        post_step=qla.project_to_density,
        record_every=record_every,
        callback=observe,
        milstein=[lambda x, t, v: innovation_derivative(x, model, v)]
        if use_milstein
        else None,
    )
    dW = noise.increments[..., 0]
    dY = dW + sqrt_eta * comp * grid.dt
    traj.dY = dY
    return traj, ObservationRecord(dY=dY, dW=dW, compensator=comp)


def simulate_linear(
    model, rho0, grid, y_path, project=True, record_every=1, scheme="milstein"
):
    """Linear (unnormalized) filter driven by the output increments ``y_path``.

    With ``project`` the state is hermitized and clipped to the PSD cone after
    each step, without renormalizing the trace.
    """
    use_milstein = _check_scheme(scheme)
    if y_path.n_drivers != 1:
        raise ValueError("single-particle filter takes exactly one driver")
    rho0 = _broadcast_initial(rho0, y_path, 2)
    L = model.L
    Ld = qla.dagger(L)
    sqrt_eta = np.sqrt(model.eta)

    def drift(x, t):
        return lindblad_drift(x, model, t)

    def diffusion(x, t):
        return sqrt_eta * (L @ x + x @ Ld)

    traj = integrate(
        drift,
        [diffusion],
        rho0,
        grid,
        y_path,
        post_step=qla.project_psd if project else None,
        record_every=record_every,
        milstein=[lambda x, t, v: diffusion(v, t)] if use_milstein else None,
    )
    traj.dY = y_path.increments[..., 0]
    traj.dW = None
    return traj


def trace_martingale(linear_traj, y_path, model):
    """``1 + sqrt(eta) * sum tr((L + L^dagger) rho_s) dY_s`` at every record.

    Requires a trajectory recorded at every step.
    """
    states = np.moveaxis(linear_traj.states, 0, -3)
    signal = measurement_signal(states[..., :-1, :, :], model.L)
    dY = y_path.increments[..., 0]
    incr = np.sqrt(model.eta) * signal * dY
    zero = np.zeros(incr.shape[:-1] + (1,))
    return 1.0 + np.concatenate([zero, np.cumsum(incr, axis=-1)], axis=-1)


def normalize_linear(linear_traj, y_path, model):
    """Normalize a linear-filter trajectory and reconstruct the innovation.

    Returns the normalized trajectory and a :class:`NoisePath` with
    ``dW = dY - sqrt(eta) tr((L + L^dagger) rho) dt`` at each left endpoint.
    The trajectory must be recorded at every step.
    """
    states = linear_traj.states
    tr = np.real(qla.trace(states))
    bad = np.argwhere(tr <= 0)
    if bad.size:
        raise NormalizationBreakdown(int(bad[0][0]))
    rho = states / tr[..., None, None]
    grid = linear_traj.grid
    if states.shape[0] != grid.n_steps + 1:
        raise ValueError("normalize_linear needs every step recorded")
    rho_b = np.moveaxis(rho, 0, -3)
    comp = measurement_signal(rho_b[..., :-1, :, :], model.L)
    dY = y_path.increments[..., 0]
    dW = dY - np.sqrt(model.eta) * comp * grid.dt
    out = Trajectory(grid, linear_traj.times, rho, dW=dW, dY=dY)
    return out, NoisePath(grid, dW[..., None], y_path.seed, y_path.keys)


def sse_drift(psi, h, L):
    Ld = qla.dagger(L)
    Lpsi = np.einsum("ij,...j->...i", L, psi)
    c = 2.0 * np.real(np.einsum("...i,...i->...", np.conj(psi), Lpsi))
    hpsi = np.einsum("...ij,...j->...i", np.broadcast_to(h, psi.shape[:-1] + h.shape[-2:]), psi)
    LdLpsi = np.einsum("ij,...j->...i", Ld, Lpsi)
    return (
        -1j * hpsi
        - 0.5 * LdLpsi
        + 0.5 * c[..., None] * Lpsi
        - (c**2 / 8.0)[..., None] * psi
    )


def sse_diffusion(psi, L):
    Lpsi = np.einsum("ij,...j->...i", L, psi)
    c = 2.0 * np.real(np.einsum("...i,...i->...", np.conj(psi), Lpsi))
    return Lpsi - 0.5 * c[..., None] * psi


def normalize_vector(psi):
    return psi / np.linalg.norm(psi, axis=-1, keepdims=True)


def sse_derivative(psi, L, v):
    Lpsi = np.einsum("ij,...j->...i", L, psi)
    Lv = np.einsum("ij,...j->...i", L, v)
    c = 2.0 * np.real(np.einsum("...i,...i->...", np.conj(psi), Lpsi))
    cv = 2.0 * np.real(
        np.einsum("...i,...i->...", np.conj(v), Lpsi)
        + np.einsum("...i,...i->...", np.conj(psi), Lv)
    )
    return Lv - 0.5 * c[..., None] * v - 0.5 * cv[..., None] * psi


def simulate_sse(
    model, psi0, grid, noise, control=None, record_every=1, scheme="milstein"
):
    """Pure-state filter for ``eta = 1``, renormalized after each step."""
    use_milstein = _check_scheme(scheme)
    if model.eta != 1.0:
        raise ValueError("the pure-state filter needs eta = 1")
    if noise.n_drivers != 1:
        raise ValueError("single-particle filter takes exactly one driver")
    psi0 = _broadcast_initial(psi0, noise, 1)
    if abs(np.linalg.norm(psi0, axis=-1) - 1).max() > qla.EPS_NORM:
        raise ValueError("initial state must have unit norm")
    L = model.L

    def drift(x, t):
        alpha = 0.0 if control is None else control(t, qla.pure_density(x))
        return sse_drift(x, model.hamiltonian(t, alpha), L)

    def diffusion(x, t):
        return sse_diffusion(x, L)

    return integrate(
        drift,
        [diffusion],
        psi0,
        grid,
        noise,
        post_step=normalize_vector,
        record_every=record_every,
        milstein=[lambda x, t, v: sse_derivative(x, L, v)] if use_milstein else None,
    )


def simulate_ensemble(
    model, rho0, grid, noise, record, control=None, scheme="milstein"
):
    """Run :func:`simulate_filter` without storing states.

    ``record(n, rho)`` sees the state at every grid time ``n = 0..n_steps``,
    which keeps memory flat for large ensembles. Returns the final state.
    """

    def observe(n, t, x, dw):
        record(n, x)

    use_milstein = _check_scheme(scheme)
    rho0 = _broadcast_initial(rho0, noise, 2)
    alphas = {}

    def current_alpha(x, t):
        key = float(t)
        if key not in alphas:
            alphas.clear()
            alphas[key] = 0.0 if control is None else control(t, x)
        return alphas[key]

    traj = integrate(
        lambda x, t: lindblad_drift(x, model, t, current_alpha(x, t)),
        [lambda x, t: innovation_diffusion(x, model)],
        rho0,
        grid,
        noise,
        post_step=qla.project_to_density,
        record_every=grid.n_steps,
        callback=observe,
        milstein=[lambda x, t, v: innovation_derivative(x, model, v)]
        if use_milstein
        else None,
    )
    record(grid.n_steps, traj.final)
    return traj.final
