"""Tensorized dynamics of c classes of N measured particles on a weighted graph.

Slots are class-major: particle ``l`` of class ``i`` (both 0-based) lives on
tensor slot ``i * N + l``. Pure states are flat vectors of length
``d ** (c * N)``, optionally with leading batch axes, and operators are
applied by contracting the relevant tensor legs instead of building the full
matrices.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import qla
from .filtering import FilterModel, _lindblad, measurement_signal
from .sde import integrate

#: Largest Hilbert-space dimension handled in density-matrix form.
DENSITY_DIM_CAP = 64
#: Counting operators have exponentially many terms; keep them small.
COUNTING_N_CAP = 3
COUNTING_DIM_CAP = 4096

NORMALIZATIONS = ("block", "pairwise")


class GuardViolation(ValueError):
    pass


def slot_index(i, l, N):
    return i * N + l


@dataclass
class BlockSystemConfig:
    """``c`` classes of ``N`` particles of local dimension ``d``.

    ``psi0`` holds one initial pure state per class (shape ``(c, d)``) or per
    particle (shape ``(c * N, d)``). ``normalization`` chooses between the
    symmetric double sum over ordered pairs with prefactor ``1 / (2 n)``
    ("block") and the sum over ``p > q`` with prefactor ``1 / n``
    ("pairwise"), where ``n = c * N``.
    """

    c: int
    N: int
    model: FilterModel
    A: np.ndarray
    xi: np.ndarray
    psi0: np.ndarray | None = None
    normalization: str = "block"
    max_bytes: int = qla.MAX_OPERATOR_BYTES
    _pairs: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=complex)
        self.xi = np.asarray(self.xi, dtype=float)
        d = self.d
        n = self.n
        if self.c < 1 or self.N < 1:
            raise ValueError("need c >= 1 and N >= 1")
        if self.A.shape != (d * d, d * d):
            raise ValueError(f"A must be {d * d}x{d * d}")
        if self.xi.shape != (n, n):
            raise ValueError(f"xi must be {n}x{n}")
        if not np.allclose(self.xi, self.xi.T) or np.any(np.diag(self.xi) != 0):
            raise ValueError("xi must be symmetric with zero diagonal")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if d**n * np.dtype(complex).itemsize > self.max_bytes:
            raise qla.MemoryCapExceeded(f"state of dimension {d}**{n} exceeds cap")
        if self.psi0 is not None:
            p = np.asarray(self.psi0, dtype=complex)
            if p.shape not in ((self.c, d), (n, d)):
                raise ValueError("psi0 must hold one state per class or per particle")
            self.psi0 = p / np.linalg.norm(p, axis=-1, keepdims=True)

    @property
    def d(self):
        return self.model.d

    @property
    def n(self):
        return self.c * self.N

    @property
    def dim(self):
        return self.d**self.n

    def pair_coefficients(self):
        """``(p, q, coefficient, operator)`` for every interacting pair.

        In "block" form both orders of each pair contribute ``xi / (2n)``;
        with an exchange-symmetric ``A`` they are merged into one term.
        """
        if self._pairs is not None:
            return self._pairs
        n = self.n
        pairs = []
        swap = qla.swap_operator(self.d)
        symmetric = qla.hs_norm(swap @ self.A @ swap - self.A) <= 1e-12
        for p in range(n):
            for q in range(p + 1, n):
                x = self.xi[p, q]
                if x == 0:
                    continue
                if self.normalization == "pairwise":
                    # first factor on the larger slot, matching the p > q sum
                    pairs.append((q, p, x / n, self.A))
                elif symmetric:
                    pairs.append((p, q, x / n, self.A))
                else:
                    pairs.append((p, q, x / (2 * n), self.A))
                    pairs.append((q, p, x / (2 * n), self.A))
        self._pairs = pairs
        return pairs

    def initial_state(self):
        if self.psi0 is None:
            raise ValueError("no initial state configured")
        return product_state(self.particle_states())

    def particle_states(self):
        if self.psi0.shape[0] == self.n:
            return self.psi0
        return np.repeat(self.psi0, self.N, axis=0)

    def permuted(self, perms):
        """Same system with particles relabeled by ``perms`` within classes."""
        order = slot_permutation(perms, self.c, self.N)
        xi = np.empty_like(self.xi)
        xi[np.ix_(order, order)] = self.xi
        psi0 = self.psi0
        if psi0 is not None and psi0.shape[0] == self.n:
            psi0 = np.empty_like(psi0)
            psi0[order] = self.psi0
        return BlockSystemConfig(
            self.c, self.N, self.model, self.A, xi, psi0, self.normalization, self.max_bytes
        )


def product_state(vectors):
    out = np.ones(1, dtype=complex)
    for v in vectors:
        out = np.kron(out, v)
    return out


# -- operator application by contraction -------------------------------------


def apply_local(op, psi, slot, n, d):
    """Apply a one-body operator on ``slot`` to flat state vectors."""
    shape = psi.shape
    t = psi.reshape(shape[:-1] + (d**slot, d, d ** (n - slot - 1)))
    return np.einsum("ij,...ajb->...aib", op, t).reshape(shape)


def apply_pair(b, psi, p, q, n, d):
    """Apply a two-body operator with first factor on ``p``, second on ``q``."""
    if p > q:
        s = qla.swap_operator(d)
        b, p, q = s @ b @ s, q, p
    shape = psi.shape
    t = psi.reshape(
        shape[:-1] + (d**p, d, d ** (q - p - 1), d, d ** (n - q - 1))
    )
    b4 = b.reshape(d, d, d, d)
    return np.einsum("xywz,...awbzc->...axbyc", b4, t).reshape(shape)


def apply_hamiltonian(cfg, psi):
    d, n = cfg.d, cfg.n
    out = np.zeros_like(psi)
    H = cfg.model.H
    if np.any(H):
        for s in range(n):
            out += apply_local(H, psi, s, n, d)
    for p, q, coef, b in cfg.pair_coefficients():
        out += coef * apply_pair(b, psi, p, q, n, d)
    return out


def build_hamiltonian(cfg):
    """Dense many-body Hamiltonian of dimension ``d ** (c N)``."""
    n = cfg.n
    H = np.zeros((cfg.dim, cfg.dim), dtype=complex)
    for s in range(n):
        H += qla.lift(cfg.model.H, s, n, cfg.max_bytes)
    for p, q, coef, b in cfg.pair_coefficients():
        H += coef * qla.lift_pair(b, p, q, n, cfg.max_bytes)
    return H


# -- dynamics ------------------------------------------------------------------


def _expectation_sum(psi, Lpsi):
    """``<psi|(L + L^dagger)|psi>`` given ``L psi``."""
    return 2.0 * np.real(np.einsum("...i,...i->...", np.conj(psi), Lpsi))


def simulate_nbody_sse(
    cfg, grid, noise, psi0=None, record_every=1, scheme="milstein"
):
    """Pure-state many-body filter; particle on slot ``s`` uses driver ``s``.

    The default scheme adds the Milstein correction for commuting noise,
    which is exact in structure when ``L`` is normal: the measurement
    operators of different particles then commute and the diffusion
    fields do too.
    """
    if scheme not in ("milstein", "euler"):
        raise ValueError("scheme must be 'milstein' or 'euler'")
    if cfg.model.eta != 1.0:
        raise ValueError("pure-state dynamics needs eta = 1")
    n, d = cfg.n, cfg.d
    if noise.n_drivers != n:
        raise ValueError(f"need {n} drivers, got {noise.n_drivers}")
    psi0 = cfg.initial_state() if psi0 is None else np.asarray(psi0, dtype=complex)
    if psi0.ndim == 1 and noise.batch_shape:
        psi0 = np.broadcast_to(psi0, noise.batch_shape + psi0.shape).copy()
    L = cfg.model.L
    LdL = qla.dagger(L) @ L

    def drift(x, t):
        out = -1j * apply_hamiltonian(cfg, x)
        for s in range(n):
            Lx = apply_local(L, x, s, n, d)
            c = _expectation_sum(x, Lx)[..., None]
            out += (
                -0.5 * apply_local(LdL, x, s, n, d)
                + 0.5 * c * Lx
                - (c**2 / 8.0) * x
            )
        return out

    def make_diffusion(s):
        def diffusion(x, t):
            Lx = apply_local(L, x, s, n, d)
            c = _expectation_sum(x, Lx)[..., None]
            return Lx - 0.5 * c * x

        return diffusion

    def derivative(x, s, v):
        Lx = apply_local(L, x, s, n, d)
        Lv = apply_local(L, v, s, n, d)
        c = _expectation_sum(x, Lx)[..., None]
        cv = 2.0 * np.real(
            np.einsum("...i,...i->...", np.conj(v), Lx)
            + np.einsum("...i,...i->...", np.conj(x), Lv)
        )[..., None]
        return Lv - 0.5 * c * v - 0.5 * cv * x

    def milstein(x, t, dw, gs):
        # 1/2 sum_{s,r} G_s'[G_r] (dW_s dW_r - delta_sr dt), commuting fields
        dt = grid.dt
        gsum = sum(g * dw[..., k, None] for k, g in enumerate(gs))
        out = 0.0
        for s in range(n):
            out = out + derivative(x, s, gsum) * dw[..., s, None]
            out = out - derivative(x, s, gs[s]) * dt
        return 0.5 * out

    return integrate(
        drift,
        [make_diffusion(s) for s in range(n)],
        psi0,
        grid,
        noise,
        post_step=lambda x: x / np.linalg.norm(x, axis=-1, keepdims=True),
        record_every=record_every,
        milstein=milstein if scheme == "milstein" else None,
    )


def simulate_nbody_density(cfg, grid, noise, rho0=None, record_every=1):
    """Density-matrix many-body filter for any ``eta``; dimension capped at 64."""
    n = cfg.n
    if cfg.dim > DENSITY_DIM_CAP:
        raise qla.MemoryCapExceeded(
            f"density form limited to dimension {DENSITY_DIM_CAP}, got {cfg.dim}"
        )
    if noise.n_drivers != n:
        raise ValueError(f"need {n} drivers, got {noise.n_drivers}")
    if rho0 is None:
        rho0 = qla.pure_density(cfg.initial_state())
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.ndim == 2 and noise.batch_shape:
        rho0 = np.broadcast_to(rho0, noise.batch_shape + rho0.shape).copy()
    H = build_hamiltonian(cfg)
    Ls = [qla.lift(cfg.model.L, s, n) for s in range(n)]
    sqrt_eta = np.sqrt(cfg.model.eta)

    zero = np.zeros_like(H)

    def drift(x, t):
        out = -1j * (H @ x - x @ H)
        for L in Ls:
            out += _lindblad(x, zero, L)
        return out

    def make_diffusion(L):
        Ld = qla.dagger(L)

        def diffusion(x, t):
            c = measurement_signal(x, L)[..., None, None]
            return sqrt_eta * (L @ x + x @ Ld - c * x)

        return diffusion

    return integrate(
        drift,
        [make_diffusion(L) for L in Ls],
        rho0,
        grid,
        noise,
        post_step=qla.project_to_density,
        record_every=record_every,
    )


# -- marginals and distances ---------------------------------------------------


def marginal(state, i, l, c, N, d, pure=None):
    if not (0 <= i < c and 0 <= l < N):
        raise IndexError(f"particle ({i}, {l}) out of range for c={c}, N={N}")
    return qla.partial_trace(state, slot_index(i, l, N), c * N, d, pure=pure)


def d_distance(state, gamma, i, l, c, N, d, pure=None):
    """``1 - tr(gamma rho_marginal)``, in [0, 1] for a projector ``gamma``."""
    m = marginal(state, i, l, c, N, d, pure=pure)
    val = 1.0 - np.real(np.einsum("...ij,...ji->...", gamma, m))
    return np.clip(val, 0.0, 1.0)


def _per_particle(gammas, c, N):
    g = np.asarray(gammas, dtype=complex)
    if g.ndim == 3 and g.shape[0] == c:
        g = np.repeat(g[:, None], N, axis=1)
    elif g.ndim == 3 and g.shape[0] == c * N:
        g = g.reshape((c, N) + g.shape[1:])
    if g.shape[:2] != (c, N):
        raise ValueError("gammas must be given per class or per particle")
    return g


def counting_projector(c, N, i, n_i, gammas):
    """Projector onto configurations with exactly ``n_i`` bad particles in class ``i``.

    A particle is bad when it is found in ``1 - gamma``; ``gammas`` holds one
    pure projector per class or per particle.
    """
    if N > COUNTING_N_CAP:
        raise GuardViolation(f"counting operators limited to N <= {COUNTING_N_CAP}")
    if not 0 <= n_i <= N:
        raise ValueError(f"count {n_i} out of range for N={N}")
    g = _per_particle(gammas, c, N)
    d = g.shape[-1]
    if d ** (c * N) > COUNTING_DIM_CAP:
        raise GuardViolation("counting operator dimension above cap")
    eye = np.eye(d)
    factors_good = g[i]
    factors_bad = eye - g[i]
    dim = d ** (c * N)
    out = np.zeros((dim, dim), dtype=complex)
    for bad in itertools.combinations(range(N), n_i):
        ops = [factors_bad[l] if l in bad else factors_good[l] for l in range(N)]
        out += qla.kron(np.eye(d ** (i * N)), *ops, np.eye(d ** ((c - i - 1) * N)))
    return out


def _as_density(state, dim):
    state = np.asarray(state)
    if state.ndim >= 2 and state.shape[-2] == dim:
        return state
    return qla.pure_density(state)


def chaos_functional(state, gammas, c, N, weight):
    """``tr(sum_n weight(|n|) P_n rho)`` over count vectors ``n`` of all classes."""
    g = _per_particle(gammas, c, N)
    d = g.shape[-1]
    rho = _as_density(state, d ** (c * N))
    per_class = [
        [counting_projector(c, N, i, k, g) for k in range(N + 1)] for i in range(c)
    ]
    total = 0.0
    for counts in itertools.product(range(N + 1), repeat=c):
        P = per_class[0][counts[0]]
        for i in range(1, c):
            P = P @ per_class[i][counts[i]]
        total = total + weight(sum(counts)) * np.real(
            np.einsum("ij,...ji->...", P, rho)
        )
    return total


def unbiased_weight(c, N):
    return lambda k: k / (c * N)


def chaos_bound_via_D(state, gammas, c, N, pure=None):
    """Mean of ``D`` over all ``c N`` particles."""
    g = _per_particle(gammas, c, N)
    d = g.shape[-1]
    vals = [
        d_distance(state, g[i, l], i, l, c, N, d, pure=pure)
        for i in range(c)
        for l in range(N)
    ]
    return np.mean(vals, axis=0)


# -- class-wise permutations ---------------------------------------------------


def _check_perm(p, N):
    p = [int(x) for x in p]
    if sorted(p) != list(range(N)):
        raise ValueError(f"{p} is not a permutation of range({N})")
    return p


def slot_permutation(perms, c, N):
    """``order[s]`` is the new slot of the particle on slot ``s``."""
    if len(perms) != c:
        raise ValueError("need one permutation per class")
    order = []
    for i, p in enumerate(perms):
        p = _check_perm(p, N)
        order += [i * N + p[l] for l in range(N)]
    return np.array(order)


def permutation_apply(psi, perms, c, N, d):
    """Move the particle on slot ``(i, l)`` to slot ``(i, perms[i][l])``."""
    order = slot_permutation(perms, c, N)
    n = c * N
    psi = np.asarray(psi)
    batch = psi.shape[:-1]
    t = psi.reshape(batch + (d,) * n)
    axes = np.empty(n, dtype=int)
    axes[order] = np.arange(n)
    nb = len(batch)
    t = t.transpose(list(range(nb)) + [nb + a for a in axes])
    return t.reshape(psi.shape)


def permute_drivers(increments, perms, c, N):
    """Noise increments relabeled the same way as :func:`permutation_apply`."""
    order = slot_permutation(perms, c, N)
    out = np.empty_like(increments)
    out[..., order] = increments
    return out


def check_counting_identities(c, N, gammas, tol=1e-10):
    """Max deviation of the resolution of identity and the counting identity."""
    g = _per_particle(gammas, c, N)
    d = g.shape[-1]
    dim = d ** (c * N)
    worst = 0.0
    for i in range(c):
        Ps = [counting_projector(c, N, i, k, g) for k in range(N + 1)]
        worst = max(worst, np.abs(sum(Ps) - np.eye(dim)).max())
        bad_sum = sum(
            qla.lift(np.eye(d) - g[i, l], slot_index(i, l, N), c * N) for l in range(N)
        )
        for k, P in enumerate(Ps):
            worst = max(worst, np.abs(bad_sum @ P - k * P).max())
    return worst

