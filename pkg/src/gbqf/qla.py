"""Finite-dimensional quantum linear algebra.

Operators are dense complex numpy arrays. Most functions accept stacks of
matrices with shape ``(..., d, d)`` so that ensembles of trajectories can be
processed in one call.

Tensor slots are 0-based. A two-body operator of local dimension ``d`` is a
``d**2 x d**2`` matrix whose row index ``(x, y)`` flattens as ``x * d + y``.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

EPS_HERM = 1e-9
EPS_TRACE = 1e-9
EPS_PSD = 1e-8
EPS_NORM = 1e-9

#: Memory cap on lifted (materialized) operators, in bytes.
MAX_OPERATOR_BYTES = 2 * 1024**3

I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
RHO_E = np.array([[1, 0], [0, 0]], dtype=complex)
RHO_G = np.array([[0, 0], [0, 1]], dtype=complex)


class ProjectionCollapse(ArithmeticError):
    """Raised when clipping a matrix to the PSD cone leaves nothing."""


class MemoryCapExceeded(MemoryError):
    pass


def dagger(m):
    return np.conj(np.swapaxes(m, -1, -2))


def commutator(a, b):
    _check_same_shape(a, b)
    return a @ b - b @ a


def anticommutator(a, b):
    _check_same_shape(a, b)
    return a @ b + b @ a


def _check_same_shape(a, b):
    if np.shape(a)[-2:] != np.shape(b)[-2:]:
        raise ValueError(f"dimension mismatch: {np.shape(a)} vs {np.shape(b)}")


def hs_inner(a, b):
    """Hilbert-Schmidt inner product ``tr(a^dagger b)``."""
    _check_same_shape(a, b)
    return np.einsum("...ij,...ij->...", np.conj(a), b)


def hs_norm(a):
    return np.sqrt(np.real(hs_inner(a, a)))


def trace(a):
    return np.trace(a, axis1=-2, axis2=-1)


def _check_cap(dim, max_bytes):
    nbytes = dim * dim * np.dtype(complex).itemsize
    if nbytes > max_bytes:
        raise MemoryCapExceeded(
            f"operator of dimension {dim} needs {nbytes} bytes (cap {max_bytes})"
        )


def kron(*ops):
    out = np.ones((1, 1), dtype=complex)
    for op in ops:
        out = np.kron(out, op)
    return out


def lift(op, slot, n_slots, max_bytes=MAX_OPERATOR_BYTES):
    """Embed a one-body operator on ``slot`` of an ``n_slots`` tensor product."""
    op = np.asarray(op, dtype=complex)
    d = op.shape[0]
    if not 0 <= slot < n_slots:
        raise ValueError(f"slot {slot} out of range for {n_slots} slots")
    _check_cap(d**n_slots, max_bytes)
    return kron(np.eye(d**slot), op, np.eye(d ** (n_slots - slot - 1)))


def lift_pair(b, slot_p, slot_q, n_slots, max_bytes=MAX_OPERATOR_BYTES):
    """Embed a two-body operator acting on ``(slot_p, slot_q)``.

    The first tensor factor of ``b`` acts on ``slot_p`` and the second on
    ``slot_q``; the slots may come in either order.
    """
    b = np.asarray(b, dtype=complex)
    d = math.isqrt(b.shape[0])
    if d * d != b.shape[0]:
        raise ValueError("two-body operator must have square dimension d**2")
    if slot_p == slot_q:
        raise ValueError("slot_p and slot_q must differ")
    for s in (slot_p, slot_q):
        if not 0 <= s < n_slots:
            raise ValueError(f"slot {s} out of range for {n_slots} slots")
    dim = d**n_slots
    _check_cap(dim, max_bytes)
    # b acting on slots (0, 1), identity elsewhere, then permute the tensor legs
    full = np.kron(b, np.eye(d ** (n_slots - 2))).reshape((d,) * (2 * n_slots))
    rest = [s for s in range(n_slots) if s not in (slot_p, slot_q)]
    order = [slot_p, slot_q] + rest
    # leg k of ``full`` lives on slot order[k]
    perm = np.argsort(order)
    full = full.transpose(list(perm) + [n_slots + p for p in perm])
    return full.reshape(dim, dim)


def swap_operator(d):
    s = np.zeros((d * d, d * d), dtype=complex)
    for x, y in itertools.product(range(d), repeat=2):
        s[y * d + x, x * d + y] = 1.0
    return s


def partial_trace(state, keep_slot, n_slots, d, pure=None):
    """Reduced density matrix of one tensor slot.

    ``state`` is either a density matrix of shape ``(..., D, D)`` or a pure
    state vector of shape ``(..., D)`` with ``D = d**n_slots``. Pure states are
    traced without forming the outer product. Pass ``pure`` explicitly for a
    batch of ``D`` vectors, which is otherwise read as a matrix.
    """
    state = np.asarray(state)
    dim = d**n_slots
    if not 0 <= keep_slot < n_slots:
        raise ValueError(f"slot {keep_slot} out of range for {n_slots} slots")
    if state.shape[-1] != dim:
        raise ValueError(f"state dimension {state.shape[-1]} != {d}**{n_slots}")
    if pure is None:
        pure = not (state.ndim >= 2 and state.shape[-2] == dim)
    left, right = d**keep_slot, d ** (n_slots - keep_slot - 1)
    if not pure:
        batch = state.shape[:-2]
        r = state.reshape(batch + (left, d, right, left, d, right))
        return np.einsum("...aibajb->...ij", r)
    batch = state.shape[:-1]
    psi = state.reshape(batch + (left, d, right))
    return np.einsum("...aib,...ajb->...ij", psi, np.conj(psi))


def mean_field_contract(a, rho):
    """Mean-field operator ``tr_2((I x rho) A)``.

    ``a`` is a ``d**2 x d**2`` two-body operator; ``rho`` may be a stack.
    """
    a = np.asarray(a, dtype=complex)
    rho = np.asarray(rho)
    d = rho.shape[-1]
    if a.shape != (d * d, d * d):
        raise ValueError(f"two-body operator shape {a.shape} incompatible with d={d}")
    a4 = a.reshape(d, d, d, d)
    return np.einsum("...yz,xzwy->...xw", rho, a4)


def hermitize(m):
    return 0.5 * (m + dagger(m))


def project_psd(m):
    """Hermitize and clip negative eigenvalues, keeping the trace as it falls."""
    w, v = np.linalg.eigh(hermitize(m))
    w = np.clip(w, 0.0, None)
    return (v * w[..., None, :]) @ dagger(v)


def project_to_density(m):
    """Nearest-by-clipping density matrix: hermitize, clip, renormalize."""
    p = project_psd(m)
    tr = np.real(trace(p))
    if np.any(tr <= 0.0):
        raise ProjectionCollapse("all eigenvalues clipped to zero")
    return p / tr[..., None, None]


def is_density(rho, eps_herm=EPS_HERM, eps_psd=EPS_PSD, eps_tr=EPS_TRACE):
    rho = np.asarray(rho)
    if hs_norm(rho - dagger(rho)).max() > eps_herm:
        return False
    if np.abs(trace(rho) - 1).max() > eps_tr:
        return False
    return np.linalg.eigvalsh(hermitize(rho)).min() >= -eps_psd


def fidelity(gamma, rho):
    """Uhlmann fidelity ``(tr sqrt(sqrt(rho) gamma sqrt(rho)))**2``."""
    gamma = np.asarray(gamma)
    rho = np.asarray(rho)
    _check_same_shape(gamma, rho)
    w, v = np.linalg.eigh(hermitize(rho))
    if w.min() < -EPS_PSD:
        raise ValueError("fidelity requires positive semidefinite input")
    if rho.ndim == 2 and w[-1] > 1 - EPS_PSD:
        # pure reference: <phi|gamma|phi>, without square roots of round-off
        phi = v[:, -1]
        if np.linalg.eigvalsh(hermitize(gamma)).min() < -EPS_PSD:
            raise ValueError("fidelity requires positive semidefinite input")
        return float(np.clip(np.real(np.conj(phi) @ gamma @ phi), 0.0, 1.0))
    sqrt_rho = (v * np.sqrt(np.clip(w, 0, None))[..., None, :]) @ dagger(v)
    inner = np.linalg.eigvalsh(hermitize(sqrt_rho @ gamma @ sqrt_rho))
    if inner.min() < -EPS_PSD:
        raise ValueError("fidelity requires positive semidefinite input")
    f = np.sum(np.sqrt(np.clip(inner, 0, None)), axis=-1) ** 2
    return np.clip(f, 0.0, 1.0)


def purity(rho):
    return np.real(np.einsum("...ij,...ji->...", rho, rho))


def expectation(rho, op):
    return np.einsum("...ij,ji->...", rho, op)


def bloch_z(rho):
    rho = np.asarray(rho)
    if rho.shape[-1] != 2:
        raise ValueError("bloch_z needs a qubit (d=2)")
    return np.real(rho[..., 0, 0] - rho[..., 1, 1])


def pure_density(psi):
    psi = np.asarray(psi, dtype=complex)
    return psi[..., :, None] * np.conj(psi[..., None, :])


def random_pure_state(d, rng, size=()):
    psi = rng.normal(size=size + (d,)) + 1j * rng.normal(size=size + (d,))
    return psi / np.linalg.norm(psi, axis=-1, keepdims=True)


def random_density(d, rng, rank=None):
    rank = d if rank is None else rank
    g = rng.normal(size=(d, rank)) + 1j * rng.normal(size=(d, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_hermitian(d, rng, scale=1.0):
    g = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * 0.5 * (g + g.conj().T)


def random_two_body(d, rng):
    """Random self-adjoint, exchange-symmetric two-body operator."""
    h = random_hermitian(d * d, rng)
    s = swap_operator(d)
    return 0.5 * (h + s @ h @ s)


def is_two_body(a, tol=1e-10):
    a = np.asarray(a)
    d = math.isqrt(a.shape[0])
    s = swap_operator(d)
    return (
        hs_norm(a - dagger(a)) <= tol * max(1.0, hs_norm(a))
        and hs_norm(s @ a @ s - a) <= tol * max(1.0, hs_norm(a))
    )
