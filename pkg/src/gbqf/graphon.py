"""Graphons, step kernels, graph sampling and kernel norms.

Step-kernel cells are right-closed, ``(b[i-1], b[i]]``, with the first cell
also containing 0. Evaluating a kernel at the grid points ``p / n`` therefore
lands in the cell whose right edge is ``p / n``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

#: Largest block count handled by exact subset enumeration.
EXACT_BLOCK_CAP = 22
DEFAULT_GRID = 16


class CapExceeded(ValueError):
    """Exact norm enumeration requested above the block-count cap."""


class ApproximateNormWarning(UserWarning):
    """A norm was estimated by local search and is only a lower bound."""


class Graphon:
    """Symmetric kernel on the unit square."""

    def __call__(self, u, v):
        return self.eval(u, v)

    def eval(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if np.any((u < 0) | (u > 1)) or np.any((v < 0) | (v > 1)):
            raise ValueError("graphon coordinates must lie in [0, 1]")
        return self._eval(u, v)

    def _eval(self, u, v):
        raise NotImplementedError

    def to_step(self, grid=DEFAULT_GRID):
        """Discretize on a uniform grid by midpoint evaluation."""
        mid = (np.arange(grid) + 0.5) / grid
        weights = self.eval(mid[:, None], mid[None, :])
        return StepKernel(np.linspace(0.0, 1.0, grid + 1), weights)


@dataclass(frozen=True)
class Constant(Graphon):
    c: float

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError("constant graphon value must lie in [0, 1]")

    def _eval(self, u, v):
        return np.full(np.broadcast(u, v).shape, float(self.c))

    def to_step(self, grid=None):
        return StepKernel(np.array([0.0, 1.0]), np.array([[float(self.c)]]))


class Product(Graphon):
    """``w(u, v) = u * v``."""

    def _eval(self, u, v):
        return u * v

    def __repr__(self):
        return "Product()"


class StepKernel(Graphon):
    """Piecewise-constant kernel on rectangles of a partition of [0, 1].

    Weights in [-2, 2] are accepted so that differences of graphons can be
    represented; ``is_graphon`` tells whether the kernel lies in [0, 1].
    """

    def __init__(self, boundaries, weights):
        b = np.asarray(boundaries, dtype=float)
        w = np.atleast_2d(np.asarray(weights, dtype=float))
        k = len(b) - 1
        if k < 1 or w.shape != (k, k):
            raise ValueError(f"need {k}x{k} weights for {len(b)} boundaries")
        if abs(b[0]) > 1e-12 or abs(b[-1] - 1) > 1e-12 or np.any(np.diff(b) <= 0):
            raise ValueError("boundaries must increase strictly from 0 to 1")
        if not np.allclose(w, w.T, atol=1e-12):
            raise ValueError("step kernel weights must be symmetric")
        if np.any(np.abs(w) > 2 + 1e-12):
            raise ValueError("step kernel weights must lie in [-2, 2]")
        self.boundaries = b
        self.weights = w

    @classmethod
    def uniform(cls, weights):
        w = np.atleast_2d(np.asarray(weights, dtype=float))
        return cls(np.linspace(0.0, 1.0, w.shape[0] + 1), w)

    @property
    def k(self):
        return self.weights.shape[0]

    @property
    def widths(self):
        return np.diff(self.boundaries)

    @property
    def is_graphon(self):
        return bool(np.all(self.weights >= 0) and np.all(self.weights <= 1))

    def block_index(self, u):
        idx = np.searchsorted(self.boundaries, u, side="left") - 1
        return np.clip(idx, 0, self.k - 1)

    def _eval(self, u, v):
        return self.weights[self.block_index(u), self.block_index(v)]

    def to_step(self, grid=None):
        return self

    def refine(self, boundaries):
        """Same kernel on a finer partition containing all current boundaries."""
        b = np.asarray(boundaries, dtype=float)
        mid = 0.5 * (b[:-1] + b[1:])
        idx = self.block_index(mid)
        return StepKernel(b, self.weights[np.ix_(idx, idx)])

    def __sub__(self, other):
        a, b = _common_refinement(self, other)
        return StepKernel(a.boundaries, a.weights - b.weights)

    def __add__(self, other):
        a, b = _common_refinement(self, other)
        return StepKernel(a.boundaries, a.weights + b.weights)

    def __mul__(self, scalar):
        return StepKernel(self.boundaries, scalar * self.weights)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __repr__(self):
        return f"StepKernel(k={self.k})"

    def to_json(self):
        return json.dumps(
            {"boundaries": self.boundaries.tolist(), "weights": self.weights.tolist()}
        )

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text) if isinstance(text, str) else text
        return cls(obj["boundaries"], obj["weights"])


def Block(weights, boundaries=None):
    """Block graphon with equal blocks unless ``boundaries`` are given."""
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    if boundaries is None:
        kernel = StepKernel.uniform(w)
    else:
        kernel = StepKernel(boundaries, w)
    if not kernel.is_graphon:
        raise ValueError("block graphon weights must lie in [0, 1]")
    return kernel


class GridGraphon(Graphon):
    """Graphon sampled on a regular grid over [0, 1]^2, bilinear in between."""

    def __init__(self, values):
        z = np.asarray(values, dtype=float)
        if z.ndim != 2 or z.shape[0] != z.shape[1] or z.shape[0] < 2:
            raise ValueError("grid graphon needs a square array of size >= 2")
        if not np.allclose(z, z.T) or z.min() < 0 or z.max() > 1:
            raise ValueError("grid graphon values must be symmetric in [0, 1]")
        self.values = z

    def _eval(self, u, v):
        n = self.values.shape[0] - 1
        x, y = np.broadcast_arrays(u * n, v * n)
        i = np.clip(np.floor(x).astype(int), 0, n - 1)
        j = np.clip(np.floor(y).astype(int), 0, n - 1)
        fx, fy = x - i, y - j
        z = self.values
        return (
            z[i, j] * (1 - fx) * (1 - fy)
            + z[i + 1, j] * fx * (1 - fy)
            + z[i, j + 1] * (1 - fx) * fy
            + z[i + 1, j + 1] * fx * fy
        )


# -- graphs -----------------------------------------------------------------


def check_adjacency(xi):
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 2 or xi.shape[0] != xi.shape[1]:
        raise ValueError("adjacency weights must be a square matrix")
    if not np.allclose(xi, xi.T):
        raise ValueError("adjacency weights must be symmetric")
    if np.any(np.diag(xi) != 0):
        raise ValueError("adjacency weights must have a zero diagonal")
    return xi


def step_from_adjacency(xi):
    xi = check_adjacency(xi)
    return StepKernel.uniform(xi)


def grid_points(n):
    """Right endpoints ``p / n`` of the uniform cells."""
    return np.arange(1, n + 1) / n


def deterministic_weights(w, n):
    """``xi[p, q] = w(p/n, q/n)`` off the diagonal, zero on it."""
    x = grid_points(n)
    xi = np.array(w.eval(x[:, None], x[None, :]), dtype=float)
    xi = 0.5 * (xi + xi.T)
    np.fill_diagonal(xi, 0.0)
    return xi


def sample_bernoulli(w, n, seed):
    """Independent symmetric Bernoulli(w(p/n, q/n)) edges, no self-loops."""
    rng = np.random.default_rng(seed)
    x = grid_points(n)
    prob = np.asarray(w.eval(x[:, None], x[None, :]), dtype=float)
    upper = np.triu(rng.random((n, n)) < prob, k=1).astype(float)
    return upper + upper.T


# -- norms -------------------------------------------------------------------


def l1_norm(kernel):
    kernel = kernel.to_step()
    lam = kernel.widths
    return float(lam @ np.abs(kernel.weights) @ lam)


def _subset_masks(k, chunk=1 << 14):
    """Yield blocks of 0/1 row vectors enumerating all subsets of k items."""
    total = 1 << k
    bits = 1 << np.arange(k)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        yield ((idx[:, None] & bits) > 0).astype(float)


def _sign_vectors(k, chunk=1 << 14):
    # s_0 = +1 w.l.o.g. since the objective is even in s
    for mask in _subset_masks(k - 1, chunk) if k > 1 else [np.zeros((1, 0))]:
        yield np.hstack([np.ones((mask.shape[0], 1)), 1.0 - 2.0 * mask])


def cut_norm(kernel, *, cap=EXACT_BLOCK_CAP, approximate=False, seed=0):
    """Cut norm of a step kernel.

    The supremum over measurable rectangles is attained on unions of blocks.
    For each row subset the best column subset is read off the signs of the
    column sums. Above ``cap`` blocks, ``approximate=True`` switches to a
    randomized local search whose value is a lower bound.
    """
    kernel = kernel.to_step()
    lam = kernel.widths
    m = lam[:, None] * kernel.weights * lam[None, :]
    k = kernel.k
    if k > cap:
        if not approximate:
            raise CapExceeded(f"{k} blocks exceed exact cap {cap}")
        warnings.warn(
            f"cut norm of {k}-block kernel is a local-search lower bound",
            ApproximateNormWarning,
            stacklevel=2,
        )
        return _cut_norm_local_search(m, seed)
    best = 0.0
    for rows in _subset_masks(k):
        cols = rows @ m
        best = max(best, np.clip(cols, 0, None).sum(axis=1).max())
        best = max(best, -np.clip(cols, None, 0).sum(axis=1).min())
    return float(best)


def _cut_norm_local_search(m, seed, restarts=64):
    rng = np.random.default_rng(seed)
    k = m.shape[0]
    best = 0.0
    for sign in (1.0, -1.0):
        mm = sign * m
        for _ in range(restarts):
            s = rng.random(k) < 0.5
            improved = True
            while improved:
                t = (s.astype(float) @ mm) > 0
                s_new = (mm @ t.astype(float)) > 0
                improved = not np.array_equal(s_new, s)
                s = s_new
            best = max(best, float(s.astype(float) @ mm @ t.astype(float)))
    return best


def op_norm(kernel, *, cap=EXACT_BLOCK_CAP, approximate=False, seed=0):
    """L-infinity to L1 norm of the integral operator of a step kernel."""
    kernel = kernel.to_step()
    lam = kernel.widths
    m = lam[:, None] * kernel.weights * lam[None, :]
    k = kernel.k
    if k > cap:
        if not approximate:
            raise CapExceeded(f"{k} blocks exceed exact cap {cap}")
        warnings.warn(
            f"operator norm of {k}-block kernel is a local-search lower bound",
            ApproximateNormWarning,
            stacklevel=2,
        )
        rng = np.random.default_rng(seed)
        best = 0.0
        for _ in range(64):
            s = rng.choice([-1.0, 1.0], size=k)
            while True:
                r = np.sign(m @ s) + (m @ s == 0)
                s_new = np.sign(r @ m) + (r @ m == 0)
                if np.array_equal(s_new, s):
                    break
                s = s_new
            best = max(best, float(np.abs(m @ s).sum()))
        return best
    best = 0.0
    for s in _sign_vectors(k):
        best = max(best, np.abs(s @ m.T).sum(axis=1).max())
    return float(best)


def _common_refinement(a, b, tol=1e-12):
    a, b = a.to_step(), b.to_step()
    merged = np.union1d(a.boundaries, b.boundaries)
    keep = np.concatenate([[True], np.diff(merged) > tol])
    merged = merged[keep]
    merged[-1] = 1.0
    return a.refine(merged), b.refine(merged)


def cut_distance(a, b, **kwargs):
    """Cut norm of ``a - b`` on the common refinement, without relabeling."""
    ra, rb = _common_refinement(a, b)
    return cut_norm(StepKernel(ra.boundaries, ra.weights - rb.weights), **kwargs)
