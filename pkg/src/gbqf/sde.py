"""Euler-Maruyama integration with reproducible, counter-keyed Wiener noise.

States may carry a leading batch axis; every driver increment then has the
batch shape and is broadcast against the state. This is how ensembles are run
in one vectorized integration.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

DEFAULT_T = 1.0
DEFAULT_STEPS = 2000


class NonFiniteState(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"non-finite state after step {step}")
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    t0: float = 0.0
    t1: float = DEFAULT_T
    n_steps: int = DEFAULT_STEPS

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError("need t1 > t0")
        if self.n_steps < 1:
            raise ValueError("need at least one step")

    @classmethod
    def from_dt(cls, T, dt, t0=0.0):
        n = int(round((T - t0) / dt))
        return cls(t0, T, max(n, 1))

    @property
    def dt(self):
        return (self.t1 - self.t0) / self.n_steps

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def refine(self, factor):
        return TimeGrid(self.t0, self.t1, self.n_steps * factor)


def _as_key(path_index):
    if isinstance(path_index, (int, np.integer)):
        return (int(path_index),)
    return tuple(int(k) for k in path_index)


@dataclass(frozen=True)
class NoisePath:
    """Wiener increments, shape ``batch + (n_steps, n_drivers)``."""

    grid: TimeGrid
    increments: np.ndarray
    seed: int | None = None
    keys: tuple = ()

    @property
    def n_drivers(self):
        return self.increments.shape[-1]

    @property
    def batch_shape(self):
        return self.increments.shape[:-2]

    def driver(self, k):
        return self.increments[..., k]

    def path(self):
        """Brownian path at grid times, shape ``batch + (n_steps + 1, n_drivers)``."""
        w = np.cumsum(self.increments, axis=-2)
        zeros = np.zeros(self.batch_shape + (1, self.n_drivers))
        return np.concatenate([zeros, w], axis=-2)

    def select_drivers(self, idx):
        return NoisePath(self.grid, self.increments[..., idx], self.seed, self.keys)

    def zeros_like(self):
        return NoisePath(self.grid, np.zeros_like(self.increments), self.seed, self.keys)


def driver_increments(master_seed, key, driver, n_steps, dt):
    """Increments of one driver; depends only on ``(seed, key, driver)``.

    Philox is counter based: the stream for a key is fixed, and step ``s`` is
    position ``s`` of that stream.
    """
    ss = np.random.SeedSequence([int(master_seed), *key, int(driver)])
    gen = np.random.Generator(np.random.Philox(ss))
    return gen.standard_normal(n_steps) * np.sqrt(dt)


def generate_noise(n_drivers, grid, master_seed, path_index=0):
    """Noise for one path (``path_index`` int or tuple) or a list of paths."""
    if isinstance(path_index, list):
        keys = [_as_key(p) for p in path_index]
        inc = np.stack(
            [
                np.stack(
                    [
                        driver_increments(master_seed, key, k, grid.n_steps, grid.dt)
                        for k in range(n_drivers)
                    ],
                    axis=-1,
                )
                for key in keys
            ]
        ) if keys else np.zeros((0, grid.n_steps, n_drivers))
        return NoisePath(grid, inc, int(master_seed), tuple(keys))
    key = _as_key(path_index)
    inc = np.stack(
        [driver_increments(master_seed, key, k, grid.n_steps, grid.dt) for k in range(n_drivers)],
        axis=-1,
    )
    return NoisePath(grid, inc, int(master_seed), (key,))


def coarsen(noise, factor):
    n = noise.grid.n_steps
    if factor < 1 or n % factor:
        raise ValueError(f"{n} steps not divisible by factor {factor}")
    shape = noise.batch_shape + (n // factor, factor, noise.n_drivers)
    inc = noise.increments.reshape(shape).sum(axis=-2)
    grid = TimeGrid(noise.grid.t0, noise.grid.t1, n // factor)
    return NoisePath(grid, inc, noise.seed, noise.keys)


@dataclass
class Trajectory:
    """Recorded states at ``times``; ``dW``/``dY`` hold every step's increments."""

    grid: TimeGrid
    times: np.ndarray
    states: np.ndarray
    dW: np.ndarray | None = None
    dY: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.states[-1]

    def to_csv(self, path):
        write_trajectory_csv(path, self)


def _expand(dw, x):
    dw = np.asarray(dw)
    return dw.reshape(dw.shape + (1,) * (x.ndim - dw.ndim))


def integrate(
    drift,
    diffusions,
    x0,
    grid,
    noise,
    post_step=None,
    record_every=1,
    callback=None,
    milstein=None,
):
    """Explicit Euler-Maruyama ``x += F(x, t) dt + sum_k G_k(x, t) dW_k``.

    ``drift`` and each entry of ``diffusions`` are called as ``f(x, t)``.
    ``milstein``, if given, is either a list with one directional derivative
    ``dG_k(x, t, v)`` per driver, adding ``dG_k(x, t, G_k) (dW_k^2 - dt) / 2``
    (the full Milstein scheme for one driver, its diagonal part otherwise), or
    a callable ``m(x, t, dw, gs)`` returning the whole correction from the
    increments and the evaluated diffusion terms ``gs``.
    ``post_step(x)`` is applied after every step (projection or
    renormalization). ``callback(n, t, x, dW)`` sees the left-endpoint state of
    each step before it is taken. States are recorded every ``record_every``
    steps; the final state is always recorded.
    """
    if len(diffusions) != noise.n_drivers:
        raise ValueError(
            f"{len(diffusions)} diffusion terms for {noise.n_drivers} drivers"
        )
    if noise.grid.n_steps != grid.n_steps:
        raise ValueError("noise grid does not match integration grid")
    x = np.array(x0, dtype=complex)
    dt = grid.dt
    times = grid.times
    keep = sorted(set(range(0, grid.n_steps + 1, record_every)) | {grid.n_steps})
    keep_set = set(keep)
    states = [x.copy()]
    for n in range(grid.n_steps):
        t = times[n]
        dw = noise.increments[..., n, :]
        if callback is not None:
            callback(n, t, x, dw)
        dx = drift(x, t) * dt
        if callable(milstein):
            gs = [g(x, t) for g in diffusions]
            for k, gx in enumerate(gs):
                dx = dx + gx * _expand(dw[..., k], x)
            dx = dx + milstein(x, t, dw, gs)
            diffusions_left = ()
        else:
            diffusions_left = diffusions
        for k, g in enumerate(diffusions_left):
            dk = dw[..., k]
            if np.any(dk):
                gx = g(x, t)
                dx = dx + gx * _expand(dk, x)
                if milstein is not None:
                    corr = 0.5 * (dk * dk - dt)
                    dx = dx + milstein[k](x, t, gx) * _expand(corr, x)
        x = x + dx
        if post_step is not None:
            x = post_step(x)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(n)
        if n + 1 in keep_set:
            states.append(x.copy())
    return Trajectory(grid, times[keep], np.array(states), dW=noise.increments)


def resolve_threads(threads=None):
    if threads:
        return int(threads)
    env = os.environ.get("GBQF_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def map_chunks(fn, items, threads=None, chunk=None):
    """Apply ``fn`` to consecutive chunks of ``items``; results in input order."""
    items = list(items)
    threads = resolve_threads(threads)
    if not items:
        return []
    chunk = chunk or max(1, -(-len(items) // threads))
    parts = [items[i : i + chunk] for i in range(0, len(items), chunk)]
    if threads == 1 or len(parts) == 1:
        return [fn(p) for p in parts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, parts))


def write_trajectory_csv(path, traj):
    """Columns: t, state components (re/im interleaved), then dW and dY."""
    states = np.asarray(traj.states)
    n_rec = states.shape[0]
    flat = states.reshape(n_rec, -1)
    header = ["t"]
    for j in range(flat.shape[1]):
        header += [f"re{j}", f"im{j}"]
    cols = [traj.times[:, None]]
    inter = np.empty((n_rec, 2 * flat.shape[1]))
    inter[:, 0::2] = flat.real
    inter[:, 1::2] = flat.imag
    cols.append(inter)
    step_idx = np.rint((traj.times - traj.grid.t0) / traj.grid.dt).astype(int)
    for name, inc in (("dW", traj.dW), ("dY", traj.dY)):
        if inc is None:
            continue
        inc = np.asarray(inc).reshape(traj.grid.n_steps, -1)
        padded = np.vstack([inc, np.full((1, inc.shape[1]), np.nan)])
        cols.append(padded[step_idx])
        header += [f"{name}{k}" for k in range(inc.shape[1])]
    write_csv(path, header, np.hstack(cols))


def format_number(x):
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_number(v) for v in row])
