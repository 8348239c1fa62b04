"""Command-line entry point: ``gbqf <subcommand> [options]``.

Each run writes its CSV outputs and a ``manifest.json`` into ``--out``. A
``.incomplete`` marker exists while the run is in progress and stays behind
if it crashes. Exit status: 0 on success, 1 if an in-run invariant failed,
2 on a configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time

import numpy as np

from . import __version__, qla
from .config import (
    ConfigError,
    config_hash,
    coupling_from_json,
    graphon_from_json,
    load_config,
    matrix_from_json,
    model_from_json,
)
from .experiments import (
    ConstantControl,
    StatePrepFeedback,
    Zero,
    chaos_sweep,
    cost_eval,
    graphon_convergence_table,
    state_preparation,
    state_reduction,
)
from .graphon import Block, StepKernel, cut_norm, deterministic_weights, l1_norm, op_norm
from .meanfield import UGrid, solve_graphon_lindblad
from .nbody import BlockSystemConfig, marginal, simulate_nbody_sse
from .filtering import simulate_filter
from .sde import TimeGrid, generate_noise, resolve_threads, write_csv
from .selftest import run_selftest

MARKER = ".incomplete"
#: Per-command defaults, applied below the config file and the flags.
COMMAND_DEFAULTS = {
    "statered": {"grid": {"T": 10.0, "dt": 5e-3}, "ensemble": {"K": 200}},
    "stateprep": {"grid": {"T": 10.0, "dt": 5e-3}, "ensemble": {"K": 50}},
}
MANIFEST = "manifest.json"


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--dt", type=float, help="time step")
    common.add_argument("--T", type=float, help="final time")

    p = argparse.ArgumentParser(prog="gbqf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("filter", parents=[common], help="single-particle filter paths")
    s.add_argument("--K", type=int)

    s = sub.add_parser("nbody", parents=[common], help="block N-body pure-state filter")
    s.add_argument("--N", type=int)
    s.add_argument("--c", type=int)
    s.add_argument("--K", type=int)

    s = sub.add_parser("meanfield", parents=[common], help="graphon mean-field path")
    s.add_argument("--M", type=int)

    s = sub.add_parser("chaos", parents=[common], help="propagation-of-chaos sweep")
    s.add_argument("--N", type=_int_list)
    s.add_argument("--c", type=int)
    s.add_argument("--K", type=int)

    for name, text in (("statered", "qubit state reduction"), ("stateprep", "feedback state preparation")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--M", type=int)
        s.add_argument("--K", type=int)

    s = sub.add_parser("graphon", parents=[common], help="kernel norms and sampling convergence")
    s.add_argument("--n", type=_int_list)
    s.add_argument("--samples", type=int)

    s = sub.add_parser("cost", parents=[common], help="Monte-Carlo cost per label")
    s.add_argument("--M", type=int)
    s.add_argument("--K", type=int)
    s.add_argument("--control", choices=["zero", "constant", "feedback"])
    s.add_argument("--value", type=float)
    s.add_argument("--cost", choices=["zero", "one", "alpha2"])

    sub.add_parser("selftest", parents=[common], help="quick oracle checks")
    return p


def _apply_overrides(cfg, args):
    for key in ("T", "dt"):
        if getattr(args, key, None) is not None:
            cfg["grid"][key] = getattr(args, key)
    if args.seed is not None:
        cfg["ensemble"]["seed"] = args.seed
    if args.threads is not None:
        cfg["ensemble"]["threads"] = args.threads
    if getattr(args, "K", None) is not None:
        cfg["ensemble"]["K"] = args.K
    for key in ("N", "c", "M", "n", "samples", "control", "value", "cost"):
        val = getattr(args, key, None)
        if val is not None:
            cfg["experiment"][key] = val
    return cfg


def _grid(cfg):
    g = cfg["grid"]
    try:
        T, dt = float(g["T"]), float(g["dt"])
    except (TypeError, ValueError):
        raise ConfigError("grid.T and grid.dt must be numbers") from None
    if T <= 0 or dt <= 0 or dt > T:
        raise ConfigError("need 0 < dt <= T")
    return TimeGrid.from_dt(T, dt)


def _ensemble(cfg):
    e = cfg["ensemble"]
    K, seed = int(e["K"]), int(e["seed"])
    if K < 1 or seed < 0:
        raise ConfigError("need K >= 1 and a non-negative seed")
    return K, seed


def _psi(obj, d):
    if obj is None:
        return None
    v = matrix_from_json(obj)
    if v.ndim == 1:
        v = v[None]
    if v.shape[-1] != d:
        raise ConfigError("initial state has the wrong dimension")
    return v


def _bloch_state(z):
    th = np.arccos(np.clip(z, -1.0, 1.0))
    return np.array([np.cos(th / 2), np.sin(th / 2)], dtype=complex)


def _block_weights(cfg, c):
    g = cfg["graphon"]
    if g.get("kind") in ("block", "step") and "weights" in g:
        W = np.asarray(g["weights"], dtype=float)
    else:
        W = np.where(np.eye(c, dtype=bool), 1.0, 0.5)
    if W.shape != (c, c):
        raise ConfigError(f"block weights must be {c}x{c}")
    Block(W)
    return W


# -- subcommands -----------------------------------------------------------------
# Each returns (outputs, invariants, summary, extra manifest fields).


def cmd_filter(cfg, out, threads):
    model = model_from_json(cfg["model"])
    grid = _grid(cfg)
    K, seed = _ensemble(cfg)
    rho0 = cfg["experiment"].get("rho0")
    rho0 = np.eye(model.d) / model.d if rho0 is None else matrix_from_json(rho0)
    noise = generate_noise(1, grid, seed, list(range(K)))
    traj, obs = simulate_filter(model, rho0, grid, noise)
    outputs = []
    for k in range(K):
        name = f"trajectory_{k}.csv"
        sub = type(traj)(grid, traj.times, traj.states[:, k], obs.dW[k], obs.dY[k])
        sub.to_csv(os.path.join(out, name))
        outputs.append(name)
    inv = {"states are densities": bool(qla.is_density(traj.states))}
    z = np.real(qla.trace(traj.final @ model.L))
    return outputs, inv, f"filter: K={K} mean <L>_T={z.mean():.6g}", {}


def cmd_nbody(cfg, out, threads):
    model = model_from_json(cfg["model"])
    e = cfg["experiment"]
    c, N = int(e.get("c", 2)), int(e.get("N", 2))
    grid = _grid(cfg)
    K, seed = _ensemble(cfg)
    A = coupling_from_json(cfg["model"], model.d)
    W = _block_weights(cfg, c)
    xi = deterministic_weights(Block(W), c * N)
    psi0 = _psi(e.get("psi0"), model.d)
    if psi0 is None:
        psi0 = np.array([_bloch_state(0.5)] * c)
    try:
        bs = BlockSystemConfig(c, N, model, A, xi, psi0, e.get("normalization", "block"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    noise = generate_noise(c * N, grid, seed, list(range(K)))
    every = max(1, grid.n_steps // 100)
    traj = simulate_nbody_sse(bs, grid, noise, record_every=every)
    header = ["t"] + [f"z_{i}_{l}" for i in range(c) for l in range(N)]
    cols = [traj.times]
    for i in range(c):
        for l in range(N):
            rho = marginal(traj.states, i, l, c, N, model.d, pure=True)
            cols.append(np.real(qla.trace(rho @ model.L)).mean(axis=1))
    write_csv(os.path.join(out, "marginals.csv"), header, np.column_stack(cols))
    norm_err = np.abs(np.linalg.norm(traj.states, axis=-1) - 1).max()
    inv = {"unit norm": bool(norm_err < 1e-10)}
    return ["marginals.csv"], inv, f"nbody: c={c} N={N} K={K}", {}


def cmd_meanfield(cfg, out, threads):
    model = model_from_json(cfg["model"])
    A = coupling_from_json(cfg["model"], model.d)
    w = graphon_from_json(cfg["graphon"])
    grid = _grid(cfg)
    ug = UGrid(int(cfg["experiment"].get("M", 8)))
    rho0 = cfg["experiment"].get("rho0")
    rho0 = np.eye(model.d) / model.d if rho0 is None else matrix_from_json(rho0)
    path = solve_graphon_lindblad(model, A, w, ug, grid, rho0)
    path.to_csv(os.path.join(out, "meanfield.csv"))
    inv = {"states are densities": bool(qla.is_density(path.m))}
    return ["meanfield.csv"], inv, f"meanfield: M={ug.M} steps={grid.n_steps}", {}


def cmd_chaos(cfg, out, threads):
    model = model_from_json(cfg["model"])
    A = coupling_from_json(cfg["model"], model.d)
    e = cfg["experiment"]
    c = int(e.get("c", 2))
    N_list = e.get("N", [1, 2, 3, 4])
    N_list = [N_list] if isinstance(N_list, int) else list(N_list)
    W = _block_weights(cfg, c)
    psi0 = _psi(e.get("psi0"), model.d)
    if psi0 is None:
        psi0 = np.array([_bloch_state(0.5)] * c)
    g = cfg["grid"]
    K, seed = _ensemble(cfg)
    _grid(cfg)
    try:
        res = chaos_sweep(
            c, N_list, model, A, W, psi0, T=float(g["T"]), dt=float(g["dt"]),
            K=K, seed=seed, threads=threads,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_csv(
        os.path.join(out, "chaos.csv"),
        ["N", "mean_D_T", "se_D_T", "mean_D_0", "cut_term", "inv_sqrt_N"],
        res.rows(),
    )
    outputs = ["chaos.csv"]
    for N in N_list:
        per_particle, mean = res.curves[N]
        name = f"dcurves_N{N}.csv"
        header = ["t"] + [f"D_{i}_{l}" for i in range(c) for l in range(N)] + ["mean_D"]
        write_csv(os.path.join(out, name), header, np.column_stack([res.times, per_particle, mean]))
        outputs.append(name)
    inv = {
        "D at t=0 vanishes": bool(np.abs(res.mean_D0).max() <= 1e-12),
        "D_N(T) non-increasing within 2 SE": bool(res.non_increasing(2.0)),
    }
    extra = {
        "fitted_C": res.fitted_C,
        "slope": res.slope,
        "coupling": "particle (i, l) and its limit copy share driver i*N+l of each path",
    }
    summary = "chaos: " + " ".join(f"N={n}:{m:.4g}" for n, m in zip(N_list, res.mean_D))
    return outputs, inv, summary, extra


def _qubit_args(cfg):
    g = cfg["grid"]
    K, seed = _ensemble(cfg)
    return UGrid(int(cfg["experiment"].get("M", 8))), float(g["T"]), float(g["dt"]), K, seed


def cmd_statered(cfg, out, threads):
    ug, T, dt, K, seed = _qubit_args(cfg)
    res = state_reduction(ug, T=T, K=K, seed=seed, dt=dt)
    write_csv(
        os.path.join(out, "lyapunov.csv"),
        ["t", "mean_V", "mean_V2", "residual", "residual_se"],
        np.column_stack([res.times, res.mean_V, res.mean_V2, res.residual, res.residual_se]),
    )
    write_csv(os.path.join(out, "V_T.csv"), ["path", "V_T"], np.column_stack([np.arange(K), res.V_T]))
    inv = {
        "V_0 = 1": bool(abs(res.V0 - 1) < 1e-12),
        "identity residual within 3 SE + 0.05": bool(
            np.all(np.abs(res.residual) <= 3 * res.residual_se + 0.05)
        ),
    }
    return ["lyapunov.csv", "V_T.csv"], inv, f"statered: E[V_T]={res.mean_V[-1]:.4g}", {
        "T": T, "dt": dt, "K": K, "M": ug.M,
    }


def cmd_stateprep(cfg, out, threads):
    ug, T, dt, K, seed = _qubit_args(cfg)
    res = state_preparation(ug, T=T, K=K, seed=seed, dt=dt)
    header = ["t"] + [f"F_u{b}" for b in range(ug.M)]
    write_csv(os.path.join(out, "fidelity_labels.csv"), header, np.column_stack([res.times, res.fidelity]))
    lo, hi = res.mean_over(True), res.mean_over(False)
    write_csv(
        os.path.join(out, "fidelity_sets.csv"),
        ["t", "F_lower", "F_upper"],
        np.column_stack([res.times, lo, hi]),
    )
    inv = {
        "lower labels reach rho_g (F >= 0.9)": bool(lo[-1] >= 0.9),
        "upper labels leave rho_g (F <= 0.1)": bool(hi[-1] <= 0.1),
    }
    summary = f"stateprep: F_lower={lo[-1]:.4g} F_upper={hi[-1]:.4g} clips={res.clip_events}"
    return ["fidelity_labels.csv", "fidelity_sets.csv"], inv, summary, {
        "T": T, "dt": dt, "K": K, "M": ug.M, "clip_events": res.clip_events,
    }


def cmd_graphon(cfg, out, threads):
    w = graphon_from_json(cfg["graphon"])
    e = cfg["experiment"]
    n_list = e.get("n", [4, 8, 16])
    n_list = [n_list] if isinstance(n_list, int) else list(n_list)
    samples = int(e.get("samples", 10))
    _, seed = _ensemble(cfg)
    kernel = w if isinstance(w, StepKernel) else w.to_step(int(e.get("grid", 8)))
    l1, cut, op = l1_norm(kernel), cut_norm(kernel), op_norm(kernel)
    rows = graphon_convergence_table(w, n_list, samples, seed)
    write_csv(os.path.join(out, "convergence.csv"), ["n", "mean_cut_distance", "se"], rows)
    write_csv(os.path.join(out, "norms.csv"), ["l1", "cut", "op"], [[l1, cut, op]])
    inv = {"cut <= op <= 4 cut": bool(cut <= op + 1e-12 and op <= 4 * cut + 1e-12)}
    return ["convergence.csv", "norms.csv"], inv, f"graphon: l1={l1:.4g} cut={cut:.4g} op={op:.4g}", {}


def cmd_cost(cfg, out, threads):
    e = cfg["experiment"]
    ug = UGrid(int(e.get("M", 4)))
    grid = _grid(cfg)
    K, seed = _ensemble(cfg)
    kind = e.get("control", "zero")
    if kind == "zero":
        law = Zero()
    elif kind == "constant":
        law = ConstantControl(float(e.get("value", 1.0)))
    elif kind == "feedback":
        law = StatePrepFeedback()
    else:
        raise ConfigError(f"unknown control {kind!r}")
    costs = {
        "zero": lambda a, rho, G: np.zeros(np.shape(rho)[:-2]),
        "one": lambda a, rho, G: np.ones(np.shape(rho)[:-2]),
        "alpha2": lambda a, rho, G: np.asarray(a, dtype=float) ** 2,
    }
    cost_kind = e.get("cost", "alpha2")
    if cost_kind not in costs:
        raise ConfigError(f"unknown cost {cost_kind!r}")
    res = cost_eval(
        law, costs[cost_kind], lambda rho, G: np.zeros(np.shape(rho)[:-2]), ug, grid, K, seed
    )
    write_csv(os.path.join(out, "cost.csv"), ["u", "J", "se"], np.column_stack([res.labels, res.J, res.se]))
    inv = {"finite costs": bool(np.all(np.isfinite(res.J)))}
    return ["cost.csv"], inv, f"cost: mean J={res.J.mean():.6g}", {}


def cmd_selftest(cfg, out, threads):
    _, seed = _ensemble(cfg)
    results = run_selftest(seed)
    write_csv(
        os.path.join(out, "selftest.csv"),
        ["check", "passed"],
        [[i, int(v)] for i, v in enumerate(results.values())],
    )
    n_ok = sum(results.values())
    return ["selftest.csv"], results, f"selftest: {n_ok}/{len(results)} passed", {
        "checks": list(results)
    }


COMMANDS = {
    "filter": cmd_filter,
    "nbody": cmd_nbody,
    "meanfield": cmd_meanfield,
    "chaos": cmd_chaos,
    "statered": cmd_statered,
    "stateprep": cmd_stateprep,
    "graphon": cmd_graphon,
    "cost": cmd_cost,
    "selftest": cmd_selftest,
}


def _write_manifest(out, manifest):
    tmp = os.path.join(out, MANIFEST + ".tmp")
    with open(tmp, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(out, MANIFEST))


def main(argv=None):
    args = build_parser().parse_args(argv)
    start = time.time()
    try:
        cfg = load_config(args.config, overrides=COMMAND_DEFAULTS.get(args.command))
        cfg = _apply_overrides(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or os.path.join("runs", args.command)
    os.makedirs(out, exist_ok=True)
    marker = os.path.join(out, MARKER)
    with open(marker, "w") as fh:
        fh.write("")
    old = os.path.join(out, MANIFEST)
    if os.path.exists(old):
        os.remove(old)
    threads = resolve_threads(cfg["ensemble"].get("threads"))
    try:
        outputs, invariants, summary, extra = COMMANDS[args.command](cfg, out, threads)
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    manifest = {
        "command": args.command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["ensemble"]["seed"],
        "threads": threads,
        "versions": {
            "gbqf": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "wall_clock_s": time.time() - start,
        "invariants": invariants,
        "outputs": outputs,
        "summary": summary,
    }
    manifest.update(extra)
    _write_manifest(out, manifest)
    os.remove(marker)
    print(summary)
    failed = [k for k, v in invariants.items() if not v]
    for name in failed:
        print(f"invariant failed: {name}", file=sys.stderr)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
