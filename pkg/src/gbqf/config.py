"""JSON configuration: complex matrices, models, kernels and run sections.

Complex matrices are nested lists of ``[re, im]`` pairs, one pair per entry.
A run configuration has the sections ``model``, ``graphon``, ``grid``,
``ensemble`` and ``experiment``; missing keys take the defaults below.
"""

from __future__ import annotations

import copy
import hashlib
import json

import numpy as np

from . import qla
from .filtering import FilterModel
from .graphon import Block, Constant, Product, StepKernel

SECTIONS = ("model", "graphon", "grid", "ensemble", "experiment")

DEFAULTS = {
    "model": {"H": None, "L": None, "H_ctrl": None, "A": None, "eta": 1.0},
    "graphon": {"kind": "product"},
    "grid": {"T": 1.0, "dt": 1e-3},
    "ensemble": {"K": 50, "seed": 0, "threads": None},
    "experiment": {},
}


class ConfigError(ValueError):
    pass


def matrix_to_json(m):
    m = np.asarray(m, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in m]


def matrix_from_json(obj):
    try:
        a = np.asarray(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed complex matrix: {exc}") from None
    if a.ndim == 3 and a.shape[-1] == 2:
        return a[..., 0] + 1j * a[..., 1]
    if a.ndim == 2 and a.shape[-1] == 2:
        # a vector of [re, im] pairs
        return a[:, 0] + 1j * a[:, 1]
    raise ConfigError("complex values must be [re, im] pairs")


def model_to_json(model):
    out = {"H": matrix_to_json(model.H), "L": matrix_to_json(model.L), "eta": model.eta}
    if model.H_ctrl is not None:
        out["H_ctrl"] = matrix_to_json(model.H_ctrl)
    return out


def model_from_json(obj, d=2):
    """Filter model; ``H`` defaults to zero, ``L`` to ``sigma_z`` for qubits."""
    H = np.zeros((d, d)) if obj.get("H") is None else matrix_from_json(obj["H"])
    if obj.get("L") is None:
        if H.shape != (2, 2):
            raise ConfigError("L is required unless d = 2")
        L = qla.SZ
    else:
        L = matrix_from_json(obj["L"])
    Hc = None if obj.get("H_ctrl") is None else matrix_from_json(obj["H_ctrl"])
    try:
        return FilterModel(H, L, float(obj.get("eta", 1.0)), Hc)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def coupling_from_json(obj, d):
    """Two-body operator ``A``; defaults to ``sigma_z x sigma_z`` for qubits."""
    if obj.get("A") is None:
        if d != 2:
            raise ConfigError("A is required unless d = 2")
        return np.kron(qla.SZ, qla.SZ)
    A = matrix_from_json(obj["A"])
    if A.shape != (d * d, d * d) or not qla.is_two_body(A, tol=1e-9):
        raise ConfigError("A must be a self-adjoint, exchange-symmetric d^2 x d^2 matrix")
    return A


def graphon_from_json(obj):
    kind = obj.get("kind", "product")
    try:
        if kind == "product":
            return Product()
        if kind == "constant":
            return Constant(float(obj["c"]))
        if kind == "block":
            return Block(obj["weights"], obj.get("boundaries"))
        if kind == "step":
            return StepKernel(obj["boundaries"], obj["weights"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad graphon section: {exc}") from None
    raise ConfigError(f"unknown graphon kind {kind!r}")


def graphon_to_json(w):
    if isinstance(w, Product):
        return {"kind": "product"}
    if isinstance(w, Constant):
        return {"kind": "constant", "c": w.c}
    if isinstance(w, StepKernel):
        return {
            "kind": "step",
            "boundaries": w.boundaries.tolist(),
            "weights": w.weights.tolist(),
        }
    raise TypeError(f"cannot serialize {w!r}")


def block_system_to_json(cfg):
    out = {
        "c": cfg.c,
        "N": cfg.N,
        "model": model_to_json(cfg.model),
        "A": matrix_to_json(cfg.A),
        "xi": cfg.xi.tolist(),
        "normalization": cfg.normalization,
    }
    if cfg.psi0 is not None:
        out["psi0"] = [[[float(z.real), float(z.imag)] for z in v] for v in cfg.psi0]
    return out


def block_system_from_json(obj):
    from .nbody import BlockSystemConfig

    model = model_from_json(obj["model"])
    psi0 = obj.get("psi0")
    if psi0 is not None:
        psi0 = np.asarray(psi0, dtype=float)
        psi0 = psi0[..., 0] + 1j * psi0[..., 1]
    try:
        return BlockSystemConfig(
            int(obj["c"]),
            int(obj["N"]),
            model,
            matrix_from_json(obj["A"]),
            np.asarray(obj["xi"], dtype=float),
            psi0,
            obj.get("normalization", "block"),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad block system: {exc}") from None


def load_config(path=None, text=None, overrides=None):
    """Parsed configuration with defaults filled in.

    Layers, lowest first: :data:`DEFAULTS`, ``overrides`` (per-command
    defaults), then the file or ``text``.
    """
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
    elif text is not None:
        raw = json.loads(text)
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULTS)
    for key, section in (overrides or {}).items():
        cfg[key].update(section)
    for key, section in raw.items():
        if not isinstance(section, dict):
            raise ConfigError(f"section {key!r} must be an object")
        cfg[key].update(section)
    return cfg


def config_hash(cfg):
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()
