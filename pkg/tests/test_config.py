import json

import numpy as np
import pytest

from gbqf import qla
from gbqf.config import (
    ConfigError,
    block_system_from_json,
    block_system_to_json,
    config_hash,
    coupling_from_json,
    graphon_from_json,
    graphon_to_json,
    load_config,
    matrix_from_json,
    matrix_to_json,
    model_from_json,
    model_to_json,
)
from gbqf.filtering import FilterModel
from gbqf.graphon import Block, Constant, Product
from gbqf.nbody import BlockSystemConfig


def test_matrix_roundtrip():
    m = np.array([[1 + 2j, -0.5], [3j, 4]])
    assert matrix_to_json(m)[0][0] == [1.0, 2.0]
    np.testing.assert_array_equal(matrix_from_json(json.loads(json.dumps(matrix_to_json(m)))), m)
    np.testing.assert_array_equal(matrix_from_json([[1, 0], [0, 1]]), [1, 1j])
    with pytest.raises(ConfigError):
        matrix_from_json([[1, 2, 3]])
    with pytest.raises(ConfigError):
        matrix_from_json("abc")


def test_model_roundtrip_and_defaults():
    m = FilterModel(qla.SX, 0.5 * qla.SZ, 0.7, H_ctrl=qla.SY)
    back = model_from_json(model_to_json(m))
    np.testing.assert_array_equal(back.H, m.H)
    np.testing.assert_array_equal(back.L, m.L)
    np.testing.assert_array_equal(back.H_ctrl, m.H_ctrl)
    assert back.eta == 0.7
    d = model_from_json({})
    np.testing.assert_array_equal(d.L, qla.SZ)
    with pytest.raises(ConfigError):
        model_from_json({"eta": 2.0})
    with pytest.raises(ConfigError):
        model_from_json({"H": matrix_to_json(np.eye(3))})


def test_coupling():
    np.testing.assert_array_equal(coupling_from_json({}, 2), np.kron(qla.SZ, qla.SZ))
    with pytest.raises(ConfigError):
        coupling_from_json({"A": matrix_to_json(np.kron(qla.SZ, np.eye(2)))}, 2)
    with pytest.raises(ConfigError):
        coupling_from_json({}, 3)


def test_graphon_sections():
    assert isinstance(graphon_from_json({}), Product)
    assert graphon_from_json({"kind": "constant", "c": 0.3}).c == 0.3
    b = graphon_from_json({"kind": "block", "weights": [[1, 0.5], [0.5, 1]]})
    assert b(0.9, 0.1) == 0.5
    for w in (Product(), Constant(0.2), Block([[1, 0.2], [0.2, 0.4]])):
        again = graphon_from_json(graphon_to_json(w))
        assert again(0.3, 0.8) == w(0.3, 0.8)
    with pytest.raises(ConfigError):
        graphon_from_json({"kind": "block"})
    with pytest.raises(ConfigError):
        graphon_from_json({"kind": "ring"})


def test_block_system_roundtrip():
    xi = np.array([[0, 1, 0.5, 0.5], [1, 0, 0.5, 0.5], [0.5, 0.5, 0, 1], [0.5, 0.5, 1, 0]])
    cfg = BlockSystemConfig(2, 2, FilterModel(qla.SX, qla.SZ), np.kron(qla.SZ, qla.SZ), xi, np.eye(2))
    back = block_system_from_json(json.loads(json.dumps(block_system_to_json(cfg))))
    assert (back.c, back.N, back.normalization) == (2, 2, "block")
    np.testing.assert_array_equal(back.xi, xi)
    np.testing.assert_allclose(back.initial_state(), cfg.initial_state())
    bad = block_system_to_json(cfg)
    bad["xi"] = np.ones((4, 4)).tolist()
    with pytest.raises(ConfigError):
        block_system_from_json(bad)


def test_load_config_layers(tmp_path):
    cfg = load_config()
    assert cfg["grid"] == {"T": 1.0, "dt": 1e-3}
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"grid": {"dt": 0.01}}))
    cfg = load_config(p, overrides={"grid": {"T": 10.0, "dt": 5e-3}})
    assert cfg["grid"] == {"T": 10.0, "dt": 0.01}
    with pytest.raises(ConfigError):
        load_config(text=json.dumps({"bogus": {}}))
    with pytest.raises(ConfigError):
        load_config(text="[1, 2]")
    with pytest.raises(ConfigError):
        load_config(text=json.dumps({"grid": 3}))
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_config_hash_stable():
    a = load_config()
    b = load_config()
    assert config_hash(a) == config_hash(b)
    b["ensemble"]["seed"] = 1
    assert config_hash(a) != config_hash(b)
