import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emm.data import make_synthetic
from emm.exceptions import (ChecksumError, ConfigError, DataError, DimensionError, FormatError,
                            TruncatedFile, VersionError)
from emm.layers import Dense, EmbeddingConcat, LayerKind, LayerSignature, ReLU
from emm.store import (ModelPool, TrainedModel, build_single, check_binary, fit_model, load_model,
                       model_from_bytes, model_to_bytes, read_signatures, save_model, train_single)
from emm.training import TrainConfig

from .helpers import mlp_model


def test_signature_string():
    assert str(LayerSignature(LayerKind.DENSE, 16, 8)) == "D(16,8)"
    assert str(LayerSignature(LayerKind.RELU, 8, 8)) == "R(8,8)"


def test_model_rejects_broken_chain():
    with pytest.raises(DimensionError):
        TrainedModel("m", "t", [Dense(4, 8), ReLU(6), Dense(6, 1)], 2)
    with pytest.raises(ConfigError):
        TrainedModel("m", "t", [Dense(4, 1)], 3)


def test_roundtrip_is_bit_exact(tmp_path):
    m = build_single("income-tm2", "income", 9, [16, 8], seed=4, cardinalities=(5, 3), emb_dim=2)
    path = save_model(m, tmp_path / "income-tm2.emm")
    back = load_model(path)
    assert back.id == "income-tm2" and back.task == "income"
    assert back.signatures == m.signatures and back.head_index == m.head_index
    for p, q in zip(m.parameters(), back.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    x = np.c_[np.random.default_rng(0).normal(size=(5, 7)), [[1, 2]] * 5]
    assert np.array_equal(m.predict_proba(x), back.predict_proba(x))
    assert model_to_bytes(back) == model_to_bytes(m)


def test_read_signatures_skips_payload(tmp_path):
    m = mlp_model("a", "task", 4, [8])
    path = save_model(m, tmp_path / "a.emm")
    task, sigs, head = read_signatures(path)
    assert task == "task" and sigs == m.signatures and head == 2


def test_bad_magic():
    data = model_to_bytes(mlp_model("a", "t", 3, [2]))
    with pytest.raises(FormatError):
        model_from_bytes(b"XXXX" + data[4:])


def test_bad_version():
    data = bytearray(model_to_bytes(mlp_model("a", "t", 3, [2])))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionError):
        model_from_bytes(bytes(data))


def test_truncated():
    data = model_to_bytes(mlp_model("a", "t", 3, [2]))
    for cut in (2, 10, len(data) - 20, len(data) - 2):
        with pytest.raises(TruncatedFile):
            model_from_bytes(data[:cut])


def test_payload_byte_flip_fails_checksum():
    data = bytearray(model_to_bytes(mlp_model("a", "t", 3, [2])))
    data[-12] ^= 0x01  # inside the last float of the payload
    with pytest.raises(ChecksumError) as info:
        model_from_bytes(bytes(data))
    assert info.value.exit_code == 6


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_any_single_payload_flip_is_detected(data):
    raw = bytearray(model_to_bytes(mlp_model("a", "t", 3, [4], seed=1)))
    payload_start = len(raw) - 4 - 8 * (3 * 4 + 4 + 4 + 1)
    i = data.draw(st.integers(payload_start, len(raw) - 5))
    bit = data.draw(st.integers(0, 7))
    raw[i] ^= 1 << bit
    with pytest.raises(ChecksumError):
        model_from_bytes(bytes(raw))


def test_header_layout():
    m = mlp_model("a", "ab", 3, [2])
    data = model_to_bytes(m)
    assert data[:4] == b"EMM1"
    assert struct.unpack("<I", data[4:8]) == (1,)
    assert struct.unpack("<H", data[8:10]) == (2,) and data[10:12] == b"ab"
    assert struct.unpack("<I", data[12:16]) == (3,)
    assert struct.unpack("<BII", data[16:25]) == (0, 3, 2)
    payload = data[16 + 9 * 3 + 4:-4]
    assert struct.unpack("<I", data[-4:]) == (zlib.crc32(payload),)
    assert len(payload) == 8 * (3 * 2 + 2 + 2 + 1)


def test_pool_validation():
    a = mlp_model("a", "x", 4, [8])
    b = mlp_model("b", "y", 5, [8])
    with pytest.raises(ConfigError):
        ModelPool([])
    with pytest.raises(DimensionError):
        ModelPool([a, b])
    with pytest.raises(ConfigError):
        ModelPool([a, mlp_model("a", "y", 4, [8])])
    with pytest.raises(ConfigError):
        ModelPool([a], ["x", "z"])
    pool = ModelPool([mlp_model("b", "y", 4, [8]), a], ["x", "y"])
    assert [m.id for m in pool.models] == ["a", "b"]


def test_build_single_layout():
    m = build_single("m", "t", 6, [8, 4], seed=0, cardinalities=(3, 4), emb_dim=2)
    assert isinstance(m.layers[0], EmbeddingConcat)
    assert [str(s) for s in m.signatures] == ["E(6,8)", "D(8,8)", "R(8,8)", "D(8,4)", "R(4,4)",
                                              "D(4,1)"]
    assert m.head_index == 5


def test_check_binary():
    assert check_binary(np.array([0, 1, 1]), "t").dtype == np.float64
    with pytest.raises(DataError, match="row 1"):
        check_binary(np.array([0, 2]), "t")


def test_fit_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 5))
    y = (X[:, 0] - X[:, 1] > 0).astype(float)
    cfg = TrainConfig(batch_size=64, lr=1e-2, epochs=5, seed=3)
    runs = []
    for _ in range(2):
        m = build_single("m", "t", 5, [8], seed=3)
        runs.append((fit_model(m, X, y, cfg, X[:100], y[:100]), model_to_bytes(m)))
    losses = [r["loss"] for r in runs[0][0].records if r["split"] == "train"]
    assert losses[-1] < losses[0]
    assert runs[0][1] == runs[1][1]
    assert [r for r in runs[0][0].records] == [r for r in runs[1][0].records]


def test_empty_width_list_is_a_single_head_layer():
    data = make_synthetic(400, 1, 0.5, seed=0)
    m = train_single("task1", [], data, TrainConfig(batch_size=64, epochs=2, seed=0))
    assert [str(s) for s in m.signatures] == ["D(20,1)"] and m.head_index == 0
    assert m.id == "task1-linear"
