import json
import struct

import numpy as np
import pytest

from dpmshard.diagnostics import TRACE_SCHEMA
from dpmshard.errors import DataIOError, IntegrityError, UsageError
from dpmshard.formats import (dump_line, read_csv_dataset, read_dataset, read_snapshot, read_trace, read_truth,
                              truth_path_for, write_dataset, write_snapshot, write_truth)
from dpmshard.model import BinaryDataset
from dpmshard.prior import ConcentrationSpec, two_stage_crp_sample
from dpmshard.state import check_state, state_from_assignment


def test_dataset_round_trip_with_labels(tmp_path, small_data):
    data, _ = small_data
    write_dataset(tmp_path / "d.bin", data)
    back = read_dataset(tmp_path / "d.bin")
    assert np.array_equal(back.bits, data.bits)
    assert np.array_equal(back.row_ids, data.row_ids)
    assert np.array_equal(back.labels, data.labels)
    assert back.n_heldout == data.n_heldout


@pytest.mark.parametrize("n_dims", [1, 7, 8, 9, 17])
def test_dataset_round_trip_odd_widths(tmp_path, n_dims):
    bits = np.random.default_rng(n_dims).integers(0, 2, size=(13, n_dims)).astype(np.uint8)
    write_dataset(tmp_path / "d.bin", BinaryDataset(bits))
    back = read_dataset(tmp_path / "d.bin")
    assert np.array_equal(back.bits, bits)
    assert back.labels is None


def test_dataset_header_layout(tmp_path):
    bits = np.array([[1, 0, 1]], np.uint8)
    write_dataset(tmp_path / "d.bin", BinaryDataset(bits))
    raw = (tmp_path / "d.bin").read_bytes()
    magic, version, flags, n, d, held = struct.unpack_from("<8sIIQQQ", raw)
    assert (magic, version, flags, n, d, held) == (b"DPMBITS\0", 1, 0, 1, 3, 0)
    assert raw[-1] == 0b10100000


def test_corrupt_dataset_is_rejected(tmp_path, small_data):
    data, _ = small_data
    p = tmp_path / "d.bin"
    write_dataset(p, data)
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(DataIOError):
        read_dataset(p)
    p.write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(DataIOError):
        read_dataset(p)
    with pytest.raises(DataIOError):
        read_dataset(tmp_path / "missing.bin")


def test_csv_dataset(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,0,1\n0,0,1\n\n")
    data = read_dataset(p)
    assert data.bits.tolist() == [[1, 0, 1], [0, 0, 1]]
    p.write_text("1,0\n1\n")
    with pytest.raises(UsageError):
        read_csv_dataset(p)
    p.write_text("1,2\n")
    with pytest.raises(UsageError):
        read_csv_dataset(p)


def test_truth_round_trip(tmp_path, small_data):
    _, truth = small_data
    p = truth_path_for(tmp_path / "d.bin")
    assert p.name == "d.truth.json"
    write_truth(p, truth)
    back = read_truth(p)
    assert np.array_equal(back.true_z, truth.true_z)
    assert np.allclose(back.theta, truth.theta)
    assert back.heldout_ll_per_row == truth.heldout_ll_per_row
    p.write_text(json.dumps({"format": "other"}))
    with pytest.raises(DataIOError):
        read_truth(p)


def _state(n=30, d=4, seed=0):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(n, d)).astype(np.uint8)
    spec = ConcentrationSpec(1.7, (0.2, 0.3, 0.5))
    state = state_from_assignment(bits, two_stage_crp_sample(n, spec, rng), spec, np.linspace(0.5, 2, d))
    state.iteration = 9
    return state, bits


def test_snapshot_round_trip(tmp_path):
    state, bits = _state()
    write_snapshot(tmp_path / "s.npz", state, 3, "abc")
    header, back = read_snapshot(tmp_path / "s.npz", BinaryDataset(bits))
    assert header["seed"] == 3 and header["config_hash"] == "abc"
    check_state(back, BinaryDataset(bits))
    assert np.array_equal(back.z, state.z)
    assert back.s == state.s
    assert back.spec == state.spec
    assert np.array_equal(back.beta, state.beta)
    assert back.iteration == 9 and back.next_cluster_id == state.next_cluster_id


def test_snapshot_corruption_raises_integrity_error(tmp_path):
    state, bits = _state()
    p = tmp_path / "s.npz"
    write_snapshot(p, state, 0, "h")
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(IntegrityError):
        read_snapshot(p)
    write_snapshot(p, state, 0, "h")
    other = bits.copy()
    other[0] ^= 1
    with pytest.raises(IntegrityError):
        read_snapshot(p, BinaryDataset(other))
    with pytest.raises(IntegrityError):
        read_snapshot(p, BinaryDataset(bits[:-1]))


def test_trace_versions(tmp_path):
    p = tmp_path / "trace.jsonl"
    p.write_text(dump_line({"record": "header", "schema": TRACE_SCHEMA, "version": "1.3"}) + dump_line({"iteration": 0}))
    header, recs = read_trace(p)
    assert recs == [{"iteration": 0}]
    p.write_text(dump_line({"record": "header", "schema": TRACE_SCHEMA, "version": "2.0"}))
    with pytest.raises(UsageError):
        read_trace(p)
    p.write_text("{not json\n")
    with pytest.raises(IntegrityError):
        read_trace(p)


def test_dump_line_is_canonical():
    assert dump_line({"b": 1, "a": 0.5}) == '{"a":0.5,"b":1}\n'
    with pytest.raises(ValueError):
        dump_line({"x": float("nan")})
