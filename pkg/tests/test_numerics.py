from __future__ import annotations

import json
import math
import struct

import numpy as np
import pytest

from fleet_guardian.models import LengthMismatch, NonFinite, NumericsError, SchemaMismatch
from fleet_guardian.numerics import (
    MODULE_TABLE,
    TRACE_MAGIC,
    ModuleTrace,
    TraceSet,
    compare_traces,
    cosine,
    flatten_tensors,
    read_trace_file,
    synthetic_pair,
    write_trace_file,
)


def test_cosine_edge_cases():
    assert cosine([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([1, 0], [-1, 0]) == pytest.approx(-1.0)
    assert cosine([0, 0], [0, 0]) == 1.0
    assert cosine([0, 0], [1, 0]) == 0.0
    with pytest.raises(LengthMismatch):
        cosine([1, 2], [1, 2, 3])
    with pytest.raises(NonFinite):
        cosine([1, float("nan")], [1, 1])


def test_flatten_is_row_major_in_declared_order():
    vector, layout = flatten_tensors([("w", np.array([[1, 2], [3, 4]])), ("b", np.array([5]))])
    assert vector.tolist() == [1, 2, 3, 4, 5]
    assert layout == [{"name": "w", "shape": [2, 2], "offset": 0}, {"name": "b", "shape": [1], "offset": 4}]


def test_synthetic_pair_hits_target():
    rng = np.random.default_rng(3)
    a, b = synthetic_pair(0.42, 32, rng)
    assert cosine(a, b) == pytest.approx(0.42, abs=1e-9)
    with pytest.raises(NumericsError):
        synthetic_pair(1.5, 32, rng)


def test_module_table_reproduced_and_flagged(table7):
    reference, candidate = table7
    report = compare_traces(reference, candidate, steps=10, threshold=0.99)
    for module, row in MODULE_TABLE.items():
        for kind, floor in row.items():
            entry = report.get(module, kind)
            if floor is None:
                assert entry is None
            else:
                assert entry.min_similarity == pytest.approx(floor, abs=1e-6)

    flagged = {(e.module, e.kind) for e in report.flagged}
    assert flagged == {
        ("Attention", "parameters"),
        ("Attention", "gradients"),
        ("Bias-Dropout-Add", "outputs"),
        ("Bias-Dropout-Add", "gradients"),
        ("Embedding", "outputs"),
        ("Embedding", "gradients"),
        ("MoE (EP=8)", "gradients"),
    }
    assert not report.passed
    assert all(e.abnormal for e in report.entries[: len(flagged)])
    assert not any(e.abnormal for e in report.entries[len(flagged) :])


def test_per_module_threshold_override(table7):
    reference, candidate = table7
    report = compare_traces(reference, candidate, overrides={"MoE (EP=8)": 0.9})
    assert not report.get("MoE (EP=8)", "gradients").abnormal
    assert report.get("Embedding", "gradients").abnormal


def test_fewer_steps_ignores_the_late_minimum(table7):
    reference, candidate = table7
    report = compare_traces(reference, candidate, steps=3)
    entry = report.get("Attention", "parameters")
    assert len(entry.per_step) == 3
    # the first step sits halfway between the table floor and 1
    assert entry.min_similarity == pytest.approx(0.1626 + (1 - 0.1626) * 0.5, abs=1e-6)


def test_mismatched_trace_sets():
    ref = TraceSet([ModuleTrace("m", "outputs", [[1.0, 2.0]])])
    other = TraceSet([ModuleTrace("m", "gradients", [[1.0, 2.0]])])
    with pytest.raises(SchemaMismatch):
        compare_traces(ref, other)
    longer = TraceSet([ModuleTrace("m", "outputs", [[1.0, 2.0, 3.0]])])
    with pytest.raises(SchemaMismatch):
        compare_traces(ref, longer)
    with pytest.raises(LengthMismatch):
        ModuleTrace("m", "outputs", [[1.0], [1.0, 2.0]])
    with pytest.raises(NonFinite):
        ModuleTrace("m", "outputs", [[float("inf")]])
    with pytest.raises(SchemaMismatch):
        ModuleTrace("m", "activations", [[1.0]])
    with pytest.raises(SchemaMismatch):
        TraceSet([ModuleTrace("m", "outputs", [[1.0]]), ModuleTrace("m", "outputs", [[2.0]])])


def test_trace_file_round_trip(tmp_path, table7):
    reference, candidate = table7
    write_trace_file(str(tmp_path / "ref.fgt"), reference, backend="cuda")
    write_trace_file(str(tmp_path / "cand.fgt"), candidate, backend="rocm")
    ref = read_trace_file(str(tmp_path / "ref.fgt"))
    cand = read_trace_file(str(tmp_path / "cand.fgt"))
    assert ref.modules == reference.modules
    assert ref.keys() == reference.keys()
    report = compare_traces(ref, cand)
    assert report.get("Attention", "parameters").min_similarity == pytest.approx(0.1626, abs=1e-4)

    report.write_csv(str(tmp_path / "out" / "report.csv"))
    lines = (tmp_path / "out" / "report.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "module,kind,min_cosine,threshold,abnormal"
    assert len(lines) == 1 + len(report.entries)
    assert report.to_record()["passed"] is False


def _raw_file(tmp_path, header, payload=b""):
    body = json.dumps(header).encode("utf-8")
    path = tmp_path / "bad.fgt"
    path.write_bytes(TRACE_MAGIC + struct.pack("<I", len(body)) + body + payload)
    return str(path)


def test_corrupt_trace_files(tmp_path):
    junk = tmp_path / "junk.fgt"
    junk.write_bytes(b"NOTATRACE")
    with pytest.raises(SchemaMismatch):
        read_trace_file(str(junk))

    entry = {"module": "m", "kind": "outputs", "step": 1, "length": 4, "offset": 0}
    with pytest.raises(SchemaMismatch):
        read_trace_file(_raw_file(tmp_path, {"modules": ["m"], "entries": [entry]}, b"\x00" * 8))
    with pytest.raises(SchemaMismatch):
        read_trace_file(_raw_file(tmp_path, {"modules": ["m"], "entries": [dict(entry, kind="weights")]}, b"\x00" * 16))
    with pytest.raises(SchemaMismatch):
        read_trace_file(_raw_file(tmp_path, {"modules": ["m"], "entries": [{"module": "m"}]}))


def _straight_line_cosine(a, b):
    dot = norm_a = norm_b = 0.0
    for x, y in zip(a, b):
        dot += x * y
        norm_a += x * x
        norm_b += y * y
    return dot / (math.sqrt(norm_a) * math.sqrt(norm_b))


@pytest.mark.parametrize("seed", range(10))
def test_cosine_agrees_with_a_plain_loop(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        target = float(rng.uniform(0.5, 0.9999))
        a, b = synthetic_pair(target, int(rng.integers(2, 512)), rng)
        expected = _straight_line_cosine(a.tolist(), b.tolist())
        assert cosine(a, b) == pytest.approx(expected, rel=1e-12)
        assert cosine(a, b) == pytest.approx(target, abs=1e-9)
