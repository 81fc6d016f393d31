"""On-disk formats: datasets, ground-truth sidecars, snapshots and traces.

Dataset file (little-endian)::

    offset  size  field
    0       8     magic  b"DPMBITS\\0"
    8       4     format version (uint32, currently 1)
    12      4     flags (uint32; bit 0 = true labels present)
    16      8     N, number of rows (uint64)
    24      8     D, number of dimensions (uint64)
    32      8     number of trailing held-out rows (uint64)
    40      8*N   row ids (int64)
    ...     N*ceil(D/8)  rows, bit-packed MSB first (numpy.packbits, axis=1)
    ...     8*N   true labels (int64), only when flag bit 0 is set

Snapshots are ``.npz`` archives with a JSON ``header`` entry; traces are
JSON lines whose first line is a header record.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .datagen import GroundTruth
from .diagnostics import TRACE_SCHEMA, TRACE_VERSION, ChainRecord
from .errors import DataIOError, IntegrityError, UsageError
from .model import BinaryDataset, ClusterStats
from .prior import ConcentrationSpec, PartitionAssignment
from .state import MixtureState

MAGIC = b"DPMBITS\0"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sIIQQQ")
FLAG_LABELS = 1

SNAPSHOT_VERSION = 1


def write_dataset(path, data: BinaryDataset):
    path = Path(path)
    flags = FLAG_LABELS if data.labels is not None else 0
    try:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, DATASET_VERSION, flags, data.n_rows, data.n_dims, data.n_heldout))
            f.write(data.row_ids.astype("<i8").tobytes())
            f.write(np.packbits(data.bits, axis=1).tobytes())
            if data.labels is not None:
                f.write(data.labels.astype("<i8").tobytes())
    except OSError as e:
        raise DataIOError(f"cannot write dataset {path}: {e}") from e


def read_dataset(path) -> BinaryDataset:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv_dataset(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read dataset {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise DataIOError(f"{path}: truncated header")
    magic, version, flags, n, d, n_heldout = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataIOError(f"{path}: not a dataset file")
    if version != DATASET_VERSION:
        raise DataIOError(f"{path}: unsupported dataset version {version}")
    row_bytes = (d + 7) // 8
    expected = _HEADER.size + 8 * n + n * row_bytes + (8 * n if flags & FLAG_LABELS else 0)
    if len(raw) != expected:
        raise DataIOError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = _HEADER.size
    row_ids = np.frombuffer(raw, "<i8", n, off).astype(np.int64)
    off += 8 * n
    packed = np.frombuffer(raw, np.uint8, n * row_bytes, off).reshape(n, row_bytes)
    bits = np.unpackbits(packed, axis=1, count=d) if n else np.zeros((0, d), np.uint8)
    off += n * row_bytes
    labels = np.frombuffer(raw, "<i8", n, off).astype(np.int64) if flags & FLAG_LABELS else None
    try:
        return BinaryDataset(bits, row_ids, int(n_heldout), labels)
    except UsageError as e:
        raise DataIOError(f"{path}: {e}") from e


def read_csv_dataset(path, n_heldout: int = 0) -> BinaryDataset:
    """One row per line, comma-separated 0/1 values, no header."""
    rows = []
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                fields = [t.strip() for t in line.split(",")]
                if any(t not in ("0", "1") for t in fields):
                    raise UsageError(f"{path}:{lineno}: entries must be 0 or 1")
                rows.append([int(t) for t in fields])
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}") from e
    if not rows:
        raise UsageError(f"{path}: no rows")
    if len({len(r) for r in rows}) != 1:
        raise UsageError(f"{path}: rows have differing lengths")
    return BinaryDataset(np.array(rows, dtype=np.uint8), n_heldout=n_heldout)


def truth_path_for(dataset_path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.stem + ".truth.json")


def write_truth(path, truth: GroundTruth):
    doc = {
        "format": "dpmshard.truth",
        "version": 1,
        "spec": truth.spec,
        "beta_gen": list(truth.beta_gen),
        "heldout_ll_per_row": truth.heldout_ll_per_row,
        "true_z": truth.true_z.tolist(),
        "theta": truth.theta.tolist(),
    }
    try:
        Path(path).write_text(json.dumps(doc))
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}") from e


def read_truth(path) -> GroundTruth:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise DataIOError(f"cannot read ground truth {path}: {e}") from e
    if doc.get("format") != "dpmshard.truth":
        raise DataIOError(f"{path}: not a ground-truth sidecar")
    return GroundTruth(np.asarray(doc["true_z"], dtype=np.int64), np.asarray(doc["theta"], dtype=float),
                       float(doc["heldout_ll_per_row"]), tuple(doc["beta_gen"]), doc["spec"])


def snapshot_name(iteration: int) -> str:
    return f"snap_{iteration:08d}.npz"


def write_snapshot(path, state: MixtureState, seed: int, config_hash: str):
    ids, sizes, counts = state.stacked()
    header = {
        "format": "dpmshard.snapshot",
        "version": SNAPSHOT_VERSION,
        "seed": seed,
        "iteration": state.iteration,
        "config_hash": config_hash,
        "n_rows": state.n_rows,
        "n_dims": len(state.beta),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            np.savez(f, header=np.array(json.dumps(header)), z=state.z, cluster_ids=ids,
                     s=np.array([state.s[j] for j in ids], dtype=np.int64), sizes=sizes, one_counts=counts,
                     alpha=np.array(state.alpha), mu=np.asarray(state.spec.mu), beta=state.beta,
                     next_cluster_id=np.array(state.next_cluster_id))
        tmp.replace(path)
    except OSError as e:
        raise DataIOError(f"cannot write snapshot {path}: {e}") from e


def read_snapshot(path, data: BinaryDataset | None = None) -> tuple:
    """Load ``(header, state)``. Member sets are rebuilt from ``z``.

    Raises :class:`IntegrityError` when the archive is unreadable or its
    arrays disagree with each other (or with ``data`` when given).
    """
    try:
        with np.load(path, allow_pickle=False) as f:
            arrays = {k: f[k] for k in f.files}
        header = json.loads(str(arrays["header"]))
        z = arrays["z"].astype(np.int64)
        ids = arrays["cluster_ids"].astype(np.int64)
        sc = arrays["s"].astype(np.int64)
        sizes = arrays["sizes"].astype(np.int64)
        counts = arrays["one_counts"].astype(np.int64)
        spec = ConcentrationSpec(float(arrays["alpha"]), tuple(arrays["mu"].tolist()))
        beta = arrays["beta"].astype(float)
        next_id = int(arrays["next_cluster_id"])
    except FileNotFoundError as e:
        raise DataIOError(f"snapshot {path} not found") from e
    except Exception as e:
        raise IntegrityError(f"corrupt snapshot {path}: {e}") from e
    if header.get("format") != "dpmshard.snapshot" or header.get("version") != SNAPSHOT_VERSION:
        raise IntegrityError(f"{path}: unrecognized snapshot header")
    if len(z) != header["n_rows"] or len(beta) != header["n_dims"]:
        raise IntegrityError(f"{path}: header and arrays disagree")
    if len(ids) != len(sizes) or len(ids) != len(sc) or counts.shape != (len(ids), len(beta)):
        raise IntegrityError(f"{path}: cluster arrays disagree in shape")
    if len(z) and not np.array_equal(np.bincount(np.searchsorted(ids, z), minlength=len(ids)), sizes):
        raise IntegrityError(f"{path}: sizes disagree with z")
    if data is not None:
        if data.n_rows != len(z) or data.n_dims != len(beta):
            raise IntegrityError(f"{path}: snapshot does not match the dataset")
    order = np.argsort(z, kind="stable")
    bounds = np.r_[0, np.cumsum(sizes)]
    clusters = {}
    for i, j in enumerate(ids.tolist()):
        members = order[bounds[i]:bounds[i + 1]]
        if data is not None and not np.array_equal(data.bits[members].sum(axis=0, dtype=np.int64), counts[i]):
            raise IntegrityError(f"{path}: counts of cluster {j} disagree with the dataset")
        clusters[j] = ClusterStats(int(sizes[i]), counts[i].copy(), set(members.tolist()))
    pa = PartitionAssignment(z, dict(zip(ids.tolist(), sc.tolist())))
    state = MixtureState(pa, clusters, spec, beta, next_id, int(header["iteration"]))
    return header, state


def list_snapshots(run_dir) -> list:
    return sorted((Path(run_dir) / "snapshots").glob("snap_*.npz"))


def trace_header(seed: int, config_hash: str, mode: str) -> dict:
    return {"record": "header", "schema": TRACE_SCHEMA, "version": TRACE_VERSION,
            "seed": seed, "config_hash": config_hash, "mode": mode}


def dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def read_trace(path) -> tuple:
    """Return ``(header, [trace dicts])``; rejects unknown major versions."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataIOError(f"cannot read trace {path}: {e}") from e
    if not lines:
        raise IntegrityError(f"{path}: empty trace")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:] if line.strip()]
    except ValueError as e:
        raise IntegrityError(f"{path}: malformed trace: {e}") from e
    if header.get("schema") != TRACE_SCHEMA:
        raise UsageError(f"{path}: not a trace file")
    major = str(header.get("version", "")).split(".")[0]
    if major != TRACE_VERSION.split(".")[0]:
        raise UsageError(f"{path}: unsupported trace version {header.get('version')}")
    return header, records


def read_timings(path) -> dict:
    out = {}
    p = Path(path)
    if not p.exists():
        return out
    for line in p.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["iteration"]] = rec
    return out


def records_from_run(run_dir) -> list:
    run_dir = Path(run_dir)
    _, traces = read_trace(run_dir / "trace.jsonl")
    timings = read_timings(run_dir / "timings.jsonl")
    return [ChainRecord.from_dicts(t, timings.get(t["iteration"])) for t in traces]


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()
