"""
File-based artifact storage.

Layout of an output directory:

    data/train/data.bin, data.meta.json, oracle.bin, oracle.meta.json
    data/test/...
    <run>/checkpoints/iter_<k>/manifest.json, weights.f64le, mask.u8
    <run>/metrics.csv, eval.csv, summary.json, journal.log

Binary matrix containers start with the magic bytes ``UIDS1\\0`` followed
by blocks of (uint32 rows, uint32 cols, rows*cols float64), all little-endian.
"""
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple
import csv
import hashlib
import json
import logging
import os
import shutil
import struct

import numpy as np

from ..datagen import Dataset
from ..errors import ArtifactError, ProvenanceError
from ..fnn import FnnParams, Mask
from ..numerics import rng_from_json, rng_state_to_json
from ..sampler import ChainMetrics, ChainState


logger = logging.getLogger(__name__)

MAGIC = b"UIDS1\x00"
_DIMS = struct.Struct("<II")

METRICS_HEADER = ("iter", "loglik", "log_prior", "active_frac", "test_err", "step_h")
EVAL_HEADER = ("sample_idx", "depth", "e", "norm_n")
SWEEP_HEADER = ("depth", "sample_idx", "e")


# ============= Matrix containers =============

def write_matrices(path: Path, blocks: Sequence[np.ndarray]) -> None:
    """Write 2-D float64 blocks to a container file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        for block in blocks:
            block = np.asarray(block, dtype=np.float64)
            if block.ndim != 2:
                raise ArtifactError(f"container blocks must be 2-D, got shape {block.shape}")
            f.write(_DIMS.pack(*block.shape))
            f.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_matrices(path: Path, count: int) -> List[np.ndarray]:
    """Read exactly ``count`` blocks from a container file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ArtifactError(f"cannot read {path}: {e}", {"path": str(path)}) from e
    if raw[: len(MAGIC)] != MAGIC:
        raise ArtifactError(f"{path} is not a matrix container (bad magic)", {"path": str(path)})
    offset = len(MAGIC)
    blocks = []
    for i in range(count):
        if offset + _DIMS.size > len(raw):
            raise ArtifactError(f"{path}: truncated header of block {i}", {"path": str(path)})
        rows, cols = _DIMS.unpack_from(raw, offset)
        offset += _DIMS.size
        size = rows * cols * 8
        if offset + size > len(raw):
            raise ArtifactError(f"{path}: truncated data of block {i}", {"path": str(path)})
        if size:
            block = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
            blocks.append(block.astype(np.float64))
        else:
            blocks.append(np.zeros((rows, cols)))
        offset += size
    if offset != len(raw):
        raise ArtifactError(f"{path}: {len(raw) - offset} trailing bytes", {"path": str(path)})
    return blocks


def _write_json(path: Path, obj: Dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactError(f"cannot read {path}: {e}", {"path": str(path)}) from e


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ============= Datasets and oracle cache =============

def save_dataset(directory: Path, ds: Dataset, data_hash: str) -> Path:
    """Write ``data.bin`` and ``data.meta.json``; returns the container path."""
    directory = Path(directory)
    bin_path = directory / "data.bin"
    write_matrices(bin_path, [ds.X, ds.Y])
    _write_json(
        directory / "data.meta.json",
        {
            "config_hash": data_hash,
            "content_hash": ds.content_hash(),
            "n": ds.n,
            "d_x": int(ds.X.shape[1]),
            "d_y": int(ds.Y.shape[1]),
            "generation": ds.meta,
        },
    )
    return bin_path


def load_dataset(directory: Path, expected_hash: Optional[str] = None) -> Dataset:
    """
    Read a dataset and check its integrity.

    Raises:
        ArtifactError: Missing or corrupt files
        ProvenanceError: Dataset generated from a different config
    """
    directory = Path(directory)
    meta = _read_json(directory / "data.meta.json")
    X, Y = read_matrices(directory / "data.bin", 2)
    ds = Dataset(X, Y, meta.get("generation", {}))
    if ds.content_hash() != meta.get("content_hash"):
        raise ArtifactError(f"{directory}: content hash does not match data.meta.json", {"path": str(directory)})
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise ProvenanceError(
            f"dataset in {directory} was generated from another config",
            {"expected": expected_hash, "found": meta.get("config_hash")},
        )
    return ds


def save_oracle(directory: Path, G: np.ndarray, dataset_hash: str, info: Dict[str, Any]) -> Path:
    """Cache oracle values g(y) for a dataset."""
    directory = Path(directory)
    path = directory / "oracle.bin"
    write_matrices(path, [G])
    _write_json(directory / "oracle.meta.json", {"dataset_hash": dataset_hash, "file_hash": file_sha256(path), **info})
    return path


def load_oracle(directory: Path, dataset_hash: str) -> Optional[np.ndarray]:
    """Cached oracle values, or None when absent."""
    directory = Path(directory)
    meta_path = directory / "oracle.meta.json"
    if not meta_path.exists():
        return None
    meta = _read_json(meta_path)
    if meta.get("dataset_hash") != dataset_hash:
        raise ProvenanceError(
            f"oracle cache in {directory} belongs to another dataset",
            {"expected": dataset_hash, "found": meta.get("dataset_hash")},
        )
    path = directory / "oracle.bin"
    if file_sha256(path) != meta.get("file_hash"):
        raise ArtifactError(f"{path} does not match its recorded hash", {"path": str(path)})
    return read_matrices(path, 1)[0]


# ============= Checkpoints =============

def checkpoint_dir(run_dir: Path, iteration: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"iter_{iteration:09d}"


def save_checkpoint(
    directory: Path,
    state: ChainState,
    run_hash: str,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a complete chain state.

    The directory is assembled under a temporary name and renamed into place
    so a partially written checkpoint is never visible.
    """
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    (tmp / "weights.f64le").write_bytes(np.ascontiguousarray(state.w.flat, dtype="<f8").tobytes())
    (tmp / "mask.u8").write_bytes(np.ascontiguousarray(state.mask.flat, dtype=np.uint8).tobytes())
    manifest = {
        "config_hash": run_hash,
        "iteration": state.iter,
        "layer_shapes": [list(s) for s in state.w.shapes],
        "rng_state": rng_state_to_json(state.rng),
        "step_h": state.step_h,
        "batch_size": state.batch_size,
        "flip_fraction": state.flip_fraction,
        "loglik": state.loglik,
        "log_prior": state.log_prior,
        "weights_sha256": hashlib.sha256((tmp / "weights.f64le").read_bytes()).hexdigest(),
    }
    manifest.update(extra or {})
    _write_json(tmp / "manifest.json", manifest)
    if directory.exists():
        shutil.rmtree(directory)
    os.replace(tmp, directory)
    return directory


def read_manifest(directory: Path) -> Dict[str, Any]:
    return _read_json(Path(directory) / "manifest.json")


def load_checkpoint(directory: Path, expected_hash: Optional[str] = None) -> ChainState:
    """
    Restore a chain state written by ``save_checkpoint``.

    Raises:
        ArtifactError: Missing, truncated or corrupt files
        ProvenanceError: Checkpoint written under another config
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    if expected_hash is not None and manifest.get("config_hash") != expected_hash:
        raise ProvenanceError(
            f"checkpoint {directory} was written under another config",
            {"expected": expected_hash, "found": manifest.get("config_hash")},
        )
    shapes = [tuple(int(v) for v in s) for s in manifest["layer_shapes"]]
    count = sum(int(np.prod(s)) for s in shapes)
    try:
        w_raw = (directory / "weights.f64le").read_bytes()
        m_raw = (directory / "mask.u8").read_bytes()
    except OSError as e:
        raise ArtifactError(f"cannot read checkpoint {directory}: {e}") from e
    if len(w_raw) != 8 * count or len(m_raw) != count:
        raise ArtifactError(f"checkpoint {directory} does not match its layer shapes", {"path": str(directory)})
    if hashlib.sha256(w_raw).hexdigest() != manifest.get("weights_sha256"):
        raise ArtifactError(f"checkpoint {directory}: weights hash mismatch", {"path": str(directory)})
    mask_flat = np.frombuffer(m_raw, dtype=np.uint8)
    if np.any(mask_flat > 1):
        raise ArtifactError(f"checkpoint {directory}: mask entries must be 0 or 1", {"path": str(directory)})
    return ChainState(
        w=FnnParams(np.frombuffer(w_raw, dtype="<f8").astype(np.float64), shapes),
        mask=Mask(mask_flat.copy(), shapes),
        iter=int(manifest["iteration"]),
        step_h=float(manifest["step_h"]),
        batch_size=int(manifest["batch_size"]),
        flip_fraction=float(manifest["flip_fraction"]),
        rng=rng_from_json(manifest["rng_state"]),
        loglik=float(manifest["loglik"]),
        log_prior=float(manifest["log_prior"]),
    )


def latest_checkpoint(run_dir: Path) -> Optional[Path]:
    root = Path(run_dir) / "checkpoints"
    if not root.is_dir():
        return None
    done = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("iter_") and not p.name.endswith(".partial"))
    return done[-1] if done else None


def list_checkpoints(run_dir: Path) -> List[Path]:
    root = Path(run_dir) / "checkpoints"
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if p.is_dir() and not p.name.endswith(".partial"))


# ============= Retained samples =============

class SampleStore:
    """
    Retained (Lambda, W) pairs as two append-only raw files.

    ``samples/weights.f64le`` holds q float64 values per sample and
    ``samples/mask.u8`` q bytes per sample, in retention order.
    """

    def __init__(self, run_dir: Path, shapes: Sequence[Tuple[int, ...]]):
        self.root = Path(run_dir) / "samples"
        self.shapes = tuple(tuple(int(v) for v in s) for s in shapes)
        self.q = sum(int(np.prod(s)) for s in self.shapes)

    @property
    def _weights(self) -> Path:
        return self.root / "weights.f64le"

    @property
    def _mask(self) -> Path:
        return self.root / "mask.u8"

    def count(self) -> int:
        if not self._weights.exists() or self.q == 0:
            return 0
        n_w = self._weights.stat().st_size // (8 * self.q)
        n_m = self._mask.stat().st_size // self.q if self._mask.exists() else 0
        return int(min(n_w, n_m))

    def reset(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self._weights.write_bytes(b"")
        self._mask.write_bytes(b"")

    def append(self, samples: Sequence[Tuple[Mask, FnnParams]]) -> None:
        if not samples:
            return
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self._weights, "ab") as fw, open(self._mask, "ab") as fm:
            for mask, w in samples:
                fw.write(np.ascontiguousarray(w.flat, dtype="<f8").tobytes())
                fm.write(np.ascontiguousarray(mask.flat, dtype=np.uint8).tobytes())

    def truncate(self, count: int) -> None:
        """Keep the first ``count`` samples."""
        if not self.root.exists():
            self.reset()
            return
        for path, width in ((self._weights, 8 * self.q), (self._mask, self.q)):
            with open(path, "r+b") as f:
                f.truncate(count * width)

    def read(self, start: int = 0, stop: Optional[int] = None) -> List[Tuple[Mask, FnnParams]]:
        """Samples ``start:stop`` in retention order."""
        total = self.count()
        stop = total if stop is None else min(stop, total)
        if start >= stop:
            return []
        n = stop - start
        with open(self._weights, "rb") as f:
            f.seek(start * 8 * self.q)
            w = np.frombuffer(f.read(n * 8 * self.q), dtype="<f8").astype(np.float64).reshape(n, self.q)
        with open(self._mask, "rb") as f:
            f.seek(start * self.q)
            m = np.frombuffer(f.read(n * self.q), dtype=np.uint8).reshape(n, self.q)
        return [(Mask(m[i], self.shapes), FnnParams(w[i], self.shapes)) for i in range(n)]

    def read_last(self, k: int) -> Tuple[int, List[Tuple[Mask, FnnParams]]]:
        """Index of the first returned sample and the last ``k`` samples."""
        total = self.count()
        start = max(total - k, 0)
        return start, self.read(start, total)


# ============= CSV tables =============

def fmt_float(x: float) -> str:
    """Shortest repr that round-trips exactly."""
    return repr(float(x))


class CsvTable:
    """Append-only CSV file with a fixed header."""

    def __init__(self, path: Path, header: Sequence[str]):
        self.path = Path(path)
        self.header = tuple(header)

    def reset(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(self.header)

    def append(self, rows: Iterable[Sequence[Any]]) -> None:
        if not self.path.exists():
            self.reset()
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            for row in rows:
                writer.writerow([fmt_float(v) if isinstance(v, float) else v for v in row])

    def read(self) -> List[Dict[str, str]]:
        try:
            with open(self.path, newline="", encoding="utf-8") as f:
                reader = csv.DictReader(f)
                if tuple(reader.fieldnames or ()) != self.header:
                    raise ArtifactError(f"{self.path}: unexpected header {reader.fieldnames}")
                return list(reader)
        except OSError as e:
            raise ArtifactError(f"cannot read {self.path}: {e}", {"path": str(self.path)}) from e

    def truncate_after(self, column: str, last: int) -> int:
        """Drop rows whose integer ``column`` exceeds ``last``; returns rows kept."""
        if not self.path.exists():
            self.reset()
            return 0
        kept = [r for r in self.read() if int(r[column]) <= last]
        self.reset()
        self.append([[r[h] for h in self.header] for r in kept])
        return len(kept)


def metrics_table(run_dir: Path) -> CsvTable:
    return CsvTable(Path(run_dir) / "metrics.csv", METRICS_HEADER)


def metrics_row(m: ChainMetrics) -> Tuple[Any, ...]:
    return (m.iter, float(m.loglik), float(m.log_prior), float(m.active_frac), float(m.test_err), float(m.step_h))


def eval_table(run_dir: Path) -> CsvTable:
    return CsvTable(Path(run_dir) / "eval.csv", EVAL_HEADER)


def sweep_table(out_dir: Path) -> CsvTable:
    return CsvTable(Path(out_dir) / "sweep.csv", SWEEP_HEADER)


def write_summary(path: Path, summary: Dict[str, Any]) -> None:
    _write_json(path, summary)


def read_summary(path: Path) -> Dict[str, Any]:
    return _read_json(path)
