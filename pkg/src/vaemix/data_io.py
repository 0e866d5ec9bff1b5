"""Dataset ingestion, batching, and on-disk formats.

Three file formats live here:

* IDX (big-endian magic + dims + uint8 payload) for image/label pairs.
* A versioned checkpoint container: one header line, one JSON manifest line,
  then each tensor's raw little-endian float64 payload (CRC32 per tensor).
* Append-only metrics CSV with a fixed 9-column schema.
"""

import json
import os
import struct
import sys
import zlib
from array import array
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from .errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
)
from .rng import CounterRng
from .tensor import Tensor

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CHECKPOINT_FORMAT = "vaemix-checkpoint"
CHECKPOINT_VERSION = 1

METRICS_FIELDS = (
    "run_id", "phase", "sweep_or_epoch", "component_count",
    "elbo", "recon_error", "kl", "error_rate", "wall_ms",
)


@dataclass
class Dataset:
    instances: Tensor
    labels: Optional[array] = None  # array('q'), one class index per row
    n_classes: Optional[int] = None
    provenance: str = ""

    def __post_init__(self):
        if self.labels is not None:
            if not isinstance(self.labels, array) or self.labels.typecode != "q":
                self.labels = array("q", self.labels)
            if len(self.labels) != self.instances.shape[0]:
                raise DataError(
                    f"{len(self.labels)} labels for "
                    f"{self.instances.shape[0]} instances"
                )
            if self.n_classes is None:
                self.n_classes = (max(self.labels) + 1) if self.labels else 0
            for y in self.labels:
                if y < 0 or y >= self.n_classes:
                    raise DataError(f"label {y} outside [0, {self.n_classes})")

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------

def _read_exact(f, count: int, path: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise IdxTruncatedError(
            f"{path}: expected {count} more bytes, got {len(buf)}"
        )
    return buf


def _load_idx_images(path: str) -> Tensor:
    with open(path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, path))[0]
        if magic != IDX_IMAGE_MAGIC:
            raise IdxMagicError(
                f"{path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        n, rows, cols = struct.unpack(">III", _read_exact(f, 12, path))
        raw = _read_exact(f, n * rows * cols, path)
        if f.read(1):
            raise IdxTruncatedError(f"{path}: trailing bytes after payload")
    d = rows * cols
    t = Tensor((n, d))
    data = t.data
    for i, b in enumerate(raw):
        data[i] = b / 255.0
    return t


def _load_idx_labels(path: str) -> array:
    with open(path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, path))[0]
        if magic != IDX_LABEL_MAGIC:
            raise IdxMagicError(
                f"{path}: magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        n = struct.unpack(">I", _read_exact(f, 4, path))[0]
        raw = _read_exact(f, n, path)
        if f.read(1):
            raise IdxTruncatedError(f"{path}: trailing bytes after payload")
    # one unsigned byte per label; widen to the int64 array the rest expects
    return array("q", list(raw))


def load_idx(images_path: str, labels_path: Optional[str] = None) -> Dataset:
    """Parse IDX image (and optional label) files; pixels scaled to [0, 1]."""
    instances = _load_idx_images(images_path)
    labels = None
    if labels_path is not None:
        labels = _load_idx_labels(labels_path)
        if len(labels) != instances.shape[0]:
            raise IdxCountMismatchError(
                f"{instances.shape[0]} images but {len(labels)} labels"
            )
    return Dataset(
        instances, labels,
        provenance=f"idx:{os.path.basename(images_path)}",
    )


def write_idx_images(path: str, rows: Sequence[Sequence[int]],
                     height: int, width: int) -> None:
    """Inverse of the image loader, for fixtures; values are raw uint8."""
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, len(rows), height, width))
        for r in rows:
            f.write(bytes(r))


def write_idx_labels(path: str, labels: Sequence[int]) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        f.write(bytes(labels))


# ---------------------------------------------------------------------------
# transforms and synthetic data
# ---------------------------------------------------------------------------

def binarize(dataset: Dataset, threshold: float = 0.5) -> Dataset:
    if not (0.0 < threshold <= 1.0):
        raise ConfigError(f"binarize threshold must be in (0, 1], got {threshold}")
    src = dataset.instances
    if src.size and (min(src.data) < 0.0 or max(src.data) > 1.0):
        raise DataError("binarize needs values in [0, 1]")
    out = Tensor(src.shape)
    for i, v in enumerate(src.data):
        out.data[i] = 1.0 if v >= threshold else 0.0
    return Dataset(
        out, dataset.labels, dataset.n_classes,
        provenance=dataset.provenance + "|binarized",
    )


def random_prototypes(k: int, dim: int, rng: CounterRng) -> List[List[int]]:
    """k random binary patterns; any pair differs in about dim/2 positions."""
    return [[1 if rng.uniform() < 0.5 else 0 for _ in range(dim)]
            for _ in range(k)]


def synth_patterns(prototypes: Sequence[Sequence[int]],
                   counts: Sequence[int],
                   flip_rate: float,
                   rng: CounterRng) -> Dataset:
    """Noisy copies of binary prototypes; label = prototype index."""
    if flip_rate >= 0.5:
        raise ConfigError(
            f"flip rate {flip_rate} >= 0.5 makes classes unidentifiable"
        )
    if flip_rate < 0.0:
        raise ConfigError("flip rate must be >= 0")
    if len(prototypes) != len(counts):
        raise ConfigError(
            f"{len(prototypes)} prototypes but {len(counts)} counts"
        )
    dim = len(prototypes[0])
    for p in prototypes:
        if len(p) != dim:
            raise DataError("prototypes must share one dimension")
        if any(v not in (0, 1) for v in p):
            raise DataError("prototypes must be binary")
    n = sum(counts)
    t = Tensor((n, dim))
    labels = array("q")
    row = 0
    for cls, (proto, count) in enumerate(zip(prototypes, counts)):
        for _ in range(count):
            off = row * dim
            for j, v in enumerate(proto):
                flip = rng.uniform() < flip_rate
                t.data[off + j] = float(v ^ 1) if flip else float(v)
            labels.append(cls)
            row += 1
    return Dataset(
        t, labels, len(prototypes),
        provenance=f"synth:k={len(prototypes)},d={dim},p={flip_rate}",
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def gather_rows(t: Tensor, indices: Sequence[int]) -> Tensor:
    n, d = t.shape
    out = Tensor((len(indices), d))
    for r, i in enumerate(indices):
        out.data[r * d : (r + 1) * d] = t.data[i * d : (i + 1) * d]
    return out


def batch_indices(n: int, batch_size: int, seed: int,
                  stream: int) -> Iterator[List[int]]:
    """Fresh permutation keyed by (seed, stream); last short batch included."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = CounterRng(seed, stream).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def batch_iter(instances: Tensor, batch_size: int, seed: int,
               stream: int) -> Iterator[Tensor]:
    for idx in batch_indices(instances.shape[0], batch_size, seed, stream):
        yield gather_rows(instances, idx)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def _payload_bytes(t: Tensor) -> bytes:
    buf = t.data
    if sys.byteorder == "big":
        buf = array("d", buf)
        buf.byteswap()
    return buf.tobytes()


def save_checkpoint(path: str, meta: dict,
                    tensors: Sequence[Tuple[str, Tensor]]) -> None:
    """Header line, JSON manifest line, then raw float64 payloads."""
    manifest = {
        "meta": meta,
        "tensors": [
            {
                "name": name,
                "shape": list(t.shape),
                "crc32": zlib.crc32(_payload_bytes(t)),
            }
            for name, t in tensors
        ],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(f"{CHECKPOINT_FORMAT} {CHECKPOINT_VERSION}\n".encode())
        f.write(blob.encode())
        f.write(b"\n")
        for _, t in tensors:
            f.write(_payload_bytes(t))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Tuple[dict, Dict[str, Tensor]]:
    with open(path, "rb") as f:
        header = f.readline().decode("utf-8", "replace").strip()
        parts = header.split()
        if len(parts) != 2 or parts[0] != CHECKPOINT_FORMAT:
            raise CheckpointCorruptError(f"{path}: unrecognized header {header!r}")
        version = int(parts[1])
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: format version {version}, this build reads "
                f"{CHECKPOINT_VERSION}"
            )
        try:
            manifest = json.loads(f.readline().decode())
        except ValueError as e:
            raise CheckpointCorruptError(f"{path}: bad manifest: {e}") from e
        tensors: Dict[str, Tensor] = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = 1
            for s in shape:
                count *= s
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointCorruptError(
                    f"{path}: tensor {entry['name']!r} payload truncated"
                )
            if zlib.crc32(raw) != entry["crc32"]:
                raise CheckpointCorruptError(
                    f"{path}: tensor {entry['name']!r} failed its checksum"
                )
            buf = array("d")
            buf.frombytes(raw)
            if sys.byteorder == "big":
                buf.byteswap()
            tensors[entry["name"]] = Tensor(shape, buf)
        if f.read(1):
            raise CheckpointCorruptError(f"{path}: trailing bytes after payload")
    return manifest["meta"], tensors


# ---------------------------------------------------------------------------
# metrics CSV
# ---------------------------------------------------------------------------

def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        raise DataError("boolean metric values are not part of the schema")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return "%.9g" % value
    s = str(value)
    if "," in s or "\n" in s:
        raise DataError(f"metric value {s!r} would break the CSV schema")
    return s


class MetricsWriter:
    """Appends rows in the fixed schema; header written once per file.

    An optional comment string is written as a "# ..." line above the header
    so every metrics file carries the configuration that produced it.
    """

    def __init__(self, path: str, comment: Optional[str] = None):
        self.path = path
        new = not (os.path.exists(path) and os.path.getsize(path) > 0)
        self._f = open(path, "a", encoding="utf-8")
        if new:
            if comment:
                self._f.write("# " + comment.replace("\n", " ") + "\n")
            self._f.write(",".join(METRICS_FIELDS) + "\n")
            self._f.flush()

    def emit(self, record: dict) -> None:
        unknown = set(record) - set(METRICS_FIELDS)
        if unknown:
            raise DataError(f"unknown metric fields: {sorted(unknown)}")
        row = ",".join(format_cell(record.get(k)) for k in METRICS_FIELDS)
        self._f.write(row + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_csv(path: str, header: Sequence[str],
              rows: Iterable[Sequence]) -> None:
    """Small generic CSV writer (latent stats, reconstructions)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(format_cell(v) for v in row) + "\n")


def read_csv(path: str) -> List[Dict[str, str]]:
    import csv

    with open(path, newline="", encoding="utf-8") as f:
        rows = (line for line in f if not line.startswith("#"))
        return list(csv.DictReader(rows))
