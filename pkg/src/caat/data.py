"""Dataset ingestion and persistence: IDX files, blobs, metrics CSV, checkpoints."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointError,
    IdxBadMagic,
    IdxCountMismatch,
    IdxError,
    IdxTruncated,
)
from .model import ModelSpec, ModelState, flatten, model_from_vector

IDX_IMAGES_MAGIC = 0x00000803  # 2051
IDX_LABELS_MAGIC = 0x00000801  # 2049

CHECKPOINT_MAGIC = b"CAAT"
CHECKPOINT_VERSION = 1

METRICS_HEADER = [
    "run_id", "epoch", "method", "lambda", "gamma", "delta",
    "std_acc", "adv_acc", "mean_mu", "mean_phi", "mean_lambda_star", "lr",
    "branch_projected", "branch_standard", "branch_fallback",
]


@dataclass
class Dataset:
    """Images as an (n x d) float matrix in [0, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_map: dict | None = None
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or self.images.shape[0] == 0:
            raise ValueError("images must be a nonempty n x d matrix")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must be one per image")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, n: int) -> "Dataset":
        """First n samples (dataset order is stable)."""
        n = min(int(n), len(self))
        return Dataset(self.images[:n].copy(), self.labels[:n].copy(),
                       self.class_map, self.image_shape)


def _read_exact(data: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(data):
        raise IdxTruncated(f"{what}: need {offset + count} bytes, file has {len(data)}")
    return data[offset : offset + count]


def _parse_idx_images(data: bytes) -> tuple[np.ndarray, tuple[int, int]]:
    header = _read_exact(data, 0, 16, "image header")
    magic, n, rows, cols = struct.unpack(">IIII", header)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxBadMagic(f"image magic {magic} != {IDX_IMAGES_MAGIC}")
    payload = _read_exact(data, 16, n * rows * cols, "image payload")
    if len(data) != 16 + n * rows * cols:
        raise IdxTruncated(f"image file has {len(data) - 16 - n * rows * cols} trailing bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(n, rows * cols), (rows, cols)


def _parse_idx_labels(data: bytes) -> np.ndarray:
    header = _read_exact(data, 0, 8, "label header")
    magic, n = struct.unpack(">II", header)
    if magic != IDX_LABELS_MAGIC:
        raise IdxBadMagic(f"label magic {magic} != {IDX_LABELS_MAGIC}")
    payload = _read_exact(data, 8, n, "label payload")
    if len(data) != 8 + n:
        raise IdxTruncated(f"label file has {len(data) - 8 - n} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse a big-endian IDX image/label file pair into a Dataset."""
    with open(images_path, "rb") as f:
        images, shape = _parse_idx_images(f.read())
    with open(labels_path, "rb") as f:
        labels = _parse_idx_labels(f.read())
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatch(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    return Dataset(images, labels, image_shape=shape)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray,
              image_shape: tuple[int, int] | None = None) -> None:
    """Write a Dataset-style array pair as IDX files (pixels quantized to u8)."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = images.shape
    if image_shape is None:
        side = int(round(np.sqrt(d)))
        if side * side != d:
            raise IdxError("image_shape required for non-square images")
        image_shape = (side, side)
    rows, cols = image_shape
    if rows * cols != d:
        raise IdxError(f"image_shape {image_shape} does not match width {d}")
    u8 = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(labels.astype(np.uint8).tobytes())


def pad_images(ds: Dataset, pad_to: int) -> Dataset:
    """Zero-pad square images symmetrically up to pad_to x pad_to."""
    if ds.image_shape is not None:
        rows, cols = ds.image_shape
    else:
        side = int(round(np.sqrt(ds.dim)))
        if side * side != ds.dim:
            raise ValueError("cannot infer image side for padding")
        rows = cols = side
    if rows != cols:
        raise ValueError("padding supports square images only")
    side = rows
    if pad_to <= side:
        return ds
    total = pad_to - side
    before = total // 2
    imgs = ds.images.reshape(len(ds), side, side)
    padded = np.zeros((len(ds), pad_to, pad_to))
    padded[:, before : before + side, before : before + side] = imgs
    return Dataset(padded.reshape(len(ds), pad_to * pad_to), ds.labels.copy(),
                   ds.class_map, (pad_to, pad_to))


def select_binary_task(ds: Dataset, class_a: int, class_b: int, pad_to: int = 32) -> Dataset:
    """Keep two classes, relabel them +1/-1, and pad the images."""
    mask_a = ds.labels == class_a
    mask_b = ds.labels == class_b
    if not mask_a.any():
        raise ValueError(f"class {class_a} not present")
    if not mask_b.any():
        raise ValueError(f"class {class_b} not present")
    keep = mask_a | mask_b
    labels = np.where(ds.labels[keep] == class_a, 1, -1).astype(np.int64)
    out = Dataset(ds.images[keep].copy(), labels,
                  class_map={int(class_a): 1, int(class_b): -1},
                  image_shape=ds.image_shape)
    return pad_images(out, pad_to)


def synthetic_blobs(seed: int, n_per_class: int, d: int, separation: float) -> Dataset:
    """Two Gaussian blobs at +/- separation/2 along the first axis, labels +/-1.

    Raw coordinates are affinely squeezed into [0, 1] (4 sigma of headroom)
    and clipped, so the pixel-range invariant holds.
    """
    if d < 1 or n_per_class < 1:
        raise ValueError("d and n_per_class must be >= 1")
    if not separation > 0.0:
        raise ValueError("separation must be > 0")
    rng = np.random.default_rng(int(seed) % 2**64)
    half = separation / 2.0
    pos = rng.standard_normal((n_per_class, d))
    neg = rng.standard_normal((n_per_class, d))
    pos[:, 0] += half
    neg[:, 0] -= half
    raw = np.vstack([pos, neg])
    scale = 2.0 * (half + 4.0)
    images = np.clip(0.5 + raw / scale, 0.0, 1.0)
    labels = np.concatenate([np.ones(n_per_class), -np.ones(n_per_class)]).astype(np.int64)
    return Dataset(images, labels)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path, records, run_meta: dict) -> None:
    """Append-free CSV dump of per-epoch training records.

    ``run_meta`` supplies the per-run constants: run_id, method, lambda
    (or None), gamma (or None), delta.
    """
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for rec in records:
            counts = rec.branch_counts or {}
            writer.writerow([
                run_meta.get("run_id", ""),
                rec.epoch,
                run_meta.get("method", ""),
                _fmt(run_meta.get("lambda")),
                _fmt(run_meta.get("gamma")),
                _fmt(run_meta.get("delta")),
                _fmt(rec.std_acc),
                _fmt(rec.adv_acc),
                _fmt(rec.mean_mu),
                _fmt(rec.mean_phi),
                _fmt(rec.mean_lambda_star),
                _fmt(rec.lr),
                counts.get("projected", 0),
                counts.get("standard_only", 0),
                counts.get("fallback_degenerate", 0),
            ])


def read_metrics_csv(path) -> list[dict]:
    """Parse a metrics CSV back into dicts with floats restored."""
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header: {reader.fieldnames}")
        for row in reader:
            parsed = dict(row)
            for key in ("lambda", "gamma", "delta", "std_acc", "adv_acc",
                        "mean_mu", "mean_phi", "mean_lambda_star", "lr"):
                parsed[key] = float(row[key]) if row[key] != "" else None
            for key in ("epoch", "branch_projected", "branch_standard", "branch_fallback"):
                parsed[key] = int(row[key])
            out.append(parsed)
    return out


def write_checkpoint(path, model: ModelState) -> None:
    """Binary model dump: magic, version, layer dims, then f64 parameters.

    Header ints and parameter floats are little-endian; parameters follow the
    canonical flatten order.
    """
    shapes = model.spec.layer_shapes()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HH", CHECKPOINT_VERSION, len(shapes)))
        for out_dim, in_dim in shapes:
            f.write(struct.pack("<II", out_dim, in_dim))
        f.write(flatten(model).astype("<f8").tobytes())


def read_checkpoint(path, activation: str = "relu", output_head: str | None = None) -> ModelState:
    """Load a checkpoint; activation / head are not stored and must be supplied.

    When ``output_head`` is None it is inferred: final dim 1 means single_logit.
    """
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    if len(data) < 8:
        raise CheckpointError("truncated checkpoint header")
    version, n_layers = struct.unpack("<HH", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 8
    shapes = []
    for _ in range(n_layers):
        if offset + 8 > len(data):
            raise CheckpointError("truncated layer table")
        out_dim, in_dim = struct.unpack("<II", data[offset : offset + 8])
        shapes.append((out_dim, in_dim))
        offset += 8
    dims = [shapes[0][1]] + [o for o, _ in shapes]
    for i in range(1, len(shapes)):
        if shapes[i][1] != shapes[i - 1][0]:
            raise CheckpointError("inconsistent layer dims in checkpoint")
    if output_head is None:
        output_head = "single_logit" if dims[-1] == 1 else "multi_logit"
    spec = ModelSpec(tuple(dims), activation=activation, output_head=output_head)
    expected = spec.param_count() * 8
    if len(data) - offset != expected:
        raise CheckpointError(
            f"checkpoint payload is {len(data) - offset} bytes, expected {expected}"
        )
    vector = np.frombuffer(data, dtype="<f8", offset=offset).astype(np.float64)
    return model_from_vector(spec, vector)
