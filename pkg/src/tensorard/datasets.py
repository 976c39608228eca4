"""Dataset ingestion: IDX files, synthetic teacher-generated tasks, batching."""

from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import factorized, network

__all__ = [
    "LabeledDataset",
    "load_mnist_idx",
    "save_mnist_idx",
    "gen_synthetic",
    "batches",
    "save_dataset",
    "load_dataset",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Inputs (float features or integer token indices) with integer labels."""

    inputs: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.size < 1:
            raise ValueError("labels must be a nonempty 1-d integer array")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on the sample count")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.classes)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_mnist_idx(images_path, labels_path) -> LabeledDataset:
    """Parse big-endian IDX image/label files into a scaled float dataset.

    Pixels are scaled to [0, 1] by dividing by 255; gzipped files are
    handled transparently.
    """
    img = _read_bytes(images_path)
    if len(img) < 16:
        raise ValueError(f"{images_path}: truncated header at offset {len(img)}")
    magic, count, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IMAGES_MAGIC:
        raise ValueError(
            f"{images_path}: bad magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IMAGES_MAGIC:08x}"
        )
    need = 16 + count * rows * cols
    if len(img) < need:
        raise ValueError(f"{images_path}: truncated pixel data at offset {len(img)}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=count * rows * cols, offset=16)

    lbl = _read_bytes(labels_path)
    if len(lbl) < 8:
        raise ValueError(f"{labels_path}: truncated header at offset {len(lbl)}")
    lmagic, lcount = struct.unpack(">II", lbl[:8])
    if lmagic != LABELS_MAGIC:
        raise ValueError(
            f"{labels_path}: bad magic 0x{lmagic:08x} at offset 0, "
            f"expected 0x{LABELS_MAGIC:08x}"
        )
    if len(lbl) < 8 + lcount:
        raise ValueError(f"{labels_path}: truncated label data at offset {len(lbl)}")
    if lcount != count:
        raise ValueError(
            f"count mismatch: {count} images but {lcount} labels"
        )
    labels = np.frombuffer(lbl, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    inputs = pixels.astype(np.float64).reshape(count, rows * cols) / 255.0
    classes = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(inputs, labels, classes)


def save_mnist_idx(dataset: LabeledDataset, images_path, labels_path,
                   rows: int = 28, cols: int = 28) -> None:
    """Write a dataset back to IDX bytes; inverse of :func:`load_mnist_idx`."""
    n = len(dataset)
    if dataset.inputs.shape[1] != rows * cols:
        raise ValueError(f"feature dim {dataset.inputs.shape[1]} != {rows}*{cols}")
    pixels = np.rint(dataset.inputs * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def gen_synthetic(
    kind: str,
    row_dims,
    col_dims,
    true_ranks,
    num_samples: int,
    seed: int = 0,
    base_inputs=None,
    label_sampling: str = "argmax",
    in_features: int | None = None,
    out_features: int | None = None,
):
    """Labeled data from a one-layer tensorized classifier at fixed true ranks.

    The teacher's factors are drawn N(0,1) and frozen; labels are the argmax
    of its logits (or multinomial draws with ``label_sampling="multinomial"``).
    Returns (dataset, teacher_network) so recovered ranks can be compared.
    """
    if label_sampling not in ("argmax", "multinomial"):
        raise ValueError(f"unknown label_sampling {label_sampling!r}")
    row_dims, col_dims = [int(d) for d in row_dims], [int(d) for d in col_dims]
    total = math.prod(row_dims) * math.prod(col_dims)
    if in_features is None:
        in_features = math.prod(row_dims)
    if out_features is None:
        out_features = total // in_features
    if in_features * out_features != total:
        raise ValueError("in/out features do not factor the folded buffer")
    _check_true_ranks(kind, row_dims, col_dims, true_ranks)

    rng = np.random.default_rng(seed)
    order = len(row_dims) if kind == "ttm" else len(row_dims) + len(col_dims)
    ranks = factorized._normalize_ranks(kind, order, true_ranks)
    teacher_weight = factorized.init_layer(
        kind, row_dims, col_dims, ranks, rng, std_ratio=0.0, target_var=None
    )
    # Teacher factors are plain N(0,1) draws, not variance-matched.
    for f in teacher_weight.factors:
        f.mean[...] = rng.standard_normal(f.shape)
    bias = factorized.GaussianFactor(
        np.zeros(out_features), np.zeros(out_features)
    )
    teacher = network.Network(
        [
            network.TensorizedLinear(
                teacher_weight, bias, in_features, out_features, activation="identity"
            )
        ],
        classes=out_features,
    )
    if base_inputs is not None:
        inputs = np.asarray(base_inputs, dtype=np.float64)
        if inputs.shape != (num_samples, in_features):
            raise ValueError(
                f"base inputs of shape {inputs.shape} != "
                f"{(num_samples, in_features)}"
            )
    else:
        inputs = rng.standard_normal((num_samples, in_features))
    logits = teacher.forward(inputs)
    if label_sampling == "argmax":
        labels = np.argmax(logits, axis=1)
    else:
        probs = network.softmax(logits)
        cum = np.cumsum(probs, axis=1)
        u = rng.random((num_samples, 1))
        labels = (u > cum).sum(axis=1)
    return LabeledDataset(inputs, labels.astype(np.int64), out_features), teacher


def _check_true_ranks(kind, row_dims, col_dims, true_ranks):
    dims = list(row_dims) + list(col_dims)
    if kind == "cp":
        r = true_ranks if np.isscalar(true_ranks) else list(true_ranks)[0]
        if r > min(dims):
            raise ValueError(f"CP rank {r} exceeds the smallest mode size {min(dims)}")
        return
    if kind == "tucker":
        ranks = [true_ranks] * len(dims) if np.isscalar(true_ranks) else list(true_ranks)
        for r, d in zip(ranks, dims):
            if r > d:
                raise ValueError(f"Tucker rank {r} exceeds mode size {d}")
        return
    # TT/TTM bond ranks are capped by the unfolding sizes on either side.
    if kind == "ttm":
        sizes = [r * c for r, c in zip(row_dims, col_dims)]
    else:
        sizes = dims
    interior = (
        [true_ranks] * (len(sizes) - 1) if np.isscalar(true_ranks) else list(true_ranks)
    )
    for n, r in enumerate(interior):
        cap = min(math.prod(sizes[: n + 1]), math.prod(sizes[n + 1 :]))
        if r > cap:
            raise ValueError(f"bond rank {r} exceeds the structural cap {cap}")


def batches(dataset: LabeledDataset, batch_size: int, epoch_seed):
    """Seeded shuffle of [0, N) split into consecutive slices; short tail kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    perm = np.random.default_rng(epoch_seed).permutation(len(dataset))
    return [perm[i : i + batch_size] for i in range(0, len(dataset), batch_size)]


# -- simple blob serialization -------------------------------------------------


def save_dataset(dataset: LabeledDataset, prefix) -> None:
    """Write ``<prefix>.json`` (header) and ``<prefix>.bin`` (raw arrays)."""
    prefix = Path(prefix)
    token_inputs = np.issubdtype(dataset.inputs.dtype, np.integer)
    inputs = (
        dataset.inputs.astype("<i8")
        if token_inputs
        else dataset.inputs.astype("<f8")
    )
    labels = dataset.labels.astype("<i8")
    header = {
        "num_samples": len(dataset),
        "classes": dataset.classes,
        "input_kind": "token" if token_inputs else "float",
        "input_shape": list(dataset.inputs.shape),
        "input_bytes": inputs.nbytes,
        "label_bytes": labels.nbytes,
    }
    prefix.with_suffix(".json").write_text(json.dumps(header, sort_keys=True, indent=2))
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        fh.write(inputs.tobytes())
        fh.write(labels.tobytes())


def load_dataset(prefix) -> LabeledDataset:
    prefix = Path(prefix)
    header = json.loads(prefix.with_suffix(".json").read_text())
    raw = prefix.with_suffix(".bin").read_bytes()
    if len(raw) != header["input_bytes"] + header["label_bytes"]:
        raise ValueError(f"{prefix}.bin: expected "
                         f"{header['input_bytes'] + header['label_bytes']} bytes, "
                         f"got {len(raw)}")
    dtype = "<i8" if header["input_kind"] == "token" else "<f8"
    inputs = np.frombuffer(raw, dtype=dtype, count=math.prod(header["input_shape"]))
    inputs = inputs.reshape(header["input_shape"]).copy()
    labels = np.frombuffer(
        raw, dtype="<i8", count=header["num_samples"], offset=header["input_bytes"]
    ).copy()
    return LabeledDataset(inputs, labels, header["classes"])
