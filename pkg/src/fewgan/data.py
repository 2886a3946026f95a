"""Dataset ingestion, class-wise randomized splitting, support sampling, augmentation.

Label spaces used throughout the package:

* dataset space  — the class ids carried by a ``Dataset``;
* slot space     — embedding-row indices: sorted source classes occupy slots
  ``0..n_train-1``, sorted target classes occupy ``n_train..n_train+n_target-1``
  (the GAN pre-allocates this full budget);
* head space     — classifier output indices ``0..n_target-1`` (rank of the
  class id among the sorted target classes).

All loaders and samplers are pure functions of (inputs, seed).
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

_IMAGE_SUFFIXES = {".png", ".bmp"}


class IdxFormatError(ValueError):
    """Malformed IDX payload (bad magic, truncated data); message names the byte offset."""


class DataConsistencyError(ValueError):
    """Image/label files disagree, or a directory tree is unusable as a dataset."""


class ArrayBatch(NamedTuple):
    """A bundle of images (N,C,H,W float32 in [0,1]) and integer labels (N,)."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Immutable labelled image collection.

    images: (N, C, H, W) float32 in [0, 1]; labels: (N,) int64 class ids;
    class_index maps class id -> sorted example indices.
    """

    name: str
    images: np.ndarray
    labels: np.ndarray
    class_index: dict[int, np.ndarray]

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataConsistencyError(f"images must be (N,C,H,W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        _freeze(self.images)
        _freeze(self.labels)
        for idx in self.class_index.values():
            _freeze(idx)

    @property
    def n_classes(self) -> int:
        return len(self.class_index)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return len(self.images)


def _build_class_index(labels: np.ndarray) -> dict[int, np.ndarray]:
    return {
        int(c): np.flatnonzero(labels == c).astype(np.int64)
        for c in np.unique(labels)
    }


def _make_dataset(name, images, labels) -> Dataset:
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1 if len(labels) else 0
    if len(labels) and labels.min() < 0:
        raise DataConsistencyError("negative class id")
    index = _build_class_index(labels)
    if len(index) != n_classes:
        # gaps are allowed only when a loader guarantees contiguity; relabel defensively
        remap = {c: i for i, c in enumerate(sorted(index))}
        labels = np.asarray([remap[int(c)] for c in labels], dtype=np.int64)
        index = _build_class_index(labels)
    return Dataset(name=name, images=np.ascontiguousarray(images, dtype=np.float32),
                   labels=labels, class_index=index)


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------

def _read_idx(path, expected_magic: int, n_dims: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    header = 4 + 4 * n_dims
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header, file ends at byte offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} at byte offset 0 (expected 0x{expected_magic:08x})"
        )
    dims = struct.unpack(">" + "I" * n_dims, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise IdxFormatError(
            f"{path}: truncated payload, file ends at byte offset {len(raw)} "
            f"(expected {header + count})"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx_dataset(image_file, label_file, name: str | None = None) -> Dataset:
    """Load an IDX image/label pair (optionally gzipped), rescaled to [0, 1]."""
    images = _read_idx(image_file, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(label_file, IDX_LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise DataConsistencyError(
            f"{image_file} holds {len(images)} images but {label_file} holds {len(labels)} labels"
        )
    images = images.astype(np.float32) / 255.0
    return _make_dataset(name or Path(image_file).stem, images[:, None, :, :], labels)


def load_image_directory(root, image_size: int | None = None, name: str | None = None) -> Dataset:
    """Load a class-per-directory tree of grayscale PNG/BMP images.

    Class ids follow lexicographic directory order. ``image_size`` optionally
    resizes every image (bilinear) so different sources can share model configs.
    """
    from PIL import Image

    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir()) if root.is_dir() else []
    images, labels = [], []
    for cid, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
        for p in files:
            try:
                with Image.open(p) as im:
                    im = im.convert("L")
                    if image_size is not None:
                        im = im.resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as exc:
                raise DataConsistencyError(f"cannot decode image file {p}: {exc}") from exc
            images.append(arr)
            labels.append(cid)
    if not images:
        raise DataConsistencyError(f"no class directories with decodable images under {root}")
    shapes = {a.shape for a in images}
    if len(shapes) > 1:
        raise DataConsistencyError(f"images under {root} have mixed shapes {sorted(shapes)}")
    stack = np.stack(images)[:, None, :, :]
    return _make_dataset(name or root.name, stack, labels)


def make_synthetic(n_classes: int, per_class: int, image_side: int, seed: int,
                   noise_std: float = 0.03) -> Dataset:
    """Deterministic parametric glyph dataset: an oriented bar plus a blob per class.

    Class identity fixes the bar angle, stroke thickness, bar length, and the
    blob's size and position (factors that survive feature pooling); per-example
    jitter and seeded pixel noise provide intra-class variation. Classes are
    separable by a small classifier by construction.
    """
    if min(n_classes, per_class, image_side) < 1:
        raise ValueError("n_classes, per_class and image_side must all be >= 1")
    rng = np.random.default_rng(seed)
    side = image_side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    yy = (yy + 0.5) / side - 0.5
    xx = (xx + 0.5) / side - 0.5

    def spread(c, mult):  # low-discrepancy per-class factor in [0, 1)
        return (c * mult) % 1.0

    images = np.empty((n_classes * per_class, 1, side, side), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes), per_class)
    for c in range(n_classes):
        theta = np.pi * spread(c, 0.381966)
        bar_w = 0.045 + 0.04 * spread(c, 0.618034)
        bar_len = 0.24 + 0.16 * spread(c, 0.267949)
        blob_sig = 0.055 + 0.06 * spread(c, 0.754878)
        phi = 2 * np.pi * spread(c, 0.618034)
        blob_r = 0.18 + 0.12 * spread(c, 0.554958)
        blob_c = blob_r * np.array([np.sin(phi), np.cos(phi)])
        jitter = rng.uniform(-0.05, 0.05, size=(per_class, 2))
        amp = rng.uniform(0.85, 1.0, size=per_class)
        noise = rng.normal(0.0, noise_std, size=(per_class, side, side))
        for e in range(per_class):
            cy, cx = jitter[e]
            dy, dx = yy - cy, xx - cx
            par = dy * np.cos(theta) + dx * np.sin(theta)
            perp = -dy * np.sin(theta) + dx * np.cos(theta)
            bar = np.exp(-((perp / bar_w) ** 2) - (par / bar_len) ** 4)
            by, bx = yy - (blob_c[0] + cy), xx - (blob_c[1] + cx)
            blob = 0.9 * np.exp(-(by ** 2 + bx ** 2) / (2 * blob_sig ** 2))
            img = amp[e] * np.clip(bar + blob, 0.0, 1.0) + noise[e]
            images[c * per_class + e, 0] = np.clip(img, 0.0, 1.0)
    return _make_dataset(f"synthetic-{n_classes}x{per_class}", images, labels)


def cap_per_class(dataset: Dataset, cap: int) -> Dataset:
    """Keep only the first ``cap`` example indices of every class (config cap)."""
    keep = np.sort(np.concatenate([idx[:cap] for idx in dataset.class_index.values()]))
    return _make_dataset(dataset.name, dataset.images[keep], dataset.labels[keep])


# ---------------------------------------------------------------------------
# class partition and support sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassPartition:
    """A dataset-seed-determined split into source classes and target classes.

    Target-class examples are further split per class into validation and test
    index sets (valid_fraction : 1 - valid_fraction).
    """

    dataset_seed: int
    train_classes: tuple[int, ...]
    target_classes: tuple[int, ...]
    valid_indices: dict[int, np.ndarray]
    test_indices: dict[int, np.ndarray]

    @property
    def n_train(self) -> int:
        return len(self.train_classes)

    @property
    def n_target(self) -> int:
        return len(self.target_classes)

    @property
    def class_budget(self) -> int:
        return self.n_train + self.n_target

    def slot_of(self, class_id: int) -> int:
        """Embedding-row index of a class (source classes first, then target)."""
        if class_id in self._train_rank:
            return self._train_rank[class_id]
        return self.n_train + self._target_rank[class_id]

    def head_of(self, class_id: int) -> int:
        return self._target_rank[class_id]

    @property
    def target_slots(self) -> np.ndarray:
        return np.arange(self.n_train, self.class_budget, dtype=np.int64)

    @property
    def _train_rank(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.train_classes)}

    @property
    def _target_rank(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.target_classes)}

    def train_arrays(self, dataset: Dataset) -> ArrayBatch:
        """All source-class examples, labels in slot space."""
        rank = self._train_rank
        idx = np.concatenate([dataset.class_index[c] for c in self.train_classes])
        slots = np.concatenate([
            np.full(len(dataset.class_index[c]), rank[c], dtype=np.int64)
            for c in self.train_classes
        ])
        return ArrayBatch(dataset.images[idx], slots)

    def _target_arrays(self, dataset, index_map, label_fn) -> ArrayBatch:
        idx = np.concatenate([index_map[c] for c in self.target_classes])
        labels = np.concatenate([
            np.full(len(index_map[c]), label_fn(c), dtype=np.int64)
            for c in self.target_classes
        ])
        return ArrayBatch(dataset.images[idx], labels)

    def valid_arrays(self, dataset: Dataset) -> ArrayBatch:
        """Validation split of the target classes, labels in slot space."""
        return self._target_arrays(dataset, self.valid_indices, self.slot_of)

    def valid_head_arrays(self, dataset: Dataset) -> ArrayBatch:
        return self._target_arrays(dataset, self.valid_indices, self.head_of)

    def test_head_arrays(self, dataset: Dataset) -> ArrayBatch:
        return self._target_arrays(dataset, self.test_indices, self.head_of)

    def unlabeled_valid_images(self, dataset: Dataset) -> np.ndarray:
        return self.valid_arrays(dataset).images

    def to_json(self) -> str:
        return json.dumps({
            "dataset_seed": self.dataset_seed,
            "train_classes": list(self.train_classes),
            "target_classes": list(self.target_classes),
            "valid_indices": {str(c): v.tolist() for c, v in self.valid_indices.items()},
            "test_indices": {str(c): v.tolist() for c, v in self.test_indices.items()},
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ClassPartition":
        d = json.loads(text)
        return cls(
            dataset_seed=int(d["dataset_seed"]),
            train_classes=tuple(d["train_classes"]),
            target_classes=tuple(d["target_classes"]),
            valid_indices={int(c): np.asarray(v, dtype=np.int64)
                           for c, v in d["valid_indices"].items()},
            test_indices={int(c): np.asarray(v, dtype=np.int64)
                          for c, v in d["test_indices"].items()},
        )

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ClassPartition":
        return cls.from_json(Path(path).read_text())


def split_classes(dataset: Dataset, dataset_seed: int, n_train_classes: int,
                  n_target_classes: int, valid_fraction: float = 0.8) -> ClassPartition:
    """Randomly assign classes to source/target and split target examples valid/test.

    The generator is keyed only by dataset_seed, so identical (dataset, seed)
    inputs reproduce identical partitions bit-for-bit.
    """
    if n_train_classes + n_target_classes > dataset.n_classes:
        raise ValueError(
            f"requested {n_train_classes}+{n_target_classes} classes "
            f"but dataset has only {dataset.n_classes}"
        )
    if not 0.0 < valid_fraction < 1.0:
        raise ValueError(f"valid_fraction must be in (0,1), got {valid_fraction}")
    rng = np.random.default_rng(dataset_seed)
    perm = rng.permutation(sorted(dataset.class_index))
    train = tuple(sorted(int(c) for c in perm[:n_train_classes]))
    target = tuple(sorted(int(c) for c in perm[n_train_classes:n_train_classes + n_target_classes]))

    valid, test = {}, {}
    for c in target:
        idx = rng.permutation(dataset.class_index[c])
        n_valid = int(round(valid_fraction * len(idx)))
        valid[c] = np.sort(idx[:n_valid]).astype(np.int64)
        test[c] = np.sort(idx[n_valid:]).astype(np.int64)
    return ClassPartition(dataset_seed=dataset_seed, train_classes=train,
                          target_classes=target, valid_indices=valid, test_indices=test)


@dataclass(frozen=True)
class SupportSet:
    """Exactly k labelled examples per target class, drawn from the valid split."""

    k: int
    classes: tuple[int, ...]
    indices: dict[int, np.ndarray]
    images: np.ndarray
    labels: np.ndarray  # dataset-space class ids, class-major order

    def __len__(self) -> int:
        return len(self.images)

    def head_labels(self) -> np.ndarray:
        rank = {c: i for i, c in enumerate(self.classes)}
        return np.asarray([rank[int(c)] for c in self.labels], dtype=np.int64)

    def slot_labels(self, n_train: int) -> np.ndarray:
        return self.head_labels() + n_train


def sample_support(partition: ClassPartition, dataset: Dataset, k: int, seed: int) -> SupportSet:
    """Draw k validation examples per target class, without replacement."""
    min_valid = min(len(v) for v in partition.valid_indices.values())
    if not 1 <= k <= min_valid:
        raise ValueError(f"k={k} outside [1, {min_valid}] (smallest per-class valid count)")
    rng = np.random.default_rng(seed)
    indices, images, labels = {}, [], []
    for c in partition.target_classes:
        picked = np.sort(rng.choice(partition.valid_indices[c], size=k, replace=False))
        indices[c] = picked.astype(np.int64)
        images.append(dataset.images[picked])
        labels.append(np.full(k, c, dtype=np.int64))
    return SupportSet(k=k, classes=partition.target_classes, indices=indices,
                      images=np.concatenate(images), labels=np.concatenate(labels))


@dataclass(frozen=True)
class AugmentedSet:
    """Support set plus n_s generated samples per class; labels in head space."""

    images: np.ndarray
    labels: np.ndarray
    classes: tuple[int, ...]
    k: int
    n_s: int

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_support(cls, support: SupportSet) -> "AugmentedSet":
        return cls(images=support.images, labels=support.head_labels(),
                   classes=support.classes, k=support.k, n_s=0)

    def with_generated(self, images: np.ndarray, head_labels: np.ndarray,
                       n_s: int) -> "AugmentedSet":
        return AugmentedSet(
            images=np.concatenate([self.images, images.astype(np.float32)]),
            labels=np.concatenate([self.labels, head_labels]),
            classes=self.classes, k=self.k, n_s=n_s)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationSpec:
    """Random-resized-crop area range [min_scale, 1] and rotation range in degrees."""

    min_scale: float = 0.7
    max_rotation_degrees: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.min_scale <= 1.0:
            raise ValueError(f"min_scale must be in (0,1], got {self.min_scale}")
        if self.max_rotation_degrees < 0:
            raise ValueError("max_rotation_degrees must be >= 0")


def sample_augment_params(spec: AugmentationSpec, height: int, width: int, rng):
    """Draw (area, angle_deg, top, left). Draw order is part of the contract."""
    area = rng.uniform(spec.min_scale, 1.0)
    angle = rng.uniform(-spec.max_rotation_degrees, spec.max_rotation_degrees)
    s = np.sqrt(area)
    top = rng.uniform(0.0, height - s * height)
    left = rng.uniform(0.0, width - s * width)
    return float(area), float(angle), float(top), float(left)


def resample_crop_rotation(image: np.ndarray, area: float, angle_deg: float,
                           top: float, left: float) -> np.ndarray:
    """Bilinear resample of a rotated crop back to the full frame, zeros outside.

    The sampling grid for output pixel (i, j) is the crop rectangle's point at
    relative offset ((i+.5)/H-.5, (j+.5)/W-.5) scaled by the crop size and
    rotated by angle_deg about the crop centre.
    """
    c, h, w = image.shape
    s = np.sqrt(area)
    ch, cw = s * h, s * w
    cy, cx = top + ch / 2.0, left + cw / 2.0
    dy = (np.arange(h, dtype=np.float64) + 0.5 - h / 2.0) * s
    dx = (np.arange(w, dtype=np.float64) + 0.5 - w / 2.0) * s
    dyg, dxg = np.meshgrid(dy, dx, indexing="ij")
    th = np.deg2rad(angle_deg)
    py = cy + np.cos(th) * dyg - np.sin(th) * dxg
    px = cx + np.sin(th) * dyg + np.cos(th) * dxg
    u, v = py - 0.5, px - 0.5
    r0 = np.floor(u).astype(np.int64)
    c0 = np.floor(v).astype(np.int64)
    wy, wx = u - r0, v - c0

    out = np.zeros_like(image, dtype=np.float64)
    for drow, dcol, wgt in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        rr, cc = r0 + drow, c0 + dcol
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rs, cs = np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)
        for ch_i in range(c):
            out[ch_i] += np.where(valid, wgt * image[ch_i, rs, cs], 0.0)
    return out.astype(image.dtype, copy=False)


def augment_image(image: np.ndarray, spec: AugmentationSpec, rng) -> np.ndarray:
    """Randomly-resized crop plus rotation of a (C,H,W) image in [0,1]."""
    _, h, w = image.shape
    area, angle, top, left = sample_augment_params(spec, h, w, rng)
    return resample_crop_rotation(image, area, angle, top, left)


def augment_batch(images: np.ndarray, spec: AugmentationSpec, rng) -> np.ndarray:
    """augment_image over a batch; per-image parameters drawn in batch order."""
    return np.stack([augment_image(img, spec, rng) for img in images])
