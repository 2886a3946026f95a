import gzip
import math
import struct

import numpy as np
import pytest

from fewgan.data import (AugmentationSpec, DataConsistencyError, IdxFormatError,
                         augment_batch, augment_image, cap_per_class, load_idx_dataset,
                         load_image_directory, make_synthetic, resample_crop_rotation,
                         sample_augment_params, sample_support, split_classes,
                         ClassPartition)


def write_idx_pair(tmp_path, images, labels, gz=False, image_magic=0x00000803,
                   truncate=0):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    img_bytes = struct.pack(">IIII", image_magic, *images.shape) + images.tobytes()
    if truncate:
        img_bytes = img_bytes[:-truncate]
    lab_bytes = struct.pack(">II", 0x00000801, len(labels)) + labels.tobytes()
    img_path, lab_path = tmp_path / "img.idx", tmp_path / "lab.idx"
    if gz:
        img_bytes, lab_bytes = gzip.compress(img_bytes), gzip.compress(lab_bytes)
    img_path.write_bytes(img_bytes)
    lab_path.write_bytes(lab_bytes)
    return img_path, lab_path


class TestIdxLoader:
    def test_two_image_pair_rescales(self, tmp_path):
        imgs = np.array([[[0, 255], [128, 64]], [[255, 255], [0, 0]]])
        paths = write_idx_pair(tmp_path, imgs, [1, 0])
        ds = load_idx_dataset(*paths)
        assert len(ds) == 2
        assert ds.images.shape == (2, 1, 2, 2)
        assert ds.images.max() == 1.0 and ds.images.min() == 0.0
        assert ds.images[0, 0, 0, 1] == 1.0
        assert list(ds.labels) == [1, 0]

    def test_gzip_transparent(self, tmp_path):
        imgs = np.full((3, 4, 4), 7)
        plain = load_idx_dataset(*write_idx_pair(tmp_path, imgs, [0, 1, 2]))
        gz_dir = tmp_path / "gz"
        gz_dir.mkdir()
        zipped = load_idx_dataset(*write_idx_pair(gz_dir, imgs, [0, 1, 2], gz=True))
        assert np.array_equal(plain.images, zipped.images)

    def test_corrupt_magic(self, tmp_path):
        paths = write_idx_pair(tmp_path, np.zeros((1, 2, 2)), [0], image_magic=0)
        with pytest.raises(IdxFormatError, match="offset 0"):
            load_idx_dataset(*paths)

    def test_truncated_payload_names_offset(self, tmp_path):
        paths = write_idx_pair(tmp_path, np.zeros((2, 3, 3)), [0, 1], truncate=5)
        with pytest.raises(IdxFormatError, match="byte offset"):
            load_idx_dataset(*paths)

    def test_count_mismatch(self, tmp_path):
        img_path, _ = write_idx_pair(tmp_path, np.zeros((2, 2, 2)), [0, 1])
        other = tmp_path / "other"
        other.mkdir()
        _, lab_path = write_idx_pair(other, np.zeros((3, 2, 2)), [0, 1, 2])
        with pytest.raises(DataConsistencyError):
            load_idx_dataset(img_path, lab_path)


class TestImageDirectory:
    @staticmethod
    def _write_class(root, name, count, side=6, value=200):
        from PIL import Image

        d = root / name
        d.mkdir(parents=True)
        for i in range(count):
            Image.fromarray(np.full((side, side), value, dtype=np.uint8)).save(
                d / f"{i}.png")

    def test_single_class(self, tmp_path):
        self._write_class(tmp_path, "alpha", 3)
        ds = load_image_directory(tmp_path)
        assert ds.n_classes == 1 and len(ds) == 3
        assert ds.images.shape == (3, 1, 6, 6)

    def test_lexicographic_label_assignment(self, tmp_path):
        self._write_class(tmp_path, "b", 1, value=10)
        self._write_class(tmp_path, "a", 1, value=250)
        ds = load_image_directory(tmp_path)
        # class 0 must be directory "a" regardless of creation order
        assert ds.images[ds.class_index[0][0]].max() > 0.9

    def test_empty_root(self, tmp_path):
        with pytest.raises(DataConsistencyError):
            load_image_directory(tmp_path)

    def test_undecodable_file_named(self, tmp_path):
        self._write_class(tmp_path, "a", 1)
        bad = tmp_path / "a" / "broken.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(DataConsistencyError, match="broken.png"):
            load_image_directory(tmp_path)

    def test_resize(self, tmp_path):
        self._write_class(tmp_path, "a", 2, side=20)
        ds = load_image_directory(tmp_path, image_size=8)
        assert ds.image_shape == (1, 8, 8)


class TestSynthetic:
    def test_shape_and_determinism(self):
        a = make_synthetic(10, 100, 28, 0)
        b = make_synthetic(10, 100, 28, 0)
        assert len(a) == 1000 and a.n_classes == 10
        assert np.array_equal(a.images, b.images)

    def test_single_example(self):
        ds = make_synthetic(1, 1, 8, 0)
        assert len(ds) == 1 and ds.labels[0] == 0

    def test_seed_changes_pixels(self):
        a = make_synthetic(3, 4, 12, 0)
        b = make_synthetic(3, 4, 12, 1)
        assert not np.array_equal(a.images, b.images)

    def test_value_range(self):
        ds = make_synthetic(4, 5, 16, 3)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_argument_validation(self):
        with pytest.raises(ValueError):
            make_synthetic(0, 1, 8, 0)

    def test_cap_per_class(self):
        ds = cap_per_class(make_synthetic(3, 10, 8, 0), 4)
        assert len(ds) == 12
        assert all(len(idx) == 4 for idx in ds.class_index.values())


def _flat_dataset(n_classes, per_class):
    """Counts-only dataset with 1x1 images, for split arithmetic at scale."""
    labels = np.repeat(np.arange(n_classes), per_class)
    images = np.zeros((len(labels), 1, 1, 1), dtype=np.float32)
    from fewgan.data import _make_dataset

    return _make_dataset("flat", images, labels)


class TestSplitClasses:
    def test_emnist_shape(self):
        ds = _flat_dataset(47, 2800)
        part = split_classes(ds, dataset_seed=3, n_train_classes=38,
                             n_target_classes=9, valid_fraction=0.8)
        assert part.n_train == 38 and part.n_target == 9
        for c in part.target_classes:
            assert len(part.valid_indices[c]) == 2240
            assert len(part.test_indices[c]) == 560

    def test_omniglot_shape(self):
        ds = _flat_dataset(1623, 20)
        part = split_classes(ds, 0, 1411, 212, 0.8)
        assert part.n_train == 1411 and part.n_target == 212
        assert len(part.valid_indices[part.target_classes[0]]) == 16

    def test_bit_identical_repeat(self):
        ds = _flat_dataset(20, 30)
        a = split_classes(ds, 5, 12, 6, 0.8)
        b = split_classes(ds, 5, 12, 6, 0.8)
        assert a.to_json() == b.to_json()

    def test_disjoint_invariants(self):
        ds = _flat_dataset(20, 25)
        part = split_classes(ds, 11, 12, 6, 0.8)
        assert not set(part.train_classes) & set(part.target_classes)
        for c in part.target_classes:
            v, t = set(part.valid_indices[c]), set(part.test_indices[c])
            assert not v & t
            assert v | t == set(ds.class_index[c])
            frac = len(v) / (len(v) + len(t))
            assert abs(frac - 0.8) <= 1.0 / len(ds.class_index[c])

    def test_budget_exceeded(self):
        ds = _flat_dataset(10, 5)
        with pytest.raises(ValueError):
            split_classes(ds, 0, 8, 3, 0.8)

    def test_fraction_bounds(self):
        ds = _flat_dataset(10, 5)
        with pytest.raises(ValueError):
            split_classes(ds, 0, 5, 3, 1.0)

    def test_json_round_trip(self, tmp_path):
        ds = _flat_dataset(12, 10)
        part = split_classes(ds, 2, 8, 4, 0.8)
        path = tmp_path / "partition.json"
        part.save(path)
        loaded = ClassPartition.load(path)
        assert loaded.to_json() == part.to_json()
        assert all(np.array_equal(loaded.valid_indices[c], part.valid_indices[c])
                   for c in part.target_classes)

    def test_slot_and_head_spaces(self):
        ds = _flat_dataset(12, 10)
        part = split_classes(ds, 2, 8, 4, 0.8)
        slots = sorted(part.slot_of(c) for c in part.train_classes)
        assert slots == list(range(8))
        assert sorted(part.slot_of(c) for c in part.target_classes) == [8, 9, 10, 11]
        assert [part.head_of(c) for c in part.target_classes] == [0, 1, 2, 3]


@pytest.fixture(scope="module")
def world():
    ds = make_synthetic(8, 30, 8, seed=1)
    part = split_classes(ds, 0, 5, 3, 0.8)
    return ds, part


class TestSampleSupport:
    def test_counts(self, world):
        ds, part = world
        sup = sample_support(part, ds, k=5, seed=0)
        assert len(sup) == 15
        assert all(len(sup.indices[c]) == 5 for c in part.target_classes)

    def test_full_valid(self, world):
        ds, part = world
        k = len(part.valid_indices[part.target_classes[0]])
        sup = sample_support(part, ds, k=k, seed=0)
        for c in part.target_classes:
            assert set(sup.indices[c]) == set(part.valid_indices[c])

    def test_never_touches_test(self, world):
        ds, part = world
        for seed in range(5):
            sup = sample_support(part, ds, k=6, seed=seed)
            for c in part.target_classes:
                assert not set(sup.indices[c]) & set(part.test_indices[c])
                assert set(sup.indices[c]) <= set(part.valid_indices[c])

    def test_k_too_large(self, world):
        ds, part = world
        with pytest.raises(ValueError):
            sample_support(part, ds, k=25, seed=0)

    def test_deterministic(self, world):
        ds, part = world
        a = sample_support(part, ds, 4, seed=9)
        b = sample_support(part, ds, 4, seed=9)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)


def oracle_crop_rotate(image, area, angle_deg, top, left):
    """Direct per-pixel geometry: same sampled crop/rotation, independent code."""
    c, h, w = image.shape
    s = math.sqrt(area)
    ch, cw = s * h, s * w
    cy, cx = top + ch / 2.0, left + cw / 2.0
    th = math.radians(angle_deg)
    out = np.zeros_like(image, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            dy = (i + 0.5 - h / 2.0) * s
            dx = (j + 0.5 - w / 2.0) * s
            py = cy + math.cos(th) * dy - math.sin(th) * dx
            px = cx + math.sin(th) * dy + math.cos(th) * dx
            u, v = py - 0.5, px - 0.5
            r0, c0 = math.floor(u), math.floor(v)
            wy, wx = u - r0, v - c0
            for ci in range(c):
                acc = 0.0
                for rr, cc, wgt in ((r0, c0, (1 - wy) * (1 - wx)),
                                    (r0, c0 + 1, (1 - wy) * wx),
                                    (r0 + 1, c0, wy * (1 - wx)),
                                    (r0 + 1, c0 + 1, wy * wx)):
                    if 0 <= rr < h and 0 <= cc < w:
                        acc += wgt * image[ci, rr, cc]
                out[ci, i, j] = acc
    return out


@pytest.fixture(scope="module")
def pattern():
    rng = np.random.default_rng(42)
    return rng.random((1, 12, 12))


class TestAugmentImage:
    def test_identity_spec(self, pattern):
        out = augment_image(pattern, AugmentationSpec(1.0, 0.0),
                            np.random.default_rng(0))
        assert np.abs(out - pattern).max() <= 1e-6

    def test_zero_image(self):
        zero = np.zeros((1, 9, 9))
        out = augment_image(zero, AugmentationSpec(0.5, 25.0), np.random.default_rng(1))
        assert np.array_equal(out, zero)

    def test_matches_direct_geometry_oracle(self, pattern):
        spec = AugmentationSpec(0.7, 10.0)
        for seed in range(6):
            rng = np.random.default_rng(seed)
            params = sample_augment_params(spec, 12, 12, np.random.default_rng(seed))
            got = augment_image(pattern, spec, rng)
            want = oracle_crop_rotate(pattern, *params)
            assert np.abs(got - want).max() <= 1e-4

    def test_preserves_value_range(self, pattern):
        rng = np.random.default_rng(7)
        spec = AugmentationSpec(0.3, 30.0)
        for _ in range(20):
            out = augment_image(pattern, spec, rng)
            assert out.min() >= 0.0 and out.max() <= pattern.max() + 1e-12

    def test_same_stream_same_output(self, pattern):
        spec = AugmentationSpec(0.7, 10.0)
        a = augment_image(pattern, spec, np.random.default_rng(3))
        b = augment_image(pattern, spec, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_batch_helper(self, pattern):
        batch = np.stack([pattern, pattern * 0.5])
        out = augment_batch(batch, AugmentationSpec(0.8, 5.0), np.random.default_rng(0))
        assert out.shape == batch.shape

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            AugmentationSpec(0.0, 5.0)
        with pytest.raises(ValueError):
            AugmentationSpec(0.5, -1.0)
