"""Dataset container, SDF format, splits, sampling, synthetic data."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from spikematch.data import (
    Dataset,
    SdfLabelError,
    SdfMagicError,
    SdfTruncatedError,
    convert_idx,
    load_sdf,
    make_split,
    make_synthetic,
    sample_batches,
    save_sdf,
    save_split_manifest,
)


def small_dataset(n_per_class=6, classes=3, seed=0) -> Dataset:
    return make_synthetic("gaussian_blobs", classes, n_per_class, 10, 10, 0.05, seed)


class TestSdfFormat:
    def test_round_trip_bit_identical(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "data.sdf"
        save_sdf(path, ds)
        loaded = load_sdf(path)
        # float32 storage: compare against the float32 cast of the original
        assert np.array_equal(
            loaded.images, ds.images.astype(np.float32).astype(np.float64)
        )
        assert np.array_equal(loaded.labels, ds.labels)
        assert loaded.classes == ds.classes
        save_sdf(tmp_path / "again.sdf", loaded)
        assert (tmp_path / "again.sdf").read_bytes() == path.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sdf"
        path.write_bytes(b"XDF1" + b"\x00" * 40)
        with pytest.raises(SdfMagicError):
            load_sdf(path)

    def test_truncated_payload(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "data.sdf"
        save_sdf(path, ds)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(SdfTruncatedError):
            load_sdf(path)

    def test_label_out_of_range(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "data.sdf"
        save_sdf(path, ds)
        raw = bytearray(path.read_bytes())
        raw[-1] = ds.classes  # label == classes is invalid
        path.write_bytes(bytes(raw))
        with pytest.raises(SdfLabelError):
            load_sdf(path)


class TestIdxConversion:
    def test_round_trip(self, tmp_path):
        gen = np.random.default_rng(0)
        images = gen.integers(0, 256, size=(5, 4, 4), dtype=np.uint8)
        labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
        img_path = tmp_path / "imgs.idx3-ubyte"
        lab_path = tmp_path / "labs.idx1-ubyte"
        img_path.write_bytes(struct.pack(">4I", 0x803, 5, 4, 4) + images.tobytes())
        lab_path.write_bytes(struct.pack(">2I", 0x801, 5) + labels.tobytes())
        ds = convert_idx(img_path, lab_path)
        assert ds.images.shape == (5, 1, 4, 4)
        assert np.allclose(ds.images[0, 0], images[0] / 255.0)
        assert ds.classes == 3

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(struct.pack(">4I", 0x999, 1, 2, 2) + b"\x00" * 4)
        with pytest.raises(SdfMagicError):
            convert_idx(path, path)


class TestSplit:
    def test_exact_counts(self):
        ds = small_dataset(n_per_class=10, classes=4)
        split = make_split(ds, 4, seed=0)
        assert len(split.labeled) == 16
        labels = ds.labels[split.labeled]
        assert all((labels == c).sum() == 4 for c in range(4))

    def test_deterministic(self):
        ds = small_dataset(n_per_class=10)
        a = make_split(ds, 3, seed=5)
        b = make_split(ds, 3, seed=5)
        assert np.array_equal(a.labeled, b.labeled)
        assert np.array_equal(a.unlabeled, b.unlabeled)

    def test_all_labeled_empties_unlabeled(self):
        ds = small_dataset(n_per_class=5)
        split = make_split(ds, 5, seed=0)
        assert len(split.unlabeled) == 0

    def test_insufficient_examples(self):
        ds = small_dataset(n_per_class=3)
        with pytest.raises(ValueError):
            make_split(ds, 4, seed=0)

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_disjoint_and_balanced(self, seed):
        ds = small_dataset(n_per_class=8, classes=3, seed=1)
        split = make_split(ds, 2, seed=seed)
        assert not set(split.labeled) & set(split.unlabeled)
        assert len(split.labeled) + len(split.unlabeled) == len(ds)
        labels = ds.labels[split.labeled]
        assert all((labels == c).sum() == 2 for c in range(3))

    def test_overlap_flag(self):
        ds = small_dataset(n_per_class=8)
        split = make_split(ds, 2, seed=0, include_labeled_in_unlabeled=True)
        assert len(split.unlabeled) == len(ds)

    def test_manifest(self, tmp_path):
        import json

        ds = small_dataset(n_per_class=8)
        split = make_split(ds, 2, seed=3)
        path = tmp_path / "split.json"
        save_split_manifest(path, split)
        blob = json.loads(path.read_text())
        assert blob["seed"] == 3
        assert blob["labeled_indices"] == split.labeled.tolist()


class TestSampler:
    def test_batch_shapes(self):
        ds = small_dataset(n_per_class=40, classes=2)
        split = make_split(ds, 16, seed=0)
        stream = sample_batches(split, 32, 7, seed=0)
        lab, unl = next(stream)
        assert len(lab) == 32 and len(unl) == 224

    def test_single_pairs(self):
        ds = small_dataset(n_per_class=5, classes=2)
        split = make_split(ds, 2, seed=0)
        lab, unl = next(sample_batches(split, 1, 1, seed=0))
        assert len(lab) == 1 and len(unl) == 1

    def test_deterministic(self):
        ds = small_dataset(n_per_class=10, classes=2)
        split = make_split(ds, 4, seed=0)
        a = [next(sample_batches(split, 4, 2, seed=9)) for _ in range(1)][0]
        b = [next(sample_batches(split, 4, 2, seed=9)) for _ in range(1)][0]
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_epoch_covers_pool(self):
        ds = small_dataset(n_per_class=4, classes=2)
        split = make_split(ds, 4, seed=0, include_labeled_in_unlabeled=True)
        stream = sample_batches(split, 4, 1, seed=0)
        seen = np.concatenate([next(stream)[0] for _ in range(2)])
        assert set(seen) == set(split.labeled)

    def test_empty_pool_rejected(self):
        ds = small_dataset(n_per_class=5)
        split = make_split(ds, 5, seed=0)  # unlabeled empty
        with pytest.raises(ValueError):
            next(sample_batches(split, 2, 1, seed=0))


class TestSynthetic:
    def test_sizes(self):
        ds = make_synthetic("gaussian_blobs", 2, 1, 8, 8, 0.0, 0)
        assert len(ds) == 2 and ds.classes == 2

    def test_range_and_determinism(self):
        a = make_synthetic("striped_patterns", 3, 4, 12, 12, 0.2, 7)
        b = make_synthetic("striped_patterns", 3, 4, 12, 12, 0.2, 7)
        assert np.array_equal(a.images, b.images)
        assert a.images.min() >= 0.0 and a.images.max() <= 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_synthetic("checkers", 2, 2)

    def test_linear_separability_oracle(self):
        # Independent check that the blobs are class-separable: a plain
        # logistic regression on flattened pixels must fit the train set.
        ds = make_synthetic("gaussian_blobs", 4, 50, 28, 28, 0.05, 0)
        X = ds.images.reshape(len(ds), -1)
        clf = LogisticRegression(max_iter=2000).fit(X, ds.labels)
        assert clf.score(X, ds.labels) >= 0.95
