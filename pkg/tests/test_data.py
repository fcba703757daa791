"""Dataset loaders: CIFAR-10 byte layout and the synthetic shapes corpus."""

import numpy as np
import pytest

from elastic_ssl.data import (
    MAX_SYNTH_CLASSES,
    DataFormatError,
    DatasetHandle,
    load_cifar10,
    synth_dataset,
)

RECORD_BYTES = 1 + 3 * 32 * 32


def make_record(label: int, fill=None, rng=None) -> bytes:
    """One CIFAR record: label byte then red, green, blue row-major planes."""
    if fill is not None:
        planes = np.full(3 * 32 * 32, fill, dtype=np.uint8)
    else:
        planes = rng.integers(0, 256, size=3 * 32 * 32, dtype=np.uint8)
    return bytes([label]) + planes.tobytes()


class TestCifarParser:
    def test_single_file_values(self, tmp_path):
        rng = np.random.default_rng(0)
        records = [make_record(3, rng=rng), make_record(0, fill=255), make_record(9, fill=0)]
        path = tmp_path / "batch.bin"
        path.write_bytes(b"".join(records))
        handle = load_cifar10(path, "test")
        assert handle.kind == "cifar10" and handle.split == "test"
        assert len(handle) == 3
        np.testing.assert_array_equal(handle.labels, [3, 0, 9])
        assert handle.images.dtype == np.float32
        assert handle.images[1].min() == handle.images[1].max() == 1.0
        assert handle.images[2].min() == handle.images[2].max() == 0.0

    def test_plane_order_is_channel_major(self, tmp_path):
        # Red plane 255, green and blue 0: channel 0 must be the bright one.
        planes = np.zeros(3 * 32 * 32, dtype=np.uint8)
        planes[: 32 * 32] = 255
        path = tmp_path / "red.bin"
        path.write_bytes(bytes([1]) + planes.tobytes())
        handle = load_cifar10(path, "test")
        image = handle.images[0]
        assert image[0].min() == 1.0
        assert image[1].max() == 0.0 and image[2].max() == 0.0

    def test_pixel_scaling_is_exact(self, tmp_path):
        path = tmp_path / "gray.bin"
        path.write_bytes(make_record(5, fill=128))
        handle = load_cifar10(path, "test")
        assert np.all(handle.images[0] == np.float32(128.0 / 255.0))

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "cut.bin"
        path.write_bytes(make_record(1, fill=7)[:-5])
        with pytest.raises(DataFormatError, match="multiple"):
            load_cifar10(path, "test")

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        with pytest.raises(DataFormatError):
            load_cifar10(path, "test")

    def test_out_of_range_label_rejected(self, tmp_path):
        path = tmp_path / "badlabel.bin"
        path.write_bytes(make_record(9, fill=1) + make_record(10, fill=1))
        with pytest.raises(DataFormatError, match="label 10"):
            load_cifar10(path, "test")

    def test_directory_layout_and_missing_files(self, tmp_path):
        rng = np.random.default_rng(1)
        for i in range(1, 6):
            (tmp_path / f"data_batch_{i}").write_bytes(make_record(i % 10, rng=rng))
        train = load_cifar10(tmp_path, "train")
        assert len(train) == 5
        np.testing.assert_array_equal(train.labels, [1, 2, 3, 4, 5])
        with pytest.raises(FileNotFoundError, match="test_batch"):
            load_cifar10(tmp_path, "test")
        (tmp_path / "data_batch_3").unlink()
        with pytest.raises(FileNotFoundError, match="data_batch_3"):
            load_cifar10(tmp_path, "train")

    def test_unknown_split_and_missing_path(self, tmp_path):
        with pytest.raises(ValueError, match="split"):
            load_cifar10(tmp_path, "val")
        with pytest.raises(FileNotFoundError):
            load_cifar10(tmp_path / "nowhere.bin", "train")


class TestDatasetHandle:
    def test_validation(self):
        good = np.zeros((4, 3, 8, 8), dtype=np.float32)
        handle = DatasetHandle(good, np.zeros(4, dtype=np.int64), "x", "train")
        assert len(handle) == 4
        assert handle.image_shape == (3, 8, 8)
        assert handle.num_classes == 1
        with pytest.raises(ValueError, match="float32"):
            DatasetHandle(good.astype(np.float64), None, "x", "train")
        with pytest.raises(ValueError, match="range"):
            DatasetHandle(good - 1.0, None, "x", "train")
        with pytest.raises(ValueError, match="labels"):
            DatasetHandle(good, np.zeros(3, dtype=np.int64), "x", "train")
        assert DatasetHandle(good, None, "x", "train").num_classes is None


class TestSynthShapes:
    def test_shapes_and_balance(self):
        data = synth_dataset(5, 23, seed=0)
        assert data.images.shape == (23, 3, 32, 32)
        assert data.images.dtype == np.float32
        assert data.num_classes == 5
        counts = np.bincount(data.labels, minlength=5)
        assert counts.max() - counts.min() <= 1

    def test_byte_identical_regeneration(self):
        a = synth_dataset(4, 16, seed=7, split="train")
        b = synth_dataset(4, 16, seed=7, split="train")
        assert a.images.tobytes() == b.images.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_splits_and_seeds_are_disjoint(self):
        train = synth_dataset(4, 16, seed=7, split="train")
        val = synth_dataset(4, 16, seed=7, split="val")
        other = synth_dataset(4, 16, seed=8, split="train")
        assert train.images.tobytes() != val.images.tobytes()
        assert train.images.tobytes() != other.images.tobytes()

    def test_prefix_stability(self):
        # Image i depends only on (seed, split, i), not on the requested size.
        small = synth_dataset(4, 8, seed=3)
        large = synth_dataset(4, 20, seed=3)
        assert small.images.tobytes() == large.images[:8].tobytes()

    def test_custom_split_names_are_deterministic(self):
        a = synth_dataset(3, 6, seed=0, split="probe")
        b = synth_dataset(3, 6, seed=0, split="probe")
        c = synth_dataset(3, 6, seed=0, split="train")
        assert a.images.tobytes() == b.images.tobytes()
        assert a.images.tobytes() != c.images.tobytes()

    def test_argument_validation(self):
        with pytest.raises(ValueError, match="two classes"):
            synth_dataset(1, 4)
        with pytest.raises(ValueError, match="at most"):
            synth_dataset(MAX_SYNTH_CLASSES + 1, 4)
        with pytest.raises(ValueError, match="size"):
            synth_dataset(4, 0)

    def test_classes_are_visually_separable(self):
        # Nearest-centroid on raw pixels should beat chance by a wide margin,
        # otherwise the probe experiments have no signal to find.
        train = synth_dataset(6, 120, seed=0, split="train")
        test = synth_dataset(6, 60, seed=0, split="val")
        x_train = train.images.reshape(len(train), -1)
        x_test = test.images.reshape(len(test), -1)
        centroids = np.stack([
            x_train[train.labels == c].mean(axis=0) for c in range(6)
        ])
        pred = np.argmin(
            ((x_test[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1
        )
        accuracy = (pred == test.labels).mean()
        assert accuracy > 0.5, f"nearest-centroid accuracy only {accuracy:.2f}"
