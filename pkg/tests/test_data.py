"""Dataset ingestion: CIFAR binary format, PPM directories, synthetic glyphs."""

import numpy as np
import pytest

from patchrot import data, imaging
from patchrot.errors import (
    DataError,
    EmptyDatasetError,
    LabelOutOfRangeError,
    TruncatedRecordError,
)


def cifar_bytes(labels, rng):
    """Assemble valid CIFAR records: label byte + planar R,G,B."""
    chunks = []
    for lab in labels:
        chunks.append(bytes([lab]))
        chunks.append(rng.integers(0, 256, size=3072, dtype=np.uint8).tobytes())
    return b"".join(chunks)


class TestCifarBinary:
    def test_parses_records(self, tmp_path):
        rng = np.random.default_rng(0)
        p = tmp_path / "batch.bin"
        p.write_bytes(cifar_bytes([0, 3, 9], rng))
        ds = data.load_cifar_binary(p)
        assert len(ds) == 3
        assert ds.labels.tolist() == [0, 3, 9]
        assert ds.images[0].shape == (32, 32, 3)
        assert ds.images[0].dtype == np.float32

    def test_planar_layout_and_scaling(self, tmp_path):
        # first pixel: R=255, G=0, B=128 in planar order
        payload = bytes([5]) + bytes([255]) + bytes(1023) + bytes(1024) + bytes([128]) + bytes(1023)
        p = tmp_path / "one.bin"
        p.write_bytes(payload)
        ds = data.load_cifar_binary(p)
        np.testing.assert_allclose(ds.images[0][0, 0], [1.0, 0.0, 128 / 255], atol=1e-7)

    def test_truncated_record(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(bytes(3073 * 2 + 17))
        with pytest.raises(TruncatedRecordError):
            data.load_cifar_binary(p)

    def test_label_out_of_range(self, tmp_path):
        rng = np.random.default_rng(1)
        p = tmp_path / "bad_label.bin"
        p.write_bytes(bytes([11]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes())
        with pytest.raises(LabelOutOfRangeError):
            data.load_cifar_binary(p)


class TestPpmDirectory:
    def test_flat_directory_unlabeled(self, tmp_path):
        rng = np.random.default_rng(2)
        for i in range(3):
            imaging.write_ppm(rng.random((8, 8, 3), dtype=np.float32), tmp_path / f"{i}.ppm")
        ds = data.load_ppm_directory(tmp_path)
        assert len(ds) == 3
        assert ds.labels is None

    def test_class_subdirectories(self, tmp_path):
        rng = np.random.default_rng(3)
        for cls in ("a_cats", "b_dogs"):
            (tmp_path / cls).mkdir()
            for i in range(2):
                imaging.write_ppm(rng.random((8, 8, 3), dtype=np.float32),
                                  tmp_path / cls / f"{i}.ppm")
        ds = data.load_ppm_directory(tmp_path)
        assert ds.labels.tolist() == [0, 0, 1, 1]
        assert ds.class_names == ("a_cats", "b_dogs")

    def test_empty_directory(self, tmp_path):
        with pytest.raises(EmptyDatasetError):
            data.load_ppm_directory(tmp_path)


class TestSyntheticShapes:
    def test_deterministic(self):
        a = data.make_synthetic_shapes(8, 32, seed=5)
        b = data.make_synthetic_shapes(8, 32, seed=5)
        for ia, ib in zip(a.images, b.images):
            np.testing.assert_array_equal(ia, ib)
        assert a.labels.tolist() == b.labels.tolist()

    def test_every_image_has_foreground(self):
        ds = data.make_synthetic_shapes(16, 32, seed=6)
        for img in ds.images:
            assert (img > 0.5).sum() >= data.GLYPHS["arrow"].sum()

    def test_labels_cycle_classes(self):
        ds = data.make_synthetic_shapes(10, 32, seed=7, classes=4)
        assert ds.labels.tolist() == [0, 1, 2, 3, 0, 1, 2, 3, 0, 1]

    def test_glyphs_asymmetric_under_quarter_turns(self):
        # exhaustive over the glyph set: no glyph equals any of its own
        # nontrivial rotations, nor any rotation of another glyph
        variants = [(name, k, np.rot90(g, k))
                    for name, g in data.GLYPHS.items() for k in range(4)]
        for i in range(len(variants)):
            for j in range(i + 1, len(variants)):
                ni, ki, gi = variants[i]
                nj, kj, gj = variants[j]
                assert not (gi.shape == gj.shape and np.array_equal(gi, gj)), \
                    f"{ni} rot{ki} collides with {nj} rot{kj}"

    def test_equal_glyph_pixel_counts(self):
        counts = {name: int(g.sum()) for name, g in data.GLYPHS.items()}
        assert len(set(counts.values())) == 1, counts

    def test_pixel_range_valid(self):
        ds = data.make_synthetic_shapes(4, 32, seed=8)
        for img in ds.images:
            imaging.check_image(img)

    def test_size_floor(self):
        with pytest.raises(ValueError):
            data.make_synthetic_shapes(4, 8, seed=0)


class TestSourceParsing:
    def test_synthetic_defaults(self):
        src = data.parse_source("synthetic:n=32")
        assert src.params == {"n": 32, "size": 32, "classes": 4}

    def test_explicit_kinds(self):
        assert data.parse_source("cifar:/x/y.bin").path == "/x/y.bin"
        assert data.parse_source("ppmdir:/d").kind == "ppmdir"

    def test_rejects_unknown(self):
        with pytest.raises(DataError):
            data.parse_source("tar:/x")
        with pytest.raises(DataError):
            data.parse_source("plainpath")

    def test_load_source_synthetic(self):
        ds = data.load_source(data.parse_source("synthetic:n=6,size=16,classes=2"), seed=1)
        assert len(ds) == 6
        assert ds.num_classes == 2
