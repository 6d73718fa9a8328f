"""Pretext sample generation: counts, labels, placements, determinism."""

import numpy as np
import pytest

from patchrot import imaging, pretext, seeding
from patchrot.errors import EmptyDatasetError, PatchTooLargeError, ShapeMismatchError


def rand_image(rng, h, w=None, c=3):
    w = w or h
    return rng.random((h, w, c), dtype=np.float32)


def fresh_rng(seed=0):
    return np.random.default_rng(seed)


class TestGeneratePatchedSet:
    def test_64px_ratio_04(self):
        rng = np.random.default_rng(0)
        x = rand_image(rng, 64)
        cfg = pretext.PretextConfig(ratio=0.4, rng_seed=0)
        samples = pretext.generate_patched_set(x, cfg, fresh_rng())
        assert len(samples) == 8
        assert [s.label for s in samples] == [0, 1, 2, 3, 4, 5, 6, 7]
        for s in samples[4:]:
            top, left, ph, pw = s.placement
            assert (ph, pw) == (26, 26)  # round-half-up(0.4 * 64)

    def test_patch_side_13_and_placement_range_on_32px(self):
        rng = np.random.default_rng(1)
        x = rand_image(rng, 32)
        cfg = pretext.PretextConfig(ratio=0.4)
        tops, lefts = [], []
        gen = fresh_rng(7)
        for _ in range(500):
            for s in pretext.generate_patched_set(x, cfg, gen)[4:]:
                top, left, ph, pw = s.placement
                assert (ph, pw) == (13, 13)
                tops.append(top)
                lefts.append(left)
        # uniform over {0..19}^2: full support at this sample size
        assert min(tops) == 0 and max(tops) == 19
        assert min(lefts) == 0 and max(lefts) == 19

    def test_whole_rotation_samples_match_rotate90(self):
        rng = np.random.default_rng(2)
        x = rand_image(rng, 16)
        samples = pretext.generate_patched_set(x, pretext.PretextConfig(), fresh_rng())
        for k in range(4):
            np.testing.assert_array_equal(samples[k].image, imaging.rotate90(x, k))

    def test_outside_patch_equals_upright_original(self):
        rng = np.random.default_rng(3)
        x = rand_image(rng, 20)
        samples = pretext.generate_patched_set(x, pretext.PretextConfig(), fresh_rng())
        for s in samples[4:]:
            top, left, ph, pw = s.placement
            mask = np.ones(x.shape[:2], dtype=bool)
            mask[top : top + ph, left : left + pw] = False
            np.testing.assert_array_equal(s.image[mask], x[mask])

    def test_patch_content_recoverable(self):
        rng = np.random.default_rng(4)
        x = rand_image(rng, 20)
        cfg = pretext.PretextConfig(ratio=0.5)
        samples = pretext.generate_patched_set(x, cfg, fresh_rng())
        for k, s in enumerate(samples[4:]):
            top, left, ph, pw = s.placement
            expected = imaging.bilinear_resize(imaging.rotate90(x, k), ph, pw)
            np.testing.assert_array_equal(s.image[top : top + ph, left : left + pw], expected)

    def test_same_seed_bit_identical(self):
        rng = np.random.default_rng(5)
        x = rand_image(rng, 16)
        cfg = pretext.PretextConfig()
        a = pretext.generate_patched_set(x, cfg, fresh_rng(42))
        b = pretext.generate_patched_set(x, cfg, fresh_rng(42))
        for sa, sb in zip(a, b):
            assert sa.placement == sb.placement
            np.testing.assert_array_equal(sa.image, sb.image)

    def test_patch_too_large(self):
        x = np.zeros((8, 8, 1), dtype=np.float32)
        with pytest.raises(PatchTooLargeError):
            pretext.generate_patched_set(x, pretext.PretextConfig(ratio=0.01), fresh_rng())


class TestGeneratePairs:
    def test_four_pairs_with_labels(self):
        rng = np.random.default_rng(6)
        x = rand_image(rng, 16)
        pairs = pretext.generate_pairs(x, pretext.PretextConfig(), fresh_rng())
        assert [p.label for p in pairs] == [0, 1, 2, 3]

    def test_pair0_image_a_is_input(self):
        rng = np.random.default_rng(7)
        x = rand_image(rng, 16)
        pairs = pretext.generate_pairs(x, pretext.PretextConfig(), fresh_rng())
        np.testing.assert_array_equal(pairs[0].image_a, x)

    def test_members_share_rotation_index(self):
        rng = np.random.default_rng(8)
        x = rand_image(rng, 16)
        pairs = pretext.generate_pairs(x, pretext.PretextConfig(), fresh_rng())
        for k, p in enumerate(pairs):
            np.testing.assert_array_equal(p.image_a, imaging.rotate90(x, k))
            top, left, ph, pw = p.placement
            expected = imaging.bilinear_resize(imaging.rotate90(x, k), ph, pw)
            np.testing.assert_array_equal(p.image_b[top : top + ph, left : left + pw], expected)

    def test_fixed_seed_deterministic(self):
        rng = np.random.default_rng(9)
        x = rand_image(rng, 16)
        a = pretext.generate_pairs(x, pretext.PretextConfig(), fresh_rng(3))
        b = pretext.generate_pairs(x, pretext.PretextConfig(), fresh_rng(3))
        assert [p.placement for p in a] == [p.placement for p in b]


class TestGenerateRotnetSet:
    def test_four_samples(self):
        rng = np.random.default_rng(10)
        x = rand_image(rng, 12)
        samples = pretext.generate_rotnet_set(x)
        assert [s.label for s in samples] == [0, 1, 2, 3]
        np.testing.assert_array_equal(samples[0].image, x)
        np.testing.assert_array_equal(samples[2].image, imaging.rotate90(x, 2))


class TestBuildEpoch:
    def make_dataset(self, n, size=16, seed=11):
        rng = np.random.default_rng(seed)
        return [rand_image(rng, size) for _ in range(n)]

    def test_batch_counts_patch_rotnet(self):
        ds = self.make_dataset(10)
        cfg = pretext.PretextConfig(rng_seed=1)
        batches = list(pretext.build_epoch(ds, pretext.PATCH_ROTNET, cfg, batch_size=16))
        assert [b.labels.size for b in batches] == [16, 16, 16, 16, 16]
        assert batches[0].images.shape == (16, 3, 16, 16)

    def test_batch_counts_relnet_pairs(self):
        ds = self.make_dataset(10)
        cfg = pretext.PretextConfig(rng_seed=1)
        batches = list(pretext.build_epoch(ds, pretext.PATCH_RELNET, cfg, batch_size=8))
        assert len(batches) == 5
        assert all(b.images_b is not None for b in batches)

    def test_single_image_single_batch(self):
        ds = self.make_dataset(1)
        cfg = pretext.PretextConfig(rng_seed=2)
        batches = list(pretext.build_epoch(ds, pretext.PATCH_ROTNET, cfg, batch_size=8))
        assert len(batches) == 1
        assert batches[0].labels.tolist() == list(range(8))  # single image: no shuffle effect

    def test_label_histogram_exactly_uniform(self):
        ds = self.make_dataset(12)
        cfg = pretext.PretextConfig(rng_seed=3)
        labels = np.concatenate(
            [b.labels for b in pretext.build_epoch(ds, pretext.PATCH_ROTNET, cfg, batch_size=32)]
        )
        assert np.bincount(labels, minlength=8).tolist() == [12] * 8

    def test_same_seed_identical_stream(self):
        ds = self.make_dataset(6)
        cfg = pretext.PretextConfig(rng_seed=4)
        a = list(pretext.build_epoch(ds, pretext.PATCH_ROTNET, cfg, batch_size=16, epoch=2))
        b = list(pretext.build_epoch(ds, pretext.PATCH_ROTNET, cfg, batch_size=16, epoch=2))
        for ba, bb in zip(a, b):
            assert ba.images.tobytes() == bb.images.tobytes()
            assert ba.labels.tolist() == bb.labels.tolist()

    def test_frozen_placements_when_resample_off(self):
        # identical sample tensors across epochs up to shuffle order
        ds = self.make_dataset(5)
        cfg = pretext.PretextConfig(rng_seed=5, resample_position_each_epoch=False)

        def sample_multiset(epoch):
            out = []
            for b in pretext.build_epoch(ds, pretext.PATCH_ROTNET, cfg, batch_size=8, epoch=epoch):
                out.extend(b.images[i].tobytes() for i in range(b.labels.size))
            return sorted(out)

        assert sample_multiset(0) == sample_multiset(1)

    def test_resampled_placements_differ_across_epochs(self):
        ds = self.make_dataset(5, size=32)
        cfg = pretext.PretextConfig(rng_seed=6, resample_position_each_epoch=True)
        p0 = [pl for b in pretext.build_epoch(ds, pretext.PATCH_ROTNET, cfg, 8, epoch=0)
              for pl in b.placements if pl]
        p1 = [pl for b in pretext.build_epoch(ds, pretext.PATCH_ROTNET, cfg, 8, epoch=1)
              for pl in b.placements if pl]
        assert sorted(p0) != sorted(p1)

    def test_empty_dataset(self):
        with pytest.raises(EmptyDatasetError):
            list(pretext.build_epoch([], pretext.PATCH_ROTNET, pretext.PretextConfig(), 8))

    def test_non_square_images_rejected(self):
        rng = np.random.default_rng(12)
        ds = [rand_image(rng, 8, 12)]
        with pytest.raises(ShapeMismatchError):
            list(pretext.build_epoch(ds, pretext.ROTNET, pretext.PretextConfig(), 8))


class TestSubstreams:
    def test_distinct_keys_distinct_streams(self):
        a = seeding.substream(1, seeding.PLACEMENT, 0, 0).integers(0, 1000, 8)
        b = seeding.substream(1, seeding.PLACEMENT, 0, 1).integers(0, 1000, 8)
        c = seeding.substream(1, seeding.PLACEMENT, 0, 0).integers(0, 1000, 8)
        assert a.tolist() != b.tolist()
        assert a.tolist() == c.tolist()
