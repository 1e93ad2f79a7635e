import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spurscope.checkpoint import FormatError
from spurscope.data import (
    CORNER,
    SpecError,
    SplitError,
    SpuriousDatasetSpec,
    balanced_split,
    build_balanced_testset,
    dataset_io,
    generate_dataset,
    load_dataset,
    rle_decode,
    rle_encode,
    save_dataset,
)


@pytest.fixture(scope="module")
def patch95():
    return generate_dataset(SpuriousDatasetSpec(n_per_class=100, rho=0.95, seed=3))


def template_classifier(img: np.ndarray) -> int:
    """Independent core oracle: threshold the cyan excess, read centre and radius
    off the bounding box, and pick the disk or cross template with higher IoU."""
    on = (img[1:].mean(axis=0) - img[0]) > 0.2
    ys, xs = np.nonzero(on)
    cy, cx = (ys.min() + ys.max()) // 2, (xs.min() + xs.max()) // 2
    r = (ys.max() - ys.min()) // 2
    yy, xx = np.mgrid[0:32, 0:32]
    disk = np.hypot(yy - cy, xx - cx) <= r
    arm = max(1, r // 3)
    cross = ((abs(yy - cy) <= arm) | (abs(xx - cx) <= arm)) & (abs(yy - cy) <= r) & (abs(xx - cx) <= r)
    iou = [(on & t).sum() / (on | t).sum() for t in (disk, cross)]
    return int(np.argmax(iou))


class TestCensus:
    def test_symmetric_95(self, patch95):
        assert patch95.census() == (95, 5, 5, 95)

    def test_no_correlation(self):
        ds = generate_dataset(SpuriousDatasetSpec(n_per_class=50, rho=0.5, seed=0))
        assert ds.census() == (25, 25, 25, 25)

    def test_one_sided(self):
        ds = generate_dataset(SpuriousDatasetSpec(n_per_class=100, rho=0.5, one_sided=True, seed=0))
        assert ds.census() == (50, 50, 100, 0)

    def test_realised_correlation(self):
        for rho in (0.5, 0.75, 0.9, 0.95, 0.99, 1.0):
            ds = generate_dataset(SpuriousDatasetSpec(n_per_class=60, rho=rho, seed=1))
            assert abs((ds.s == ds.y).mean() - rho) <= 1 / (2 * 60) + 1e-12

    def test_too_small(self):
        with pytest.raises(SpecError):
            generate_dataset(SpuriousDatasetSpec(n_per_class=3, rho=0.9))
        with pytest.raises(SpecError):
            generate_dataset(SpuriousDatasetSpec(n_per_class=10, rho=0.99))

    def test_bad_rho(self):
        with pytest.raises(SpecError):
            generate_dataset(SpuriousDatasetSpec(rho=1.2))


class TestSampleInvariants:
    def test_groups_and_masks(self, patch95):
        assert np.array_equal(patch95.g, 2 * patch95.y + patch95.s)
        has_mask = patch95.masks.reshape(len(patch95), -1).any(axis=1)
        assert np.array_equal(has_mask, patch95.s == 1)
        assert patch95.images.min() >= 0.0 and patch95.images.max() <= 1.0
        assert patch95.images.shape == (200, 3, 32, 32)

    def test_patch_mask_marks_exactly_the_patch(self, patch95):
        color = np.array(SpuriousDatasetSpec().patch_color, np.float32)
        for j in np.flatnonzero(patch95.s == 1)[:20]:
            m = patch95.masks[j]
            assert m.sum() == 36
            np.testing.assert_array_equal(patch95.images[j][:, m], np.repeat(color[:, None], 36, axis=1))
            ys, xs = np.nonzero(m)
            in_corner_y = ys.max() < CORNER or ys.min() >= 32 - CORNER
            in_corner_x = xs.max() < CORNER or xs.min() >= 32 - CORNER
            assert in_corner_y and in_corner_x

    def test_patch_and_core_disjoint(self, patch95):
        for j in np.flatnonzero(patch95.s == 1):
            ys, xs = np.nonzero(patch95.masks[j])
            core = (ys >= 8) & (ys < 24) & (xs >= 8) & (xs < 24)
            assert not core.any()

    def test_background_mask_is_box_complement(self):
        ds = generate_dataset(SpuriousDatasetSpec(style="background", n_per_class=20, rho=0.9, seed=2))
        for j in np.flatnonzero(ds.s == 1):
            hole = ~ds.masks[j]
            ys, xs = np.nonzero(hole)
            assert hole.sum() == (np.ptp(ys) + 1) * (np.ptp(xs) + 1)
            assert ys.min() >= 8 and ys.max() < 24

    def test_core_is_decidable_without_shortcut(self):
        ds = build_balanced_testset(SpuriousDatasetSpec(seed=11), 100)
        clean = np.flatnonzero(ds.s == 0)
        preds = np.array([template_classifier(ds.images[j]) for j in clean])
        assert (preds == ds.y[clean]).mean() == 1.0

    def test_deterministic(self):
        spec = SpuriousDatasetSpec(n_per_class=20, rho=0.9, seed=5)
        a, b = generate_dataset(spec), generate_dataset(spec)
        assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.masks, b.masks)
        c = generate_dataset(replace(spec, seed=6))
        assert a.images.tobytes() != c.images.tobytes()


class TestBalanced:
    def test_testset(self):
        ds = build_balanced_testset(SpuriousDatasetSpec(seed=1), 50)
        assert len(ds) == 200 and ds.census() == (50, 50, 50, 50)
        assert ds.masks[ds.s == 1].reshape(100, -1).any(axis=1).all()

    def test_testset_deterministic(self):
        spec = SpuriousDatasetSpec(seed=4)
        assert build_balanced_testset(spec, 5).images.tobytes() == build_balanced_testset(spec, 5).images.tobytes()

    def test_split_sizes(self, patch95):
        sub, rest = balanced_split(patch95, 5, seed=0)
        assert sub.census() == (5, 5, 5, 5)
        assert len(sub) + len(rest) == len(patch95)

    def test_split_names_short_groups(self, patch95):
        with pytest.raises(SplitError, match="group 1.*group 2"):
            balanced_split(patch95, 6, seed=0)

    def test_split_is_partition(self, patch95):
        sub, rest = balanced_split(patch95, 5, seed=1)
        keys = lambda d: {img.tobytes() for img in d.images}  # noqa: E731
        assert not keys(sub) & keys(rest)
        assert keys(sub) | keys(rest) == keys(patch95)


class TestDatasetIO:
    def test_round_trip(self, tmp_path, patch95):
        dataset_io(patch95, tmp_path / "d.bin", "save")
        back = dataset_io(None, tmp_path / "d.bin", "load")
        assert back.images.tobytes() == patch95.images.tobytes()
        assert np.array_equal(back.masks, patch95.masks)
        assert np.array_equal(back.y, patch95.y) and np.array_equal(back.s, patch95.s)
        assert back.meta == patch95.meta

    def test_version_bump(self, tmp_path, patch95):
        save_dataset(patch95.subset([0, 1]), tmp_path / "d.bin")
        raw = bytearray((tmp_path / "d.bin").read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        (tmp_path / "v.bin").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_dataset(tmp_path / "v.bin")

    def test_corrupt_header(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"SPDS\x01")
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "x.bin")

    def test_census_csv(self, patch95):
        assert patch95.census_csv().splitlines() == ["group,count", "0,95", "1,5", "2,5", "3,95"]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.floats(0, 1), st.integers(0, 2**32 - 1))
    def test_rle_codec(self, h, w, p, seed):
        m = np.random.default_rng(seed).random((h, w)) < p
        runs = rle_encode(m)
        assert sum(runs) == h * w
        np.testing.assert_array_equal(rle_decode(runs, (h, w)), m)
