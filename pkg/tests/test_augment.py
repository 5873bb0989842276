"""Spatial augmentation: exact identities, determinism, mask integrity
and the physical-spacing bookkeeping."""

import numpy as np
import pytest

from lvseg.augment import (
    AugmentConfig,
    _affine_by,
    _rotate_by,
    affine,
    elastic,
    expand,
    pipeline,
    rotate,
)
from lvseg.data import CineSample, synth_phantom


def grids(seed=0, shape=(20, 24)):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 1, shape)
    msk = (rng.random(shape) > 0.6).astype(np.uint8)
    return img, msk


class TestConfig:
    def test_defaults_valid(self):
        AugmentConfig()

    @pytest.mark.parametrize("kw", [
        {"elastic_alpha": -1.0},
        {"elastic_sigma": 0.0},
        {"rotate_degrees": -5.0},
        {"scale_range": (0.0, 1.0)},
        {"scale_range": (1.2, 1.1)},
        {"shear_max": -0.1},
        {"p_affine": 1.5},
    ])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ValueError):
            AugmentConfig(**kw)


class TestElastic:
    def test_alpha_zero_is_bitexact_identity(self):
        img, msk = grids()
        out_i, out_m = elastic(img, msk, 0.0, 4.0, np.random.default_rng(3))
        assert np.array_equal(out_i, img)
        assert np.array_equal(out_m, msk)

    def test_warps_and_keeps_mask_binary(self):
        img, msk = grids(1)
        out_i, out_m = elastic(img, msk, 20.0, 3.0, np.random.default_rng(3))
        assert not np.array_equal(out_i, img)
        assert set(np.unique(out_m)) <= {0, 1}
        assert out_m.dtype == np.uint8

    def test_same_rng_state_replays(self):
        img, msk = grids(2)
        a = elastic(img, msk, 10.0, 3.0, np.random.default_rng(7))
        b = elastic(img, msk, 10.0, 3.0, np.random.default_rng(7))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_validation(self):
        img, msk = grids()
        with pytest.raises(ValueError, match="alpha"):
            elastic(img, msk, -1.0, 3.0, np.random.default_rng(0))
        with pytest.raises(ValueError, match="matching 2-D"):
            elastic(img, msk[:-1], 1.0, 3.0, np.random.default_rng(0))
        with pytest.raises(ValueError, match="binary"):
            elastic(img, np.full(img.shape, 3), 1.0, 3.0, np.random.default_rng(0))


class TestRotate:
    def test_zero_degrees_is_bitexact_identity(self):
        img, msk = grids(3)
        out_i, out_m = rotate(img, msk, 0.0, np.random.default_rng(1))
        assert np.array_equal(out_i, img)
        assert np.array_equal(out_m, msk)

    def test_quarter_turn_matches_numpy(self):
        # rotating scene content by +90 degrees equals np.rot90(k=-1)
        # on a square grid; interior pixels agree to roundoff and the
        # nearest-neighbour mask is exact
        img, msk = grids(4, (21, 21))
        out_i, out_m = _rotate_by(img, msk, 90.0)
        assert np.abs(out_i - np.rot90(img, k=-1)).max() < 1e-12
        assert np.array_equal(out_m, np.rot90(msk, k=-1))

    def test_mass_roughly_preserved(self):
        img = np.zeros((31, 31))
        msk = np.zeros((31, 31), dtype=np.uint8)
        msk[12:19, 12:19] = 1  # central block, away from borders
        _, out_m = _rotate_by(img, msk, 30.0)
        assert abs(int(out_m.sum()) - 49) <= 10

    def test_negative_degrees_rejected(self):
        img, msk = grids()
        with pytest.raises(ValueError, match="degrees"):
            rotate(img, msk, -1.0, np.random.default_rng(0))


class TestAffine:
    def test_identity_parameters_are_bitexact(self):
        img, msk = grids(5)
        out_i, out_m = _affine_by(img, msk, 1.0, 0.0, 0.0, 0.0)
        assert np.array_equal(out_i, img)
        assert np.array_equal(out_m, msk)

    def test_integer_translation_shifts_columns(self):
        img, msk = grids(6)
        out_i, out_m = _affine_by(img, msk, 1.0, 0.0, 1.0, 0.0)
        assert np.array_equal(out_i[:, 1:], img[:, :-1])
        assert np.array_equal(out_i[:, 0], img[:, 0])  # border replication
        assert np.array_equal(out_m[:, 1:], msk[:, :-1])

    def test_scale_fixes_center_pixel(self):
        img, msk = grids(7, (21, 21))
        out_i, _ = _affine_by(img, msk, 2.0, 0.0, 0.0, 0.0)
        assert out_i[10, 10] == img[10, 10]

    def test_shear_fixes_center_row(self):
        img, msk = grids(8, (21, 21))
        out_i, _ = _affine_by(img, msk, 1.0, 0.3, 0.0, 0.0)
        assert np.array_equal(out_i[10], img[10])
        assert not np.array_equal(out_i[0], img[0])

    def test_draw_respects_config_bounds(self):
        img, msk = grids(9)
        cfg = AugmentConfig(scale_range=(0.95, 1.05))
        for seed in range(5):
            _, _, scale = affine(img, msk, cfg, np.random.default_rng(seed))
            assert 0.95 <= scale <= 1.05


class TestPipeline:
    def sample(self, seed=0):
        return synth_phantom(1, size=32, seed=seed)[0]

    def test_replay_is_bitexact(self):
        s = self.sample()
        cfg = AugmentConfig(seed=11)
        a = pipeline(s, cfg, 42)
        b = pipeline(s, cfg, 42)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
        assert a.spacing_mm == b.spacing_mm

    def test_different_index_differs(self):
        s = self.sample()
        cfg = AugmentConfig(seed=11, p_affine=1.0, p_elastic=1.0, p_rotate=1.0)
        a = pipeline(s, cfg, 0)
        b = pipeline(s, cfg, 1)
        assert not np.array_equal(a.image, b.image)

    def test_all_off_returns_original(self):
        s = self.sample(1)
        cfg = AugmentConfig(p_affine=0.0, p_elastic=0.0, p_rotate=0.0)
        out = pipeline(s, cfg, 5)
        assert np.array_equal(out.image, s.image)
        assert np.array_equal(out.mask, s.mask)
        assert out.spacing_mm == s.spacing_mm

    def test_contour_dropped_after_warp(self):
        s = self.sample(2)
        cfg = AugmentConfig(p_affine=1.0)
        assert pipeline(s, cfg, 0).truth_contour is None

    def test_affine_rescales_spacing_isotropically(self):
        s = self.sample(3)
        cfg = AugmentConfig(p_affine=1.0, p_elastic=0.0, p_rotate=0.0,
                            scale_range=(1.1, 1.25))
        out = pipeline(s, cfg, 0)
        rx = s.spacing_mm[0] / out.spacing_mm[0]
        ry = s.spacing_mm[1] / out.spacing_mm[1]
        assert rx == pytest.approx(ry)
        assert 1.1 <= rx <= 1.25  # zoomed in -> smaller physical pitch

    def test_mask_stays_binary_under_everything(self):
        s = self.sample(4)
        cfg = AugmentConfig(p_affine=1.0, p_elastic=1.0, p_rotate=1.0, seed=2)
        for i in range(8):
            out = pipeline(s, cfg, i)
            assert set(np.unique(out.mask)) <= {0, 1}
            assert out.image.shape == s.image.shape

    def test_ids_preserved(self):
        s = self.sample(5)
        out = pipeline(s, AugmentConfig(), 0)
        assert (out.case_id, out.slice_id) == (s.case_id, s.slice_id)


class TestExpand:
    def test_triples_a_realistic_corpus(self):
        samples = synth_phantom(805, size=32, seed=0)
        out = expand(samples, AugmentConfig(seed=1), copies=2)
        assert len(out) == 2415
        # originals come first, untouched
        assert all(out[i] is samples[i] for i in range(805))

    def test_copies_zero_and_validation(self):
        samples = synth_phantom(3, size=32, seed=0)
        assert expand(samples, AugmentConfig(), copies=0) == samples
        with pytest.raises(ValueError, match="copies"):
            expand(samples, AugmentConfig(), copies=-1)
