import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fetalsamp import Affine, IntensityVolume, InvalidInputError, LabelVolume
from fetalsamp.preprocess import (DIRECT, UPSAMPLE, PreprocessConfig, center_training_template,
                                  crop_inference_input, plan_resample, resample_image,
                                  resample_labels, resample_labels_to)

from phantoms import random_labels


def world_of_nonzero(values, affine):
    idx = np.argwhere(values != 0)
    return affine.apply(idx), values[tuple(idx.T)]


def sort_rows(points, vals):
    order = np.lexsort(points.T[::-1])
    return points[order], vals[order]


class TestCenter:
    def test_cube_in_large_grid(self):
        labels = np.zeros((64, 64, 64), np.int32)
        labels[3:14, 40:51, 20:31] = 2
        vol = LabelVolume(labels, Affine.from_spacing((0.5, 0.5, 0.5)))
        out = center_training_template(vol, PreprocessConfig(training_target_shape=(32, 32, 32)))
        assert out.shape == (32, 32, 32)
        idx = np.argwhere(out.labels)
        assert idx.min(axis=0).tolist() == [10, 10, 10]
        assert idx.max(axis=0).tolist() == [20, 20, 20]
        a, _ = world_of_nonzero(labels, vol.affine)
        b, _ = world_of_nonzero(np.array(out.labels), out.affine)
        assert np.allclose(np.sort(a, axis=0), np.sort(b, axis=0), atol=1e-6)

    def test_already_centred(self):
        labels = np.zeros((12, 12, 12), np.int32)
        labels[3:9, 3:9, 3:9] = 4
        vol = LabelVolume(labels, Affine.from_spacing((1, 1, 1)))
        out = center_training_template(vol, PreprocessConfig(training_target_shape=(12, 12, 12)))
        assert out.equals(vol)

    def test_odd_padding_goes_high(self):
        labels = np.zeros((10, 1, 1), np.int32)
        labels[0:2, 0, 0] = 1
        vol = LabelVolume(labels, Affine.from_spacing((1, 1, 1)))
        out = center_training_template(vol, PreprocessConfig(training_target_shape=(5, 1, 1)))
        assert out.labels[:, 0, 0].tolist() == [0, 1, 1, 0, 0]

    def test_too_large(self):
        labels = np.ones((33, 33, 33), np.int32)
        vol = LabelVolume(labels, Affine.from_spacing((1, 1, 1)))
        with pytest.raises(InvalidInputError, match="33"):
            center_training_template(vol, PreprocessConfig(training_target_shape=(32, 32, 32)))


class TestCrop:
    def test_margin_five(self):
        img = np.zeros((40, 40, 40))
        img[7:18, 12:23, 20:31] = 1.0
        out = crop_inference_input(IntensityVolume(img, Affine.from_spacing((0.8, 0.8, 0.8))))
        assert out.shape == (21, 21, 21)

    def test_full_grid_margin_zero_is_identity(self, rng):
        img = rng.uniform(1, 2, (5, 6, 7))
        vol = IntensityVolume(img, Affine.from_spacing((1, 1, 1)))
        out = crop_inference_input(vol, PreprocessConfig(inference_margin=0))
        assert np.array_equal(out.values, img)
        assert np.array_equal(out.affine.matrix, vol.affine.matrix)

    def test_single_voxel(self):
        img = np.zeros((9, 9, 9))
        img[1, 7, 4] = 3.0
        out = crop_inference_input(IntensityVolume(img, Affine.from_spacing((1, 1, 1))))
        assert out.shape == (11, 11, 11)
        assert out.values[5, 5, 5] == 3.0
        assert np.count_nonzero(out.values) == 1

    def test_all_zero(self):
        with pytest.raises(InvalidInputError):
            crop_inference_input(IntensityVolume(np.zeros((3, 3, 3)), Affine.from_spacing((1, 1, 1))))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), margin=st.integers(0, 6))
def test_crop_preserves_mass_and_world_positions(seed, margin):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 10, (12, 10, 9)) * (rng.random((12, 10, 9)) < 0.05)
    img[rng.integers(0, 12), rng.integers(0, 10), rng.integers(0, 9)] = 1.0
    m = np.diag([*rng.uniform(0.4, 1.2, 3), 1.0])
    m[:3, 3] = rng.normal(scale=40, size=3)
    vol = IntensityVolume(img, Affine(m))
    out = crop_inference_input(vol, PreprocessConfig(inference_margin=margin))
    assert np.count_nonzero(out.values) == np.count_nonzero(img)
    assert math.fsum(out.values.ravel()) == math.fsum(img.ravel())
    pa, va = sort_rows(*world_of_nonzero(img, vol.affine))
    pb, vb = sort_rows(*world_of_nonzero(out.values, out.affine))
    assert np.max(np.abs(pa - pb)) <= 1e-6
    assert np.array_equal(va, vb)


class TestPlan:
    @pytest.mark.parametrize("spacing, action", [
        ((1.125, 1.125, 1.125), UPSAMPLE),
        ((1.0, 1.0, 1.0), UPSAMPLE),
        ((0.5, 0.5, 0.5), DIRECT),
        ((0.8, 0.8, 0.8), DIRECT),
        ((0.5, 0.5, 3.0), UPSAMPLE),
    ])
    def test_threshold(self, spacing, action):
        plan = plan_resample(Affine.from_spacing(spacing))
        assert plan.action == action
        if action == DIRECT:
            assert plan.working_spacing == spacing
        else:
            assert plan.working_spacing == (0.6, 0.6, 0.6)

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            PreprocessConfig(upsample_target_mm=1.2)
        with pytest.raises(InvalidInputError):
            PreprocessConfig(inference_margin=-1)


class TestResample:
    def test_identity(self, rng):
        img = rng.normal(size=(6, 7, 8))
        vol = IntensityVolume(img, Affine.from_spacing((0.8, 0.9, 1.0)))
        out = resample_image(vol, (0.8, 0.9, 1.0))
        assert out.shape == img.shape
        assert np.max(np.abs(out.values - img)) < 1e-6

    def test_constant(self):
        vol = IntensityVolume(np.full((5, 5, 5), 2.5), Affine.from_spacing((1.0, 1.0, 1.0)))
        out = resample_image(vol, 0.6)
        assert np.allclose(out.values, 2.5, atol=1e-12)

    def test_ramp(self):
        m = np.diag([1.125, 1.125, 1.125, 1.0])
        m[:3, 3] = [-10.0, 4.0, 2.0]
        aff = Affine(m)
        idx = np.indices((9, 8, 7)).reshape(3, -1).T
        world = aff.apply(idx)
        coef = np.array([0.3, -1.2, 2.0])
        img = (world @ coef + 5.0).reshape(9, 8, 7)
        out = resample_image(IntensityVolume(img, aff), 0.6)
        out_world = out.affine.apply(np.indices(out.shape).reshape(3, -1).T)
        assert np.allclose(out.affine.voxel_spacing, 0.6)
        assert np.max(np.abs(out.values.ravel() - (out_world @ coef + 5.0))) < 1e-6

    def test_label_identity_and_single_label(self, rng):
        vol = LabelVolume(random_labels(rng, (8, 9, 10)), Affine.from_spacing((1, 1, 1)))
        assert resample_labels_to(vol, vol.affine, vol.shape).equals(vol)
        single = LabelVolume(np.full((6, 6, 6), 3), Affine.from_spacing((1, 1, 1)))
        assert np.unique(resample_labels(single, 0.5).labels).tolist() == [3]

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_label_up_down_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        vol = LabelVolume(random_labels(rng, (10, 11, 12)), Affine.from_spacing((1.0, 1.0, 1.0)))
        up = resample_labels(vol, 0.5)
        back = resample_labels_to(up, vol.affine, vol.shape)
        assert back.equals(vol)
