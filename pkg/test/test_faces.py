from dataclasses import replace

import numpy as np
import pytest

from nopeek.errors import RejectedInputError
from nopeek.faces import (
    AnomalyKind,
    TYPICAL_INTERVALS,
    default_face_params,
    displace_mouth,
    enlarge_eye,
    eye_region,
    inject_anomaly,
    render_face,
    sample_face_params,
)


def _outside(region, shape) -> np.ndarray:
    mask = np.ones(shape[:2], dtype=bool)
    mask[region.slices()] = False
    return mask


class TestRender:
    """
    Testing strategy:
    - parameters: sampled faces are typical, sampling is deterministic
    - rendering: value range, grayscale and color, noise only with a seed
    - glasses: every changed pixel lies in the eye region
    - rejection: canvas too small or with an unsupported channel count, head off canvas
    """

    def test_sampled_params_are_typical(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert sample_face_params(rng).is_typical()
        assert default_face_params().is_typical()

    def test_sampling_is_deterministic(self):
        assert sample_face_params(np.random.default_rng(3)) == sample_face_params(np.random.default_rng(3))

    @pytest.mark.parametrize("extents", [(64, 64, 1), (32, 48, 3), (8, 8, 1)])
    def test_range_and_shape(self, extents):
        image = render_face(sample_face_params(np.random.default_rng(1)), extents, noise_seed=2)
        assert image.shape == extents
        assert np.all(np.abs(image) <= 1)

    def test_noise_needs_seed(self):
        params = default_face_params()
        assert np.array_equal(render_face(params), render_face(params))
        assert not np.array_equal(render_face(params, noise_seed=1), render_face(params))
        assert np.array_equal(render_face(params, noise_seed=1), render_face(params, noise_seed=1))

    @pytest.mark.parametrize("seed", range(5))
    def test_glasses_confined_to_eye_region(self, seed):
        params = sample_face_params(np.random.default_rng(seed))
        plain = render_face(params, (64, 64, 1), noise_seed=seed)
        glasses = render_face(params, (64, 64, 1), glasses=True, noise_seed=seed)
        changed = np.any(plain != glasses, axis=2)
        assert changed.any()
        assert not changed[_outside(eye_region(params, (64, 64, 1)), plain.shape)].any()

    @pytest.mark.parametrize("extents", [(4, 64, 1), (64, 64, 2)])
    def test_bad_canvas_rejected(self, extents):
        with pytest.raises(RejectedInputError):
            render_face(default_face_params(), extents)

    def test_head_off_canvas_violates_rep(self):
        with pytest.raises(AssertionError):
            replace(default_face_params(), head_x=0.9)

    def test_intervals_cover_every_field(self):
        assert set(TYPICAL_INTERVALS) == set(default_face_params().to_dict())


class TestAnomalies:
    """
    Testing strategy:
    - every kind: something changes, nothing changes outside the returned region
    - identity parameters: zero mouth displacement, unit eye magnification
    - determinism for a seed
    - rejection: unknown kind, malformed image, non-positive magnification
    """

    @pytest.mark.parametrize("kind", list(AnomalyKind))
    @pytest.mark.parametrize("seed", range(4))
    def test_local_edit(self, kind, seed):
        params = sample_face_params(np.random.default_rng(seed))
        image = render_face(params, (64, 64, 1), noise_seed=seed)
        edited, region = inject_anomaly(image, kind, seed, params)
        assert edited.shape == image.shape
        assert np.all(np.abs(edited) <= 1)
        assert not np.array_equal(edited, image)
        outside = _outside(region, image.shape)
        assert np.array_equal(edited[outside], image[outside])

    def test_input_not_modified(self):
        image = render_face(default_face_params())
        before = image.copy()
        inject_anomaly(image, AnomalyKind.OCCLUDING_BLOCK, 0)
        assert np.array_equal(image, before)

    def test_deterministic_for_seed(self):
        image = render_face(default_face_params())
        first, region = inject_anomaly(image, AnomalyKind.TEXTURE_PATCH, 7)
        second, again = inject_anomaly(image, AnomalyKind.TEXTURE_PATCH, 7)
        assert np.array_equal(first, second) and region == again

    def test_zero_displacement_is_identity(self):
        params = default_face_params()
        image = render_face(params, noise_seed=4)
        moved, _ = displace_mouth(image, params, 0, 0)
        assert np.array_equal(moved, image)

    def test_unit_magnification_is_identity(self):
        params = default_face_params()
        image = render_face(params, noise_seed=4)
        enlarged, _ = enlarge_eye(image, params, 1.0)
        assert np.array_equal(enlarged, image)

    def test_unknown_kind_rejected(self):
        with pytest.raises(RejectedInputError, match="unknown anomaly kind"):
            inject_anomaly(render_face(default_face_params()), "melted-nose", 0)

    def test_malformed_image_rejected(self):
        with pytest.raises(RejectedInputError):
            inject_anomaly(np.zeros((64, 64)), AnomalyKind.OCCLUDING_BLOCK, 0)

    def test_non_positive_magnification_rejected(self):
        params = default_face_params()
        with pytest.raises(RejectedInputError):
            enlarge_eye(render_face(params), params, 0.0)
