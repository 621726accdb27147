import numpy as np
import pytest

from data.phantom import gen_phantom
from inference import axis_origins, blend_window, super_resolve, tile_volume
from models.swin_fod import identity_model, init_params
from utils.config import ModelConfig
from utils.metrics import region_mask


@pytest.fixture(scope='module')
def small_model():
    config = ModelConfig.from_dict({'patch_size': 16, 'embed_dim': 12, 'window_size': 4,
                                    'depths': [1, 1], 'num_heads': [2, 4]})
    return init_params(config, seed=0).eval()


def test_full_size_tiling():
    plan = tile_volume((145, 174, 145), (96, 96, 96), overlap=0.25)
    assert plan.stride == (72, 72, 72)
    assert plan.origins[0] == [0, 49]
    assert plan.origins[1] == [0, 72, 78]
    assert len(plan) == 2 * 3 * 2


def test_cube_tiling_and_pass_count():
    plan = tile_volume((64, 64, 64), (32, 32, 32), overlap=0.25)
    assert plan.origins == ([0, 24, 32],) * 3
    assert len(plan) == 27
    assert len(plan) / 64 ** 3 < 0.001


def test_zero_overlap_tiles_are_disjoint():
    plan = tile_volume((32, 32, 32), (16, 16, 16), overlap=0.0)
    assert len(plan) == 8
    assert np.all(plan.weight_sum() == 1.0)


@pytest.mark.parametrize('dims, patch, overlap', [((24, 24, 24), (16, 16, 16), 0.25), ((30, 17, 9), (8, 8, 8), 0.5),
                                                  ((16, 16, 16), (16, 16, 16), 0.9)])
@pytest.mark.parametrize('blend', ['uniform', 'cosine'])
def test_every_voxel_is_covered(dims, patch, overlap, blend):
    plan = tile_volume(dims, patch, overlap, blend)
    total = plan.weight_sum()
    assert np.all(total > 0)
    normalized = sum(np.pad(plan.blend, [(o, d - o - p) for o, d, p in zip(s.origin, dims, patch)])
                     for s in plan.specs) / total
    np.testing.assert_allclose(normalized, 1.0, atol=1e-9)


def test_axis_origins_clamp_last():
    assert axis_origins(10, 4, 3) == [0, 3, 6]
    assert axis_origins(11, 4, 3) == [0, 3, 6, 7]
    assert axis_origins(4, 4, 1) == [0]


def test_blend_windows():
    assert np.all(blend_window((4, 4, 4)) == 1.0)
    cosine = blend_window((8, 8, 8), 'cosine')
    assert cosine.min() > 0
    assert cosine[4, 4, 4] > cosine[0, 0, 0]
    with pytest.raises(ValueError):
        blend_window((4, 4, 4), 'gaussian')


@pytest.mark.parametrize('dims, patch, overlap', [((8, 8, 8), (16, 8, 8), 0.25), ((16, 16, 16), (8, 8, 8), 1.0)])
def test_invalid_tiling(dims, patch, overlap):
    with pytest.raises(ValueError):
        tile_volume(dims, patch, overlap)


def test_identity_model_reproduces_48_cube():
    target, _ = gen_phantom((48, 48, 48), seed=0)
    model = identity_model(patch_size=16)
    result = super_resolve(model, target, overlap=0.25, batch_size=4)
    np.testing.assert_allclose(result.volume.data, target.data, atol=1e-5, rtol=0)
    assert result.forward_passes == 4 ** 3
    assert result.voxelwise_passes == 48 ** 3
    assert result.cost_ratio < 0.001


def test_identity_with_cosine_blend(small_subject):
    model = identity_model(patch_size=16, embed_dim=12, num_heads=[2, 4])
    result = super_resolve(model, small_subject.input, overlap=0.5, blend='cosine')
    np.testing.assert_allclose(result.volume.data, small_subject.input.data, atol=1e-5, rtol=0)


def test_tile_order_does_not_matter(small_subject, small_model):
    forward = super_resolve(small_model, small_subject.input, overlap=0.25)
    n = forward.forward_passes
    shuffled = super_resolve(small_model, small_subject.input, overlap=0.25, batch_size=3,
                             order=np.random.default_rng(0).permutation(n))
    np.testing.assert_allclose(shuffled.volume.data, forward.volume.data, atol=1e-6, rtol=0)
    assert shuffled.volume.data.shape == small_subject.input.data.shape


def test_mask_passes_outside_voxels_through(small_subject, small_model):
    mask = region_mask(small_subject.fractions, 'WM')
    result = super_resolve(small_model, small_subject.input, mask=mask)
    np.testing.assert_array_equal(result.volume.data[~mask], small_subject.input.data[~mask])
    assert result.voxelwise_passes == int(mask.sum())


def test_super_resolve_input_checks(small_subject, small_model):
    with pytest.raises(ValueError):
        super_resolve(small_model, small_subject.input.copy_with(small_subject.input.data[..., :15]))
    with pytest.raises(ValueError):
        super_resolve(small_model, small_subject.input, order=[0, 0, 1])
    with pytest.raises(ValueError):
        super_resolve(small_model, small_subject.input, mask=np.ones((4, 4, 4), dtype=bool))
