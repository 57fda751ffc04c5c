import numpy as np
import pytest
from scipy import ndimage

from ffnseg.errors import ConfigError, PlacementError
from ffnseg.metrics import Skeleton
from ffnseg.synth import SynthConfig, generate_world, rasterize_gt_labels


def test_world_is_deterministic():
    a, b = generate_world(SynthConfig(seed=5)), generate_world(SynthConfig(seed=5))
    assert a.image == b.image and a.segmentation == b.segmentation
    assert a.skeletons == b.skeletons
    assert generate_world(SynthConfig(seed=6)).image != a.image


@pytest.mark.parametrize("seed", range(5))
def test_world_structure(seed):
    cfg = SynthConfig(seed=seed)
    w = generate_world(cfg)
    labels = w.segmentation.labels
    ids = sorted(int(v) for v in np.unique(labels) if v)
    assert cfg.n_objects[0] <= len(ids) <= cfg.n_objects[1]
    assert ids == sorted(s.id for s in w.skeletons)
    assert w.image.dims == cfg.dims
    # every skeleton node lies inside its own object
    for s in w.skeletons:
        assert np.all(labels[tuple(s.nodes.T)] == s.id)
    # distinct objects keep at least `gap` background voxels between them
    footprint = np.ones((2 * cfg.gap + 1,) * 3, bool)
    for oid in ids:
        grown = ndimage.binary_dilation(labels == oid, structure=footprint)
        others = labels[grown]
        assert set(np.unique(others).tolist()) <= {0, oid}


def test_image_contrast():
    cfg = SynthConfig(seed=1)
    w = generate_world(cfg)
    fg = w.segmentation.labels > 0
    assert w.image.voxels[fg].mean() > 0.7
    assert w.image.voxels[~fg].mean() < 0.4
    assert 0.0 <= w.image.voxels.min() and w.image.voxels.max() <= 1.0


def test_placement_error_when_volume_too_small():
    cfg = SynthConfig(dims=(12, 12, 12), n_objects=(30, 30), tube_radius=(3, 3),
                      blob_radius=(4, 4), tube_length=(5, 8), max_retries=20)
    with pytest.raises(PlacementError):
        generate_world(cfg)


@pytest.mark.parametrize("kw", [dict(gap=0), dict(dims=(0, 4, 4)), dict(tube_radius=(3, 2)),
                                dict(blob_radius=(40, 40)), dict(noise=-1)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SynthConfig(**kw)


def test_rasterize_overlap_and_disjoint():
    a = Skeleton(1, [(2, 2, 2), (3, 2, 2)], [(0, 1)])
    b = Skeleton(2, [(8, 8, 2)], [])
    seg = rasterize_gt_labels([a, b], (12, 12, 5), radius=1.5)
    assert seg.labels[2, 2, 2] == 1 and seg.labels[8, 8, 2] == 2
    c = Skeleton(3, [(4, 2, 2)], [])
    with pytest.raises(ValueError, match="overlap"):
        rasterize_gt_labels([a, c], (12, 12, 5), radius=1.5)
