import numpy as np
import pytest

from ease.crs import crs_refine
from ease.evalx import skeletonize
from ease.synth import SynthSpec, gen_blob_scene, gen_crack_scene
from ease.tensors import cosine_sim


def test_blob_scene_shapes_and_stochastic_attention():
    spec = SynthSpec(seed=1, regions=3, noise=0.05)
    f_lr, f_hr, attn, gt = gen_blob_scene(spec)
    assert f_lr.data.shape == (8, 4, 4)
    assert f_hr.data.shape == (8, 32, 32)
    assert attn.rows.shape == (32 * 32, 16)
    assert np.allclose(attn.rows.sum(axis=1), 1.0, atol=1e-5)
    assert set(np.unique(gt.labels)) == {1, 2, 3}


def test_blob_scene_single_region():
    f_lr, f_hr, attn, gt = gen_blob_scene(SynthSpec(seed=2, regions=1))
    assert np.all(gt.labels == 1)
    assert np.allclose(f_hr.data, f_hr.data[:, :1, :1], atol=1e-6)


def test_blob_scene_reproducible_bytes():
    a = gen_blob_scene(SynthSpec(seed=3, regions=4, noise=0.1))
    b = gen_blob_scene(SynthSpec(seed=3, regions=4, noise=0.1))
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()
    assert a[2].rows.tobytes() == b[2].rows.tobytes()
    assert a[3].labels.tobytes() == b[3].labels.tobytes()


def test_blob_scene_zero_noise_crs_recovers_regions():
    spec = SynthSpec(seed=4, regions=3, noise=0.0, margin=0.3)
    f_lr, f_hr, attn, gt = gen_blob_scene(spec)
    d = crs_refine(f_lr, f_hr, attn, tau=0.97)
    assert d.k == 3


def test_blob_scene_gt_compact_and_means_separated():
    spec = SynthSpec(seed=5, regions=5, margin=0.3)
    _, f_hr, _, gt = gen_blob_scene(spec)
    ids = gt.segment_ids()
    assert list(ids) == list(range(1, len(ids) + 1))
    # region means recovered from pixels respect the margin
    means = []
    for i in ids:
        m = gt.labels == i
        means.append(np.array([f_hr.data[c][m].mean() for c in range(8)]))
    for i in range(len(means)):
        for j in range(i + 1, len(means)):
            assert cosine_sim(means[i], means[j]) <= 0.7 + 1e-6


def test_blob_scene_explicit_means_validated():
    good = np.eye(8)[:3]
    spec = SynthSpec(seed=6, regions=3, means=tuple(map(tuple, good)))
    f_lr, f_hr, attn, gt = gen_blob_scene(spec)
    assert set(np.unique(gt.labels)) == {1, 2, 3}
    bad = np.stack([np.ones(8), np.ones(8), np.eye(8)[0]])
    with pytest.raises(ValueError):
        gen_blob_scene(SynthSpec(seed=6, regions=3, means=tuple(map(tuple, bad))))


def test_crack_scene_straight_line_skeleton_is_itself():
    spec = SynthSpec(seed=7, hr_shape=(16, 16), lr_shape=(4, 4), line_orientation="horizontal")
    f, labels = gen_crack_scene(spec)
    mask = labels.labels == 2
    assert mask.sum() == 16
    assert np.array_equal(skeletonize(mask), mask)


def test_crack_scene_exact_direction_separation():
    spec = SynthSpec(seed=8, margin=0.1, contrast=6.0, line_orientation="vertical")
    f, labels = gen_crack_scene(spec)
    bg_mean = f.pixels()[(labels.labels == 1).ravel()].mean(axis=0)
    crack_mean = f.pixels()[(labels.labels == 2).ravel()].mean(axis=0)
    assert cosine_sim(bg_mean, crack_mean) == pytest.approx(0.9, abs=1e-5)
    assert np.linalg.norm(crack_mean) == pytest.approx(6.0, rel=1e-5)


def test_crack_scene_empty_line_is_pure_background():
    f, labels = gen_crack_scene(SynthSpec(seed=9, contrast=0.0))
    assert np.all(labels.labels == 1)
    assert np.allclose(f.data, f.data[:, :1, :1], atol=1e-6)


def test_crack_scene_two_px_width():
    spec = SynthSpec(seed=10, hr_shape=(12, 12), lr_shape=(4, 4), line_width=2, line_orientation="horizontal")
    _, labels = gen_crack_scene(spec)
    assert (labels.labels == 2).sum() == 24
