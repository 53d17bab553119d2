import colorsys
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierinv import augment as aug

IMG = st.integers(0, 2 ** 31 - 1).map(lambda s: np.random.default_rng(s).random((3, 8, 8, 3)).astype(np.float32))


def all_steps():
    return [aug.default_step(k) for k in aug.APPLY_ORDER]


def test_add_one_pipelines_nest():
    p = aug.build_pipelines("C,G,B,F")
    assert p.kinds(1) == {aug.CROP, aug.COLOR}
    for i in range(1, 4):
        added = p.kinds(i + 1) - p.kinds(i)
        assert p.kinds(i) < p.kinds(i + 1) and len(added) == 1
    assert p.kinds(4) == {aug.CROP, aug.COLOR, aug.GRAY, aug.BLUR, aug.FLIP}


def test_arrangement_order_is_respected():
    p = aug.build_pipelines(("F", "B", "G", "C"))
    assert p.kinds(1) == {aug.CROP, aug.FLIP}
    assert p.kinds(2) - p.kinds(1) == {aug.BLUR}


def test_uniform_mode_uses_everything_everywhere():
    p = aug.build_pipelines(mode="uniform")
    assert all(p.stages[i] == p.stages[0] for i in range(4))
    assert len(p.kinds(1)) == 5


def test_hierarchical_strength_grows_with_depth():
    p = aug.build_pipelines(mode="hierarchical_strength")
    deltas = [p.step(i, aug.COLOR).jitter_max[0] for i in range(1, 5)]
    assert deltas == sorted(deltas) and deltas[-1] == pytest.approx(0.4)
    assert [p.step(i, aug.FLIP).probability for i in range(1, 5)] == pytest.approx([0.125, 0.25, 0.375, 0.5])
    assert p.step(1, aug.CROP) == p.step(4, aug.CROP)


def test_rotation_added_from_requested_stage():
    p = aug.build_pipelines(rotation_from_stage=3)
    assert [aug.ROTATION in p.kinds(i) for i in range(1, 5)] == [False, False, True, True]
    assert aug.ROTATION not in aug.build_pipelines().kinds(4)


@pytest.mark.parametrize("arrangement,mode,rot", [("C,G,B", "hierarchical", None), ("C,C,B,F", "hierarchical", None),
                                                 ("C,G,B,X", "hierarchical", None), ("C,G,B,F", "magic", None),
                                                 ("C,G,B,F", "uniform", 5)])
def test_pipeline_errors(arrangement, mode, rot):
    with pytest.raises(aug.PipelineError):
        aug.build_pipelines(arrangement, mode, rot)


def test_step_spec_validation():
    with pytest.raises(aug.PipelineError):
        aug.AugStepSpec(aug.BLUR, 0.5, sigma_range=(2.0, 1.0))
    with pytest.raises(aug.PipelineError):
        aug.AugStepSpec(aug.CROP, 1.5)
    with pytest.raises(aug.PipelineError):
        aug.AugStepSpec("sharpen")


def test_identity_crop_is_exact_copy():
    x = np.random.default_rng(0).random((2, 32, 32, 3)).astype(np.float32)
    out = aug.crop_resize(x, np.tile([0, 0, 1, 1], (2, 1)), 32)
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_crop_resize_matches_scalar_bilinear_oracle():
    rng = np.random.default_rng(1)
    x = rng.random((1, 6, 5, 3)).astype(np.float32)
    box = np.array([[0.2, 0.1, 0.6, 0.5]])
    got = aug.crop_resize(x, box, 4)[0]
    for oy in range(4):
        for ox in range(4):
            py = min(max((0.1 + (oy + 0.5) / 4 * 0.6) * 6 - 0.5, 0), 5)
            px = min(max((0.2 + (ox + 0.5) / 4 * 0.5) * 5 - 0.5, 0), 4)
            y0, x0 = int(math.floor(py)), int(math.floor(px))
            y1, x1 = min(y0 + 1, 5), min(x0 + 1, 4)
            fy, fx = py - y0, px - x0
            want = ((1 - fy) * ((1 - fx) * x[0, y0, x0] + fx * x[0, y0, x1])
                    + fy * ((1 - fx) * x[0, y1, x0] + fx * x[0, y1, x1]))
            np.testing.assert_allclose(got[oy, ox], want, atol=1e-5)


@given(IMG)
@settings(max_examples=25, deadline=None)
def test_flip_and_rotation_are_involutions(x):
    np.testing.assert_array_equal(aug.flip(aug.flip(x, True), True), x)
    np.testing.assert_array_equal(aug.rotate(aug.rotate(x, 2), 2), x)
    np.testing.assert_array_equal(aug.rotate(aug.rotate(x, 1), 3), x)


@given(IMG)
@settings(max_examples=25, deadline=None)
def test_grayscale_has_equal_channels(x):
    g = aug.grayscale(x)
    assert np.array_equal(g[..., 0], g[..., 1]) and np.array_equal(g[..., 1], g[..., 2])
    np.testing.assert_allclose(g[..., 0], 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2], atol=1e-6)


@given(IMG, st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_views_stay_in_unit_range(x, seed):
    params = aug.sample_params(all_steps(), x.shape[0], np.random.default_rng(seed))
    v = aug.apply_params(x, params, 8)
    assert v.shape == x.shape and v.dtype == np.float32
    assert v.min() >= 0.0 and v.max() <= 1.0


@given(IMG, st.integers(0, 2 ** 31 - 1))
@settings(max_examples=15, deadline=None)
def test_sample_view_replays_exactly(x, seed):
    a, pa = aug.sample_view(x[0], all_steps(), seed, 8)
    b, pb = aug.sample_view(x[0], all_steps(), seed, 8)
    assert a.tobytes() == b.tobytes() and pa == pb
    # the recorded parameters reproduce the view
    again = aug.apply_params(x[:1], aug.AugBatch.from_params([pa], {s.kind for s in all_steps()}), 8)[0]
    assert again.tobytes() == a.tobytes()


def test_view_rng_streams_are_distinct_and_stable():
    a = aug.view_rng(0, 0, 0).random(4)
    assert np.array_equal(a, aug.view_rng(0, 0, 0).random(4))
    assert not np.array_equal(a, aug.view_rng(0, 0, 1).random(4))
    assert not np.array_equal(a, aug.view_rng(0, 1, 0).random(4))


def test_shift_hue_matches_colorsys():
    rng = np.random.default_rng(0)
    x = rng.random((1, 5, 5, 3)).astype(np.float32)
    out = aug.shift_hue(x, 0.3)[0]
    for i in range(5):
        for j in range(5):
            h, s, v = colorsys.rgb_to_hsv(*map(float, x[0, i, j]))
            want = colorsys.hsv_to_rgb((h + 0.3) % 1.0, s, v)
            np.testing.assert_allclose(out[i, j], want, atol=1e-5)


def test_identity_jitter_is_noop():
    x = np.random.default_rng(0).random((2, 4, 4, 3)).astype(np.float32)
    out = aug.color_jitter(x, np.tile([1, 1, 1, 0], (2, 1)), np.tile(np.arange(4), (2, 1)))
    assert np.array_equal(out, x)


def test_jitter_order_matters():
    x = np.full((1, 2, 2, 3), [0.8, 0.3, 0.2], np.float32)
    j = np.array([[1.4, 0.6, 1.0, 0.0]])
    a = aug.color_jitter(x, j, np.array([[0, 1, 2, 3]]))
    b = aug.color_jitter(x, j, np.array([[1, 0, 2, 3]]))
    assert not np.allclose(a, b)


def test_blur_preserves_constant_image_and_smooths_impulse():
    x = np.full((1, 5, 5, 3), 0.4, np.float32)
    np.testing.assert_allclose(aug.gaussian_blur(x, 1.0), x, atol=1e-6)
    imp = np.zeros((1, 5, 5, 3), np.float32)
    imp[0, 2, 2] = 1.0
    out = aug.gaussian_blur(imp, 1.0)
    k = np.exp(-np.array([1.0, 0.0, 1.0]) / 2)
    k /= k.sum()
    np.testing.assert_allclose(out[0, 1:4, 1:4, 0], np.outer(k, k), atol=1e-6)


def test_rotation_frequency_and_turn_distribution():
    steps = [aug.default_step(aug.CROP), aug.default_step(aug.ROTATION)]
    p = aug.sample_params(steps, 10_000, np.random.default_rng(0))
    assert abs(p.rot_applied.mean() - 0.5) <= 0.02
    turns = p.rot[p.rot_applied]
    counts = np.bincount(turns, minlength=4) / len(turns)
    assert np.all(np.abs(counts - 0.25) <= 0.02)
    assert np.all(p.rot[~p.rot_applied] == 0)


def jitter_bucket_oracle(row, n_buckets=10, dmax=(0.4, 0.4, 0.4, 0.1)):
    ident = (1.0, 1.0, 1.0, 0.0)
    s = math.sqrt(sum(((float(v) - i) / m) ** 2 for v, i, m in zip(row, ident, dmax)) / 4)
    return min(int(math.floor(s * n_buckets)), n_buckets - 1)


def test_balanced_jitter_buckets_match_oracle_and_are_balanced():
    jit, labels = aug.sample_balanced_jitter(30, np.random.default_rng(0))
    assert jit.dtype == np.float32
    assert np.array_equal(np.bincount(labels), np.full(10, 30))
    assert [jitter_bucket_oracle(r) for r in jit] == labels.tolist()
    assert np.all(np.abs(jit - [1, 1, 1, 0]) <= np.array([0.4, 0.4, 0.4, 0.1]) + 1e-6)


def test_jitter_strength_extremes():
    assert aug.jitter_strength_bucket([[1, 1, 1, 0]])[0] == 0
    assert aug.jitter_strength_bucket([[1.4, 0.6, 1.4, -0.1]])[0] == 9


def test_param_vector_layout():
    p = aug.AugParams(crop=(0.1, 0.2, 0.5, 0.6), flip_applied=True, jitter=(1.1, 0.9, 1.2, 0.05),
                      grayscale_applied=True, blur_sigma=0.7, rotation_quarter_turns=3, rotation_applied=True)
    assert p.to_vector().tolist() == pytest.approx([0.1, 0.2, 0.5, 0.6, 1, 1.1, 0.9, 1.2, 0.05, 1, 0.7, 3])
    assert len(aug.VECTOR_FIELDS) == 12


def test_generate_pairs_shapes_and_independence():
    x = np.random.default_rng(0).random((4, 32, 32, 3)).astype(np.float32)
    pairs = aug.generate_pairs(x, aug.build_pipelines(), np.random.default_rng(1))
    assert len(pairs) == 4
    for i, (a, b, pa, pb) in enumerate(pairs, start=1):
        assert a.shape == b.shape == (4, 32, 32, 3)
        assert not np.array_equal(pa.crop, pb.crop)
        assert pa.kinds == aug.build_pipelines().kinds(i)
