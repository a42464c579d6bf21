import numpy as np
import pytest

from cascade_mvs.cost_volume import (
    CostVolume,
    build_cost_volume,
    regularize,
    regularize_backward,
    soft_argmin,
    warp_feature,
)
from cascade_mvs.errors import NonPositiveTemperature, NoSourceViews, ShapeMismatch
from cascade_mvs.features import fixed_pyramid
from cascade_mvs.geometry import CameraParams, intrinsics
from cascade_mvs.io import dump_volume, load_volume
from cascade_mvs.synth import SceneSpec, generate_scene


def volume(cost, mask=None):
    cost = np.asarray(cost, dtype=np.float64)
    return CostVolume(cost, np.ones_like(cost) if mask is None else mask)


def test_warp_identity(rng):
    src = rng.normal(size=(2, 5, 6))
    out, mask = warp_feature(src, np.eye(3))
    np.testing.assert_array_equal(out, src)
    assert mask.all()


def test_warp_integer_translation(rng):
    src = rng.normal(size=(1, 4, 8))
    H = np.array([[1.0, 0, 3], [0, 1, 0], [0, 0, 1]])  # samples x + 3, i.e. shifts content by -3
    out, mask = warp_feature(src, H)
    np.testing.assert_array_equal(out[:, :, :5], src[:, :, 3:])
    assert np.all(mask[:, 5:] == 0) and np.all(mask[:, :5] == 1)
    assert np.all(out[:, :, 5:] == 0)


def test_warp_half_pixel_ramp():
    src = np.tile(np.arange(10.0) ** 2, (3, 1))[None]
    H = np.array([[1.0, 0, 0.5], [0, 1, 0], [0, 0, 1]])
    out, _ = warp_feature(src, H)
    oracle = 0.5 * (src[0, :, :-1] + src[0, :, 1:])
    np.testing.assert_allclose(out[0, :, :-1], oracle, atol=1e-12)


def identity_cams(n):
    K = intrinsics(50.0, 4.0, 4.0)
    return [CameraParams(K, np.eye(3), np.zeros(3)) for _ in range(n)]


def test_identical_views_zero_cost(rng):
    f = rng.normal(size=(3, 8, 8))
    cams = identity_cams(3)
    cv = build_cost_volume(f, [f, f], cams[0], cams[1:], np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(cv.cost, 0.0, atol=1e-24)  # the mean of equal values may round
    assert np.all(cv.mask == 1)


def test_two_view_variance():
    cams = identity_cams(2)
    cv = build_cost_volume(np.ones((1, 2, 2)), [3 * np.ones((1, 2, 2))], cams[0], cams[1:], np.array([2.0]))
    np.testing.assert_allclose(cv.cost, 1.0)


def test_permutation_invariance(rng):
    f = [rng.normal(size=(2, 8, 10)) for _ in range(4)]
    ref = CameraParams(intrinsics(20.0, 5.0, 4.0), np.eye(3), np.zeros(3))
    srcs = [CameraParams(ref.K, np.eye(3), -np.array([0.3 * i, 0.1, 0.0])) for i in (1, 2, 3)]
    hyps = np.linspace(2.0, 6.0, 5)
    a = build_cost_volume(f[0], f[1:], ref, srcs, hyps)
    b = build_cost_volume(f[0], [f[3], f[1], f[2]], ref, [srcs[2], srcs[0], srcs[1]], hyps)
    np.testing.assert_allclose(a.cost, b.cost, atol=1e-12)
    np.testing.assert_allclose(a.mask, b.mask, atol=1e-15)


def test_build_errors(rng):
    f = rng.normal(size=(2, 4, 4))
    cams = identity_cams(2)
    with pytest.raises(NoSourceViews):
        build_cost_volume(f, [], cams[0], [], np.array([1.0]))
    with pytest.raises(ShapeMismatch):
        build_cost_volume(f, [f], cams[0], cams[1:], np.ones((3, 5, 5)))


def test_fronto_plane_argmin_is_nearest_hypothesis():
    spec = SceneSpec(kind="fronto", depth=683.0, verge=False, baseline=60.0)
    scene = generate_scene(spec, seed=5)
    feats = [fixed_pyramid(im)[2] for im in scene.images]
    hyps = np.arange(560.0, 800.0, 20.0)
    cv = build_cost_volume(feats[0], feats[1:], scene.cams[0], scene.cams[1:], hyps)
    interior = (cv.mask == 1).all(axis=0)
    interior[:3] = interior[-3:] = False
    interior[:, :3] = interior[:, -3:] = False
    best = np.argmin(cv.cost, axis=0)[interior]
    nearest = np.argmin(np.abs(hyps - 683.0))
    assert (best == nearest).mean() >= 0.99


def test_constant_cost_uniform():
    pv = regularize(volume(np.full((4, 3, 3), 2.0)))
    np.testing.assert_allclose(pv.prob, 0.25, atol=1e-15)


def test_saturated_softmax():
    cost = np.full((3, 1, 1), 20.0)
    cost[1] = 0.0
    pv = regularize(volume(cost), 0, 0, temperature=1.0)
    assert pv.prob[1, 0, 0] >= 1 - 1e-6


def test_softmax_example():
    cost = np.array([0.0, 1.0, 2.0]).reshape(3, 1, 1)
    pv = regularize(volume(cost), 0, 0, temperature=1.0)
    np.testing.assert_allclose(pv.prob.ravel(), [0.6652, 0.2447, 0.0900], atol=5e-5)
    e = np.exp([0.0, -1.0, -2.0])
    np.testing.assert_allclose(pv.prob.ravel(), e / e.sum(), atol=1e-15)


def test_nonpositive_temperature():
    with pytest.raises(NonPositiveTemperature):
        regularize(volume(np.ones((2, 2, 2))), temperature=0.0)


def test_unseen_pixels_uniform_and_invalid(rng):
    mask = np.ones((4, 3, 3))
    mask[:, 1, 1] = 0.0
    pv = regularize(volume(rng.uniform(size=(4, 3, 3)), mask))
    np.testing.assert_allclose(pv.prob[:, 1, 1], 0.25)
    assert not pv.valid[1, 1] and pv.valid.sum() == 8


@pytest.mark.parametrize("probs, expect", [([0.25, 0.5, 0.25], 3.0), ([0.1, 0.2, 0.7], 3.6), ([0, 1, 0], 3.0)])
def test_soft_argmin_examples(probs, expect):
    p = np.array(probs, dtype=float).reshape(3, 1, 1)
    assert soft_argmin(p, np.array([2.0, 3.0, 4.0]))[0, 0] == pytest.approx(expect, abs=1e-12)


def test_soft_argmin_one_hot_exact(rng):
    hyps = np.sort(rng.uniform(1, 9, size=(5, 2, 2)), axis=0)
    p = np.zeros((5, 2, 2))
    p[2] = 1.0
    np.testing.assert_array_equal(soft_argmin(p, hyps), hyps[2])


def test_regularize_soft_argmin_gradient(rng):
    cost = rng.uniform(0.5, 2.0, size=(5, 4, 4))
    hyps = np.linspace(1.0, 2.0, 5)
    g = rng.normal(size=(4, 4))

    def f(c):
        return float((soft_argmin(regularize(volume(c)).prob, hyps) * g).sum())

    cv = volume(cost)
    pv = regularize(cv)
    dprob = hyps[:, None, None] * g[None]
    analytic = regularize_backward(dprob, pv, cv)
    eps = 1e-4
    worst = 0.0
    for idx in np.ndindex(cost.shape):
        c = cost.copy()
        c[idx] += eps
        up = f(c)
        c[idx] -= 2 * eps
        num = (up - f(c)) / (2 * eps)
        a = analytic[idx]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
    assert worst <= 1e-4


def test_volume_dump_round_trip(tmp_path, rng):
    v = rng.normal(size=(3, 4, 5)).astype(np.float32).astype(np.float64)
    dump_volume(tmp_path / "v.bin", v)
    assert (tmp_path / "v.bin").read_bytes()[:4] == b"VOL1"
    np.testing.assert_array_equal(load_volume(tmp_path / "v.bin"), v)
