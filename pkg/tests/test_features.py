import numpy as np
import pytest

from cascade_mvs.errors import BadDimensions
from cascade_mvs.features import (
    FeatureWeights,
    apply_conv,
    apply_conv_backward,
    extract_pyramid,
    fixed_pyramid,
)
from cascade_mvs.io import dump_features, load_features


def test_pyramid_shapes(rng):
    img = rng.uniform(size=(96, 128, 3))
    shapes = [f.shape for f in extract_pyramid(img)]
    assert shapes == [(4, 24, 32), (4, 48, 64), (4, 96, 128)]
    trained = extract_pyramid(img, FeatureWeights.init(8, seed=3))
    assert [f.shape for f in trained] == [(8, 24, 32), (8, 48, 64), (8, 96, 128)]


def test_bad_dimensions():
    with pytest.raises(BadDimensions):
        extract_pyramid(np.zeros((30, 40)))


def test_constant_image_has_zero_gradients():
    for f in extract_pyramid(np.full((16, 20), 0.3)):
        assert np.all(f[1] == 0) and np.all(f[2] == 0)


def test_ramp_gradient_matches_central_difference():
    u = np.tile(np.arange(64, dtype=float), (32, 1))
    full = fixed_pyramid(u)[2]
    oracle = 0.5 * (u[:, 2:] - u[:, :-2])
    np.testing.assert_allclose(full[1][:, 1:-1], oracle, atol=1e-12)
    np.testing.assert_allclose(full[1][:, 1:-1], 1.0, atol=1e-12)


def test_shift_equivariance(rng):
    img = rng.uniform(size=(32, 40))
    shifted = np.roll(img, 2, axis=1)
    a = fixed_pyramid(img)[2]
    b = fixed_pyramid(shifted)[2]
    # interior away from the wrapped seam and the padded borders
    np.testing.assert_allclose(b[:, 3:-3, 7:-3], a[:, 3:-3, 5:-5], atol=1e-12)


def test_conv_head_gradient(rng):
    fixed = fixed_pyramid(rng.uniform(size=(8, 8)))[2]
    w = FeatureWeights.init(3, seed=1)
    g = rng.normal(size=(3, 8, 8))
    _, cache = apply_conv(fixed, w, 2)
    dw, db = apply_conv_backward(g, cache, w, 2)
    eps = 1e-6
    for idx in [(0, 0, 1, 1), (2, 3, 0, 2), (1, 1, 2, 0)]:
        w.kernels[2][idx] += eps
        up = (apply_conv(fixed, w, 2)[0] * g).sum()
        w.kernels[2][idx] -= 2 * eps
        dn = (apply_conv(fixed, w, 2)[0] * g).sum()
        w.kernels[2][idx] += eps
        assert abs((up - dn) / (2 * eps) - dw[idx]) < 1e-6 * max(1.0, abs(dw[idx]))
    assert db.shape == (3,)


def test_feature_dump_round_trip(tmp_path, rng):
    f = rng.normal(size=(4, 6, 10)).astype(np.float32).astype(np.float64)
    dump_features(tmp_path / "f.bin", f)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:4] == b"FMAP" and len(raw) == 16 + f.size * 4
    np.testing.assert_array_equal(load_features(tmp_path / "f.bin"), f)
