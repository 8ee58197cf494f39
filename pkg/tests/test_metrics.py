import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stylevar.data import generate_dataset
from stylevar.metrics import (MetricReport, ProxyFeatureNet, adain_baseline, content_loss, evaluate, gram,
                              proxy_perceptual_distance, reward, ssim, style_loss)

img = lambda seed, size=16: np.random.default_rng(seed).uniform(size=(size, size, 3))


def test_distance_zero_and_symmetric():
    a, b = img(0), img(1)
    assert proxy_perceptual_distance(a, a) == 0.0
    assert proxy_perceptual_distance(a, b) == proxy_perceptual_distance(b, a)
    assert proxy_perceptual_distance(a, b) > 0


def test_distance_shape_mismatch():
    with pytest.raises(ValueError):
        proxy_perceptual_distance(img(0), img(0, 8))


def test_distance_batched_matches_single():
    a, b = np.stack([img(0), img(1)]), np.stack([img(2), img(3)])
    batched = proxy_perceptual_distance(a, b)
    np.testing.assert_allclose(batched, [proxy_perceptual_distance(a[i], b[i]) for i in range(2)], rtol=1e-12)


def test_content_closer_than_noise_to_target():
    tri = generate_dataset(100, 5)
    rng = np.random.default_rng(0)
    d_content = np.mean([proxy_perceptual_distance(t.content, t.target) for t in tri])
    d_noise = np.mean([proxy_perceptual_distance(rng.uniform(size=t.target.shape), t.target) for t in tri])
    assert d_content < d_noise


def test_net_is_seeded():
    a = ProxyFeatureNet(7).taps(img(0))
    b = ProxyFeatureNet(7).taps(img(0))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], ProxyFeatureNet(8).taps(img(0))[0])


def test_reward_scaling_and_ordering():
    t, a, b = img(0), img(1), img(2)
    assert reward(t, t) == 0.0
    assert reward(a, t, 5.0) == pytest.approx(5.0 * reward(a, t, 1.0), rel=1e-15)
    assert (reward(a, t) < reward(b, t)) == (proxy_perceptual_distance(a, t) > proxy_perceptual_distance(b, t))
    with pytest.raises(ValueError):
        reward(a, t, 0.0)


def test_adain_identity():
    a = img(3)
    np.testing.assert_allclose(adain_baseline(a, a), a, atol=1e-7)


def test_adain_matches_style_statistics():
    c, s = img(4), img(5)
    out = adain_baseline(c, s, clamp=False)
    np.testing.assert_allclose(out.mean(axis=(0, 1)), s.mean(axis=(0, 1)), atol=1e-5)
    np.testing.assert_allclose(out.std(axis=(0, 1)), s.std(axis=(0, 1)), atol=1e-5)


def test_adain_constant_style():
    s = np.empty((16, 16, 3))
    s[:] = [0.2, 0.4, 0.9]
    np.testing.assert_allclose(adain_baseline(img(6), s), s, atol=1e-12)


def test_ssim_identity_and_symmetry():
    a, b = img(7), img(8)
    assert ssim(a, a) == 1.0
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
    assert -1.0 <= ssim(a, b) <= 1.0


def test_gram_loss_self_zero():
    a = img(9)
    assert style_loss(a, a) == 0.0 and content_loss(a, a) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_gram_ignores_spatial_order(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(4, 5, 3))
    perm = rng.permutation(20)
    g = f.reshape(20, 3)[perm].reshape(4, 5, 3)
    np.testing.assert_allclose(gram(f), gram(g), atol=1e-12)


def test_evaluate_identity_transform(tmp_path):
    tri = generate_dataset(6, 1)
    rep = evaluate(lambda i, t: t.target, tri, "oracle")
    agg = rep.aggregate()
    assert agg["proxy_perceptual"] == 0.0 and agg["ssim"] == 1.0
    rep.write_csv(tmp_path / "r.csv")
    rep.write_json(tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(MetricReport.FIELDS) and len(lines) == 7
    assert json.loads((tmp_path / "r.json").read_text())["n"] == 6


def test_evaluate_rejects_empty_split():
    with pytest.raises(ValueError):
        evaluate(lambda i, t: t.target, [], "x")


def test_metrics_deterministic():
    tri = generate_dataset(4, 2)
    a = evaluate(lambda i, t: adain_baseline(t.content, t.style), tri, "adain").rows
    b = evaluate(lambda i, t: adain_baseline(t.content, t.style), tri, "adain").rows
    assert a == b
