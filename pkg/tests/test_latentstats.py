import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_poison.errors import EmptyClass, InvalidClass, VersionMismatch
from latent_poison.latentstats import (
    ClassLatentStats,
    CompensatedSum,
    GaussianSpec,
    _ClassAccumulator,
    gaussian_sum,
    sample_class_latent,
    stats_from_codes,
)


def two_pass_oracle(values, labels, k):
    mus, sds = [], []
    for c in range(k):
        v = values[labels == c]
        mu = v.sum(0) / len(v)
        sds.append(np.sqrt(((v - mu) ** 2).sum(0) / len(v)))
        mus.append(mu)
    return np.array(mus), np.array(sds)


def test_toy_class_stats():
    # class 7 holds {1, 2, 3}; classes 0..6 hold one sample each
    z = np.array([[1.0], [2.0], [3.0]] + [[float(k)] for k in range(7)])
    labels = np.array([7, 7, 7] + list(range(7)))
    c = np.full((10, 2), 0.5)
    s = stats_from_codes(z, c, labels, 8)
    mu, sd = two_pass_oracle(z, labels, 8)
    assert s.mu_z[7, 0] == pytest.approx(2.0) == mu[7, 0]
    assert s.sigma_z[7, 0] == pytest.approx(math.sqrt(2 / 3)) == pytest.approx(sd[7, 0])
    assert np.all(s.sigma_z[:7] == 0.0)
    assert s.counts.tolist() == [1] * 7 + [3]


def test_empty_class_raises():
    with pytest.raises(EmptyClass):
        stats_from_codes(np.zeros((3, 2)), np.zeros((3, 2)), np.array([0, 0, 1]), 3)


def test_matches_two_pass_oracle(rng):
    z = rng.normal(size=(1000, 10)) * 3 + 1
    c = rng.dirichlet(np.ones(10), size=1000)
    labels = rng.integers(0, 10, 1000)
    s = stats_from_codes(z, c, labels, 10)
    mu, sd = two_pass_oracle(z, labels, 10)
    assert np.allclose(s.mu_z, mu, atol=1e-6) and np.allclose(s.sigma_z, sd, atol=1e-6)
    mu, sd = two_pass_oracle(c, labels, 10)
    assert np.allclose(s.mu_c, mu, atol=1e-6) and np.allclose(s.sigma_c, sd, atol=1e-6)


def test_order_invariance(rng):
    z = rng.normal(size=(500, 4)) * 1e3
    c = rng.dirichlet(np.ones(3), size=500)
    labels = rng.integers(0, 5, 500)
    perm = rng.permutation(500)
    a = stats_from_codes(z, c, labels, 5)
    b = stats_from_codes(z[perm], c[perm], labels[perm], 5)
    assert np.allclose(a.mu_z, b.mu_z, rtol=0, atol=1e-9)
    assert np.allclose(a.sigma_z, b.sigma_z, rtol=0, atol=1e-9)


def test_sharded_merge_equals_single_pass(rng):
    z = rng.normal(size=(300, 3))
    labels = rng.integers(0, 3, 300)
    whole = _ClassAccumulator(3, 3)
    whole.add(z, labels)
    left, right = _ClassAccumulator(3, 3), _ClassAccumulator(3, 3)
    left.add(z[:120], labels[:120])
    right.add(z[120:], labels[120:])
    left.merge(right)
    for x, y in zip(whole.finalize(), left.finalize()):
        assert np.allclose(x, y, atol=1e-12)


def test_compensated_sum_beats_naive():
    s = CompensatedSum(())
    for v in [1e16, 1.0, -1e16] * 10:
        s.add(v)
    assert float(s.value) == 10.0


def test_gaussian_sum_analytic():
    t = gaussian_sum(GaussianSpec(0, 1), GaussianSpec(1, 4))
    assert (t.mu, t.var) == (1, 5)
    near = gaussian_sum(GaussianSpec(2.5, 3.0), GaussianSpec(0, 1e-12))
    assert near.mu == 2.5 and near.var == pytest.approx(3.0)


def test_gaussian_sum_monte_carlo():
    rng = np.random.default_rng(42)
    samples = rng.normal(0, 1, 100_000) + rng.normal(1, 2, 100_000)
    assert abs(samples.mean() - 1) <= 0.02
    assert abs(samples.var() - 5) <= 0.1


specs = st.builds(GaussianSpec, st.floats(-100, 100), st.floats(1e-3, 100))


@settings(max_examples=100)
@given(specs, specs, specs)
def test_gaussian_sum_commutative_associative(a, b, c):
    ab, ba = gaussian_sum(a, b), gaussian_sum(b, a)
    assert ab == ba
    left, right = gaussian_sum(gaussian_sum(a, b), c), gaussian_sum(a, gaussian_sum(b, c))
    assert left.mu == pytest.approx(right.mu, abs=1e-12)
    assert left.var == pytest.approx(right.var, abs=1e-12)


def test_gaussian_spec_requires_positive_variance():
    with pytest.raises(ValueError):
        GaussianSpec(0, 0)


@pytest.fixture
def stats(rng):
    return ClassLatentStats(
        mu_z=rng.normal(size=(3, 4)), sigma_z=rng.random((3, 4)), mu_c=rng.dirichlet(np.ones(5), 3),
        sigma_c=rng.random((3, 5)) * 0.1, counts=np.array([5, 6, 7]),
    )


def test_sample_class_latent_identities(stats):
    z, c = sample_class_latent(stats, 1, np.zeros(4), np.zeros(5))
    assert np.array_equal(z, stats.mu_z[1]) and np.array_equal(c, stats.mu_c[1])
    z, _ = sample_class_latent(stats, 2, np.ones(4), np.zeros(5))
    assert np.allclose(z, stats.mu_z[2] + stats.sigma_z[2])


def test_zero_sigma_ignores_eta(stats):
    stats.sigma_z[0] = 0
    stats.sigma_c[0] = 0
    a = sample_class_latent(stats, 0, np.full(4, 5.0), np.full(5, -3.0))
    b = sample_class_latent(stats, 0, np.zeros(4), np.zeros(5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_sample_invalid_class(stats):
    with pytest.raises(InvalidClass):
        sample_class_latent(stats, 3, np.zeros(4), np.zeros(5))


def test_batched_torch_sampling(stats):
    t = stats.torch(torch.float64)
    ids = torch.tensor([0, 2, 2])
    eta_z = torch.randn(3, 4, dtype=torch.float64)
    z, c = sample_class_latent(t, ids, eta_z, torch.zeros(3, 5, dtype=torch.float64))
    assert torch.allclose(z[1], t["mu_z"][2] + eta_z[1] * t["sigma_z"][2])


def test_sampling_surrogate_mean(stats):
    # eta ~ N(0, 1): per-dimension mean within 3 sigma / sqrt(N) of the class mean
    rng = np.random.default_rng(9)
    n = 20_000
    z, _ = sample_class_latent(stats, 1, rng.normal(size=(n, 4)), np.zeros((n, 5)))
    assert np.all(np.abs(z.mean(0) - stats.mu_z[1]) <= 3 * stats.sigma_z[1] / math.sqrt(n))


def test_json_round_trip(stats, tmp_path):
    stats.save(tmp_path / "s.json")
    back = ClassLatentStats.load(tmp_path / "s.json")
    for k in ("mu_z", "sigma_z", "mu_c", "sigma_c", "counts"):
        assert np.array_equal(getattr(back, k), getattr(stats, k))
    d = stats.to_dict()
    d["version"] = 99
    with pytest.raises(VersionMismatch):
        ClassLatentStats.from_dict(d)
