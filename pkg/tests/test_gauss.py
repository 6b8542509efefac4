from __future__ import annotations

import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from trajcp.gauss import (
    DimensionError,
    GaussianSpec,
    NoiseLayout,
    TrajectoryNoise,
    TrajectoryNoiseSpec,
    log_density,
    mahalanobis,
    mixture_log_density,
    sample_stream,
)


def random_spd(rng, n, scale=1.0):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T + n * np.eye(n))


def random_spec(rng, d0=2, du=1, dx=3, dz=2, T=4, shift=0.0) -> TrajectoryNoiseSpec:
    def g(n):
        return GaussianSpec(shift * rng.standard_normal(n), random_spd(rng, n, 0.1))

    return TrajectoryNoiseSpec(g(d0), [(g(du), g(dx), g(dz)) for _ in range(T)])


def test_gaussian_spec_rejects_bad_covariances():
    with pytest.raises(ValueError, match="symmetric"):
        GaussianSpec(np.zeros(2), [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError, match="positive definite"):
        GaussianSpec(np.zeros(2), [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(DimensionError):
        GaussianSpec(np.zeros(3), np.eye(2))


def test_gaussian_spec_is_read_only():
    g = GaussianSpec([0.0, 1.0], np.eye(2))
    with pytest.raises(ValueError):
        g.mean[0] = 5.0


def test_log_density_matches_scipy(rng):
    for n in (1, 3, 6):
        cov = random_spd(rng, n)
        mean = rng.standard_normal(n)
        g = GaussianSpec(mean, cov)
        x = rng.standard_normal(n)
        assert log_density(g, x) == pytest.approx(multivariate_normal(mean, cov).logpdf(x), abs=1e-10)


def test_mahalanobis_closed_form():
    assert mahalanobis([3.0, 4.0], [0.0, 0.0], np.eye(2)) == pytest.approx(5.0)
    assert mahalanobis([2.0, 0.0], [0.0, 0.0], np.diag([4.0, 1.0])) == pytest.approx(1.0)
    with pytest.raises(DimensionError):
        mahalanobis([1.0, 2.0], [0.0, 0.0], np.eye(3))


def test_layout_blocks_tile_the_vector():
    L = NoiseLayout(d0=2, du=1, dx=3, dz=2, T=3)
    covered = np.concatenate([np.arange(L.size)[s] for s in L.block_slices()])
    assert np.array_equal(covered, np.arange(L.size))
    assert len(L.block_slices()) == 3 * L.T + 1
    assert L.group_index("proc")[1].tolist() == [2 + 6 + 1, 2 + 6 + 2, 2 + 6 + 3]


def test_trajectory_density_is_sum_of_block_densities(rng):
    spec = random_spec(rng, shift=0.3)
    noise = spec.sample(rng)
    flat = noise.flat()
    expected = sum(
        multivariate_normal(b.mean, b.cov).logpdf(flat[s])
        for b, s in zip(spec.blocks(), spec.layout.block_slices())
    )
    assert spec.log_density(noise) == pytest.approx(expected, abs=1e-9)


def test_batched_density_matches_single(rng):
    spec = random_spec(rng, shift=0.2)
    X = rng.standard_normal((5, spec.layout.size))
    batch = TrajectoryNoise.from_flat(X, spec.layout)
    lp = spec.log_density(batch)
    assert lp.shape == (5,)
    for k in range(5):
        assert lp[k] == pytest.approx(spec.log_density(batch.sample(k)), abs=1e-12)


def test_transform_pushes_standard_normals(rng):
    spec = random_spec(rng, shift=1.0)
    Z = rng.standard_normal((20000, spec.layout.size))
    X = spec.transform(TrajectoryNoise.from_flat(Z, spec.layout)).flat()
    mean = spec.mean_flat()
    se = np.sqrt(np.concatenate([np.diag(c) for c in spec.covariances()]) / len(X))
    assert np.all(np.abs(X.mean(axis=0) - mean) < 5 * se)
    s = spec.layout.block_slices()[2]
    emp = np.cov(X[:, s].T)
    assert np.allclose(emp, spec.blocks()[2].cov, atol=0.05 * np.abs(spec.blocks()[2].cov).max())


def test_shape_check_names_the_block(rng):
    spec = random_spec(rng)
    bad = TrajectoryNoise(np.zeros(2), np.zeros((4, 1)), np.zeros((4, 2)), np.zeros((4, 2)))
    with pytest.raises(DimensionError, match="proc"):
        spec.log_density(bad)


def test_from_blocks_round_trip(rng):
    spec = random_spec(rng, shift=0.5)
    again = TrajectoryNoiseSpec.from_blocks(spec.layout, spec.mean_flat(), spec.covariances())
    assert again.same_as(spec)
    assert not spec.is_zero_mean()
    assert TrajectoryNoiseSpec.constant(np.eye(2), np.eye(1), np.eye(3), np.eye(2), T=3).is_zero_mean()


def test_mixture_density_is_logsumexp(rng):
    a = random_spec(rng, shift=0.5)
    b = TrajectoryNoiseSpec.from_blocks(a.layout, np.zeros(a.layout.size), a.covariances())
    noise = a.sample(rng)
    w = np.array([0.3, 0.7])
    expected = logsumexp([a.log_density(noise), b.log_density(noise)], b=w)
    assert mixture_log_density([a, b], w, noise) == pytest.approx(expected, abs=1e-12)
    # zero-weight components drop out entirely
    assert mixture_log_density([a, b], [0.0, 1.0], noise) == pytest.approx(b.log_density(noise))
    with pytest.raises(ValueError):
        mixture_log_density([a, b], [0.5, 0.6], noise)


def test_sample_streams_do_not_depend_on_order():
    first = [sample_stream(7, i).standard_normal(3) for i in range(5)]
    backwards = [sample_stream(7, i).standard_normal(3) for i in reversed(range(5))][::-1]
    assert all(np.array_equal(a, b) for a, b in zip(first, backwards))
    assert not np.array_equal(first[0], first[1])
    assert not np.array_equal(sample_stream(8, 0).standard_normal(3), first[0])


@settings(max_examples=40, deadline=None)
@given(
    d0=st.integers(1, 3), du=st.integers(1, 3), dx=st.integers(1, 4), dz=st.integers(1, 3),
    T=st.integers(1, 5), n=st.integers(1, 3), seed=st.integers(0, 2**31),
)
def test_flat_round_trip(d0, du, dx, dz, T, n, seed):
    L = NoiseLayout(d0, du, dx, dz, T)
    X = np.random.default_rng(seed).standard_normal((n, L.size))
    assert np.array_equal(TrajectoryNoise.from_flat(X, L).flat(), X)
    assert np.array_equal(TrajectoryNoise.from_flat(X[0], L).flat(), X[0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.floats(0.0, 2.0))
def test_density_of_transformed_draw(seed, shift):
    """log q(mu + L z) = -|z|^2/2 - log-normalizer, for every block layout."""
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, shift=shift)
    z = rng.standard_normal(spec.layout.size)
    x = spec.transform(TrajectoryNoise.from_flat(z, spec.layout))
    lognorm = sum(b.log_norm for b in spec.blocks())
    assert spec.log_density(x) == pytest.approx(-0.5 * z @ z - lognorm, abs=1e-8)
    assert math.isfinite(spec.log_density(x))
