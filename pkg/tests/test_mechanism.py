import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate
from scipy import stats as sps

from piobf.core import Dataset, LatentCode, ParameterError, PrivacyParams, SemanticLabel
from piobf.mechanism import (
    ClusterStats,
    NoiseSampler,
    clip_transformed,
    compute_cluster_stats,
    density,
    dump_samples_csv,
    log_density,
    log_norm_constant,
    log_sphere_area,
    obfuscate_transformed,
    sample_gamma,
    sample_noise,
    sample_radial,
    sample_unit_sphere,
)
from piobf.rng import make_rng


def test_norm_constant_examples():
    assert abs(log_norm_constant(1.0, 2) - math.log(1 / (2 * math.pi))) < 1e-12
    assert abs(log_norm_constant(1.0, 4) - math.log(1 / (12 * math.pi**2))) < 1e-12
    # 1-D Laplace: C = eps / 2
    assert abs(log_norm_constant(3.0, 1) - math.log(1.5)) < 1e-12


@given(st.floats(1e-3, 1e3), st.integers(1, 64))
def test_norm_constant_scaling(eps, k):
    diff = log_norm_constant(2 * eps, k) - log_norm_constant(eps, k)
    assert abs(diff - k * math.log(2)) < 1e-9


@given(st.floats(1e-3, 1e3), st.integers(1, 64))
def test_norm_constant_finite(eps, k):
    assert math.isfinite(math.exp(log_norm_constant(eps, k)) if log_norm_constant(eps, k) < 700 else 0.0)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 8, 16])
@pytest.mark.parametrize("eps", [0.5, 1.0, 2.0])
def test_normalisation_by_quadrature(k, eps):
    # C * S_{k-1} * int_0^inf r^{k-1} e^{-eps r} dr == 1, integrand kept in log space
    lc, ls = log_norm_constant(eps, k), log_sphere_area(k)
    val, _ = integrate.quad(lambda r: math.exp(lc + ls + (k - 1) * math.log(r) - eps * r) if r > 0 else
                            (math.exp(lc + ls) if k == 1 else 0.0), 0, np.inf, epsabs=1e-12, epsrel=1e-10, limit=200)
    assert abs(val - 1.0) < 1e-6


@pytest.mark.parametrize("bad", [(0.0, 2), (-1.0, 2), (1.0, 0), (1.0, 2.5)])
def test_norm_constant_rejects(bad):
    with pytest.raises(ParameterError):
        log_norm_constant(*bad)


def test_density_examples():
    p = PrivacyParams(1.0, 2)
    y0 = np.array([0.3, -0.2])
    assert abs(density(y0, y0, p) - 1 / (2 * math.pi)) < 1e-12
    z = y0 + np.array([0.6, 0.8])
    assert abs(density(y0, z, p) - math.exp(-1) / (2 * math.pi)) < 1e-12
    assert abs(density(y0, z, p) - 0.05855) < 1e-5


@given(arrays(np.float64, 4, elements=st.floats(-50, 50)), arrays(np.float64, 4, elements=st.floats(-50, 50)),
       arrays(np.float64, 4, elements=st.floats(-50, 50)), st.floats(0.01, 20))
def test_density_ratio_bound(y0, y1, z, eps):
    p = PrivacyParams(eps, 4)
    lr = log_density(y0, z, p) - log_density(y1, z, p)
    assert lr <= eps * np.linalg.norm(y0 - y1) + 1e-9


def test_radial_moments():
    r = sample_radial(PrivacyParams(2.0, 16), make_rng(1, 1), 100000)
    assert abs(r.mean() - 8.0) < 0.1
    r = sample_radial(PrivacyParams(1.0, 4), make_rng(1, 2), 100000)
    assert abs(r.var() - 4.0) < 0.2


@pytest.mark.parametrize("k,eps", [(1, 1.0), (4, 1.0), (16, 2.0), (32, 0.5)])
def test_radial_ks(k, eps):
    r = sample_radial(PrivacyParams(eps, k), make_rng(2, k), 100000)
    assert sps.kstest(r, sps.gamma(a=k, scale=1 / eps).cdf).pvalue > 1e-3


def test_gamma_rejects_small_shape():
    with pytest.raises(ParameterError):
        sample_gamma(0.5, 1.0, make_rng(0, 0), 3)


def test_unit_sphere():
    U = sample_unit_sphere(16, make_rng(3, 3), 100000)
    assert np.max(np.abs(np.linalg.norm(U, axis=1) - 1)) < 1e-12
    assert np.max(np.abs(U.mean(axis=0))) < 0.01
    s = sample_unit_sphere(1, make_rng(3, 4), 100000)
    assert set(np.unique(s)) == {-1.0, 1.0}
    assert abs((s > 0).mean() - 0.5) < 0.01


def test_unit_sphere_rotation_invariance():
    # first and second moments are rotation invariant: E[u u^T] = I / k
    U = sample_unit_sphere(5, make_rng(3, 5), 200000)
    assert np.allclose(U.T @ U / len(U), np.eye(5) / 5, atol=5e-3)


def test_noise_radius_and_forced_zero():
    p = PrivacyParams(1.5, 16)
    y0 = make_rng(0, 9).standard_normal(16)
    rng_a, rng_b = make_rng(4, 1), make_rng(4, 1)
    z = sample_noise(y0, p, rng_a)
    r = sample_radial(p, rng_b)
    assert abs(np.linalg.norm(z - y0) - r) < 1e-12
    assert np.array_equal(sample_noise(y0, p, make_rng(4, 2), radial=0.0), y0)


@given(arrays(np.float64, 8, elements=st.floats(-100, 100)))
def test_noise_translation_equivariant(c):
    p = PrivacyParams(1.0, 8)
    y0 = np.linspace(-1, 1, 8)
    a = sample_noise(y0 + c, p, make_rng(5, 5))
    b = sample_noise(y0, p, make_rng(5, 5)) + c
    assert np.allclose(a, b, atol=1e-9)


def test_log_density_pushforward_of_radius():
    # ln D(y0)(z) is ln C - eps * r, so its law is the Gamma law pushed forward
    p = PrivacyParams(1.0, 16)
    y0 = np.zeros(16)
    Z = sample_noise(np.tile(y0, (100000, 1)), p, make_rng(6, 6))
    r_from_density = (log_norm_constant(1.0, 16) - log_density(y0, Z, p)) / p.epsilon
    edges = sps.gamma(a=16, scale=1.0).ppf(np.linspace(0, 1, 21))
    counts = np.histogram(r_from_density, edges)[0]
    assert sps.chisquare(counts).pvalue > 1e-3


def test_sampler_reproducible():
    p = PrivacyParams(1.0, 16)
    a = NoiseSampler(p, 11, 3)
    b = NoiseSampler(p, 11, 3)
    y0 = np.ones(16)
    assert np.array_equal(a.sample(y0), b.sample(y0))
    assert np.array_equal(a.radial(5), b.radial(5))


def test_dump_csv(tmp_path):
    path = tmp_path / "s.csv"
    p = PrivacyParams(1.0, 3)
    dump_samples_csv(path, np.zeros(3), p, 10, seed=1)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["sample_index", "r", "z_1", "z_2", "z_3"]
    assert len(rows) == 11
    z = np.array(rows[5][2:], float)
    assert abs(np.linalg.norm(z) - float(rows[5][1])) < 1e-12


def _stats(fa, xa):
    return ClusterStats(0, np.asarray(xa, float), np.asarray(fa, float), 3)


def test_clip_examples():
    p = PrivacyParams(1.0, 2, delta=0.5)
    st0 = _stats([0.0, 0.0], [0.0, 0.0])
    x = np.array([5.0, 0.0])  # C = 0.5 * 5 = 2.5
    out = clip_transformed(np.array([3.0, 4.0]), st0, x, p)
    assert np.allclose(out, [1.5, 2.0]) and abs(np.linalg.norm(out) - 2.5) < 1e-12
    x = np.array([20.0, 0.0])  # C = 10
    y = np.array([0.6, 0.8])
    assert np.array_equal(clip_transformed(y, st0, x, p), y)
    # x at the anchor returns f(x_a)
    st1 = _stats([1.0, 1.0], [2.0, 2.0])
    assert np.array_equal(clip_transformed(np.array([9.0, 9.0]), st1, np.array([2.0, 2.0]), p), [1.0, 1.0])


def test_clip_rescale_mode_projects_onto_sphere():
    p = PrivacyParams(1.0, 2, delta=0.5)
    st0 = _stats([0.0, 0.0], [0.0, 0.0])
    out = clip_transformed(np.array([0.6, 0.8]), st0, np.array([20.0, 0.0]), p, mode="rescale")
    assert abs(np.linalg.norm(out) - 10.0) < 1e-12
    with pytest.raises(ParameterError):
        clip_transformed(np.array([0.6, 0.8]), st0, np.array([20.0, 0.0]), p, mode="bogus")


vec = arrays(np.float64, 3, elements=st.floats(-100, 100))


@given(vec, vec, vec, vec, vec, st.floats(0.01, 0.5), st.sampled_from(["max", "rescale"]))
def test_clip_bound_property(y1, y2, x1, x2, xa, delta, mode):
    """Clipped outputs stay within delta * ||x - x_a|| of the anchor image, so pairs obey the triangle bound."""
    p = PrivacyParams(1.0, 3, delta=delta)
    st0 = _stats(np.zeros(3), xa)
    o1, o2 = clip_transformed(y1, st0, x1, p, mode), clip_transformed(y2, st0, x2, p, mode)
    c1, c2 = delta * np.linalg.norm(x1 - xa), delta * np.linalg.norm(x2 - xa)
    assert np.linalg.norm(o1) <= c1 * (1 + 1e-12) + 1e-12
    assert np.linalg.norm(o1 - o2) <= (c1 + c2) * (1 + 1e-12) + 1e-12


def test_clip_batch_matches_rows(rng):
    p = PrivacyParams(1.0, 4, delta=0.3)
    st0 = _stats(rng.standard_normal(4), rng.standard_normal(6))
    Y, X = rng.standard_normal((10, 4)) * 5, rng.standard_normal((10, 6))
    batch = clip_transformed(Y, st0, X, p)
    rows = np.stack([clip_transformed(Y[i], st0, X[i], p) for i in range(10)])
    assert np.allclose(batch, rows, atol=1e-14)


def test_cluster_stats_anchor_is_member_nearest_centroid():
    codes = [LatentCode(np.array(v, float), 0, SemanticLabel((0,))) for v in ([0, 0], [1, 0], [10, 0])]
    codes += [LatentCode(np.array([50.0, 50.0]), 1, SemanticLabel((1,)))]
    ds = Dataset.from_codes(codes)
    stats = compute_cluster_stats(lambda X: 2 * X, ds)
    assert stats[0].anchor_index == 1 and stats[0].member_count == 3
    assert np.array_equal(stats[0].anchor_transformed, [2.0, 0.0])
    assert ClusterStats.from_dict(stats[1].to_dict()).anchor_index == 3


def test_obfuscate_transformed_degenerate():
    p = PrivacyParams(1.0, 2, delta=0.5)
    xa = np.array([1.0, -1.0])
    st0 = ClusterStats(0, xa, 3 * xa, 1)
    out = obfuscate_transformed(xa, lambda X: 3 * X, st0, p, make_rng(0, 0), radial=0.0)
    assert np.array_equal(out, 3 * xa)
    out = obfuscate_transformed(xa + 1, lambda X: 3 * X, st0, p, make_rng(0, 0))
    assert out.shape == (2,)
