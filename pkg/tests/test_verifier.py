import json

import numpy as np
import pytest

from piobf.core import Dataset, ParameterError, PrivacyParams
from piobf.pinet import MLP, PINet
from piobf.mechanism import compute_cluster_stats
from piobf.rng import make_rng
from piobf.verifier import (
    MIN_BIN_COUNT,
    NoiseOnCenters,
    PIVerdict,
    _merge_bins,
    check_lemma1_density_ratio,
    check_normalization,
    check_radial_marginal,
    check_theorem1_composition,
    check_theorem2_clip_bound,
    empirical_pi_histogram_test,
    exit_code,
    verdicts_to_json,
)


@pytest.mark.parametrize("eps,k,tol", [(1.0, 2, 1e-12), (3.0, 8, 1e-10), (1.0, 1, 1e-12), (0.5, 64, 1e-10)])
def test_normalization(eps, k, tol):
    v = check_normalization(PrivacyParams(eps, k))
    assert v.passed and v.details["log_residual"] == pytest.approx(0, abs=tol)
    assert v.test_name == f"normalization[k={k},eps={eps:g}]"


def test_normalization_rejects_large_k():
    with pytest.raises(ParameterError):
        check_normalization(PrivacyParams(1.0, 65))


def test_lemma1():
    v = check_lemma1_density_ratio(PrivacyParams(2.0, 16), 10000, make_rng(0, 1))
    assert v.passed and v.details["violations"] == 0
    assert abs(v.details["colinear_gap"]) <= 1e-9


def test_verdict_contract():
    with pytest.raises(ParameterError):
        PIVerdict("x", True, float("nan"), 1)
    with pytest.raises(ParameterError):
        PIVerdict("x", True, 0.0, 0)
    ok = PIVerdict("a", True, 0.0, 1)
    bad = PIVerdict("b", False, 1.0, 1)
    inc = PIVerdict("c", False, 0.0, 1, inconclusive=True)
    assert exit_code([ok]) == 0 and exit_code([ok, inc]) == 2 and exit_code([inc, bad]) == 1
    doc = json.loads(verdicts_to_json([ok, inc]))
    assert [d["status"] for d in doc] == ["pass", "inconclusive"]


def _toy():
    r = np.random.default_rng(0)
    X = np.concatenate([r.standard_normal((30, 3)) * 0.3, 5 + r.standard_normal((30, 3)) * 0.3])
    S = np.repeat([[0], [1]], 30, axis=0)
    return Dataset(X, np.repeat([0, 1], 30), S, 2)


def test_theorem2_identity_and_adversarial():
    ds = _toy()
    p = PrivacyParams(1.0, 3, 0.5, beta_adj=1.0)
    assert check_theorem2_clip_bound(lambda X: X, ds, p).passed
    adv = lambda X: 1e3 * np.sin(X)
    v = check_theorem2_clip_bound(adv, ds, p)
    assert v.passed and v.details["max_distance"] <= 2 * 0.5 * 1.0
    assert v.details["max_anchor_distance"] <= 1.0
    off = check_theorem2_clip_bound(adv, ds, p, clip=False)
    assert not off.passed and off.worst_violation > 0
    assert check_theorem2_clip_bound(adv, ds, p, mode="rescale").passed


def test_theorem2_bound_needs_members_within_beta_of_anchor():
    # clipping caps ||f~(x) - f~(x')|| by delta * (||x - x_a|| + ||x' - x_a||), which can exceed
    # 2 * delta * beta when a cluster reaches further than beta from its anchor
    ds = _toy()
    p = PrivacyParams(1.0, 3, 0.5, beta_adj=0.5)
    v = check_theorem2_clip_bound(lambda X: 1e3 * np.sin(X), ds, p)
    assert v.details["max_anchor_distance"] > p.beta_adj
    assert not v.passed


def test_theorem2_no_pairs_is_inconclusive():
    ds = _toy()
    v = check_theorem2_clip_bound(lambda X: X, ds, PrivacyParams(1.0, 3, beta_adj=1e-6))
    assert v.inconclusive


def _identity_net(ds):
    ident = MLP([np.eye(3)], [np.zeros(3)], trained=True)
    return PINet(ident, ident, compute_cluster_stats(ident, ds), None)


def test_theorem1_identity_encoder_without_clipping():
    ds = _toy()
    p = PrivacyParams(1.0, 3, 0.5, beta_adj=0.5)
    net = _identity_net(ds)
    v = check_theorem1_composition(net, ds, p, 200, make_rng(0, 0), points=5)
    assert v.passed and v.details["violations"] == 0
    assert v.details["dhat_lipschitz"] <= 1.0 + 1e-12


def test_theorem1_refuses_untrained():
    ds = _toy()
    net = _identity_net(ds)
    net.theta.trained = False
    with pytest.raises(ParameterError, match="untrained"):
        check_theorem1_composition(net, ds, PrivacyParams(1.0, 3), 10, make_rng(0, 0))


def test_radial_marginal_controls():
    assert check_radial_marginal(PrivacyParams(1.0, 1), 100000, make_rng(1, 0)).passed
    shifted = check_radial_marginal(PrivacyParams(2.0, 4), 100000, make_rng(1, 1), center=np.full(4, 1e3))
    assert shifted.passed
    assert not check_radial_marginal(PrivacyParams(2.0, 16), 100000, make_rng(1, 2), shape_offset=2).passed


def test_merge_bins():
    mp, mq = _merge_bins(np.array([30, 10, 20, 5, 40]), np.array([30, 30, 0, 30, 2]), 25)
    assert mp.sum() == 105 and mq.sum() == 92
    assert mp.min() >= 25 and mq.min() >= 25 or len(mp) == 1


def test_histogram_same_input_same_seed_gives_zero_ratio():
    p = PrivacyParams(1.0, 4)
    mech = NoiseOnCenters(lambda x: x, p)
    x = np.zeros(4)
    v = empirical_pi_histogram_test(mech, x, x, p, 20000, 20, make_rng(3, 0), make_rng(3, 0))
    assert v.passed and v.details["max_log_ratio"] == 0.0


def test_histogram_sparse_is_inconclusive():
    p = PrivacyParams(1.0, 4)
    mech = NoiseOnCenters(lambda x: x, p)
    v = empirical_pi_histogram_test(mech, np.zeros(4), np.full(4, 0.1), p, 100, 20, make_rng(0, 0), make_rng(0, 1))
    assert v.inconclusive and v.status == "inconclusive"


def test_histogram_detects_gross_violation():
    # the noise is 4x smaller than the budget allows, at a distance where that is visible
    p = PrivacyParams(1.0, 2)
    mech = NoiseOnCenters(lambda x: x, p.with_epsilon(4.0))
    x, xp = np.zeros(2), np.array([1.0, 0.0])
    v = empirical_pi_histogram_test(mech, x, xp, p, 50000, 40, make_rng(0, 0), make_rng(0, 1))
    assert not v.passed and not v.inconclusive
    ok = empirical_pi_histogram_test(NoiseOnCenters(lambda x: x, p), x, xp, p, 50000, 40, make_rng(0, 0), make_rng(0, 1))
    assert ok.passed
