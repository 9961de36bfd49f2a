import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from piobf.core import (
    Dataset,
    LatentCode,
    MalformedDataError,
    ParameterError,
    PrivacyParams,
    SemanticLabel,
    TrainConfig,
    are_adjacent,
    bits_to_cluster,
    cluster_ids,
    cluster_to_bits,
    median_intra_cluster_distance,
    pairwise_distances,
    perceptual_distance,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vec8 = arrays(np.float64, 8, elements=finite)


def test_distance_examples():
    assert perceptual_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert perceptual_distance([0.0, 0.0], [3.0, 4.0]) == 5.0


def test_distance_matches_componentwise_oracle(rng):
    a, b = rng.standard_normal(32), rng.standard_normal(32)
    acc = 0.0
    for i in range(32):
        acc += (a[i] - b[i]) ** 2
    assert abs(perceptual_distance(a, b) - math.sqrt(acc)) < 1e-12


def test_distance_dimension_mismatch():
    with pytest.raises(MalformedDataError):
        perceptual_distance([0.0, 1.0], [0.0, 1.0, 2.0])


@given(vec8, vec8, vec8)
def test_distance_is_a_metric(a, b, c):
    dab, dba = perceptual_distance(a, b), perceptual_distance(b, a)
    assert dab >= 0 and dab == dba
    assert perceptual_distance(a, a) == 0
    assert perceptual_distance(a, c) <= dab + perceptual_distance(b, c) + 1e-9


def test_adjacency_boundary_inclusive():
    p49, p5 = PrivacyParams(1.0, beta_adj=4.9), PrivacyParams(1.0, beta_adj=5.0)
    assert not are_adjacent([0.0, 0.0], [3.0, 4.0], p49)
    assert are_adjacent([0.0, 0.0], [3.0, 4.0], p5)
    assert are_adjacent([1.0, 1.0], [1.0, 1.0], PrivacyParams(1.0, beta_adj=1e-6))


@given(vec8, vec8, st.floats(0.01, 100))
def test_adjacency_symmetric(a, b, beta):
    p = PrivacyParams(1.0, beta_adj=beta)
    assert are_adjacent(a, b, p) == are_adjacent(b, a, p)
    assert are_adjacent(a, a, p)


def test_big_endian_cluster_index():
    assert bits_to_cluster([1, 0, 1, 1]) == 11
    assert cluster_to_bits(11, 4) == (1, 0, 1, 1)
    assert SemanticLabel((0, 0, 1)).cluster == 1
    S = np.array([[1, 0, 1, 1], [0, 1, 1, 0]])
    assert list(cluster_ids(S)) == [11, 6]
    assert list(cluster_ids(S, [0, 1])) == [2, 1]


@given(st.integers(1, 8).flatmap(lambda m: st.tuples(st.just(m), st.integers(0, 2**m - 1))))
def test_bits_roundtrip(mc):
    m, c = mc
    assert bits_to_cluster(cluster_to_bits(c, m)) == c


def test_semantic_label_rejects_non_binary():
    with pytest.raises(ParameterError):
        SemanticLabel((0, 2))


def test_latent_code_validation():
    with pytest.raises(MalformedDataError):
        LatentCode(np.array([1.0, np.nan]), 0, SemanticLabel((1,)))
    with pytest.raises((MalformedDataError, ParameterError)):
        LatentCode(np.array([1.0]), 0, SemanticLabel((1,)))


@pytest.mark.parametrize("kw", [
    {"epsilon": 0.0}, {"epsilon": -1.0}, {"epsilon": 1.0, "delta": 0.6}, {"epsilon": 1.0, "delta": 0.0},
    {"epsilon": 1.0, "beta_adj": 0.0}, {"epsilon": 1.0, "k": 0},
])
def test_privacy_params_invariants(kw):
    with pytest.raises(ParameterError):
        PrivacyParams(**kw)


@pytest.mark.parametrize("kw", [{"batch_size": 2}, {"lr_theta": 0.0}, {"lr_omega": -1.0}, {"margin_mu": -1.0},
                                {"loss_mode": "other"}])
def test_train_config_invariants(kw):
    with pytest.raises(ParameterError):
        TrainConfig(**kw)


def _toy():
    codes = [
        LatentCode(np.array([0.0, 0.0]), 0, SemanticLabel((0,))),
        LatentCode(np.array([1.0, 0.0]), 0, SemanticLabel((0,))),
        LatentCode(np.array([5.0, 5.0]), 1, SemanticLabel((1,))),
        LatentCode(np.array([5.0, 7.0]), 1, SemanticLabel((1,))),
    ]
    return Dataset.from_codes(codes)


def test_dataset_json_roundtrip_and_field_order():
    ds = _toy()
    text = ds.to_json()
    doc = json.loads(text)
    assert list(doc) == ["d", "m", "num_identities", "codes"]
    assert list(doc["codes"][0]) == ["values", "identity_id", "semantic"]
    back = Dataset.from_json(text)
    assert np.array_equal(back.X, ds.X) and back.to_json() == text


def test_dataset_invariants():
    ds = _toy()
    with pytest.raises(MalformedDataError):
        Dataset(ds.X, ds.identities, ds.semantics, 1)  # identity 1 >= num_identities
    with pytest.raises(MalformedDataError):
        Dataset.from_json('{"d": 3, "m": 1, "num_identities": 1, "codes": [{"values": [1, 2], "identity_id": 0, "semantic": [0]}]}')


def test_median_intra_cluster_distance():
    # within-cluster distances are 1 and 2
    assert median_intra_cluster_distance(_toy()) == 1.5


def test_pairwise_distances_match_direct(rng):
    X, Y = rng.standard_normal((7, 5)), rng.standard_normal((4, 5))
    D = pairwise_distances(X, Y)
    direct = np.linalg.norm(X[:, None] - Y[None], axis=-1)
    assert np.allclose(D, direct, atol=1e-12)
