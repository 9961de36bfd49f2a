"""Domain types, distances and shared configuration."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class MalformedDataError(ValueError):
    """Vectors or datasets whose shapes disagree."""


class ParameterError(ValueError):
    """Invalid privacy or training parameter."""


def _vec(a) -> np.ndarray:
    return np.asarray(getattr(a, "values", a), dtype=float)


@dataclass(frozen=True)
class SemanticLabel:
    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if len(bits) < 1 or any(b not in (0, 1) for b in bits):
            raise ParameterError(f"semantic bits must be a non-empty 0/1 vector, got {self.bits}")
        object.__setattr__(self, "bits", bits)

    @property
    def cluster(self) -> int:
        return bits_to_cluster(self.bits)

    def __len__(self):
        return len(self.bits)


def bits_to_cluster(bits) -> int:
    """Big-endian integer encoding of a bit vector."""
    out = 0
    for b in bits:
        out = (out << 1) | int(b)
    return out


def cluster_to_bits(cluster: int, m: int) -> tuple:
    return tuple((int(cluster) >> (m - 1 - j)) & 1 for j in range(m))


def cluster_ids(semantics: np.ndarray, selected: Sequence[int] | None = None) -> np.ndarray:
    """Vectorised big-endian cluster index of each row, optionally over a subset of attributes."""
    s = np.asarray(semantics, dtype=np.int64)
    if selected is not None:
        s = s[:, list(selected)]
    weights = 1 << np.arange(s.shape[1] - 1, -1, -1, dtype=np.int64)
    return s @ weights


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray
    identity_id: int
    semantic: SemanticLabel

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise MalformedDataError("latent code must be a vector of length >= 2")
        if not np.all(np.isfinite(v)):
            raise MalformedDataError("latent code has non-finite entries")
        if self.identity_id < 0:
            raise MalformedDataError("identity_id must be non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if not isinstance(self.semantic, SemanticLabel):
            object.__setattr__(self, "semantic", SemanticLabel(tuple(self.semantic)))

    @property
    def d(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    k: int = 16
    delta: float = 0.5
    beta_adj: float = 1.0

    def __post_init__(self):
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.k) != self.k or self.k < 1:
            raise ParameterError(f"k must be a positive integer, got {self.k}")
        if not (0 < self.delta <= 0.5):
            raise ParameterError(f"delta must lie in (0, 0.5], got {self.delta}")
        if not self.beta_adj > 0:
            raise ParameterError(f"beta_adj must be positive, got {self.beta_adj}")

    def with_epsilon(self, epsilon: float) -> "PrivacyParams":
        return PrivacyParams(epsilon, self.k, self.delta, self.beta_adj)


@dataclass(frozen=True)
class TrainConfig:
    margin_mu: float = 400.0
    lr_theta: float = 3e-5
    lr_omega: float = 3e-4
    epochs: int = 600
    batch_size: int = 128
    seed: int = 0
    hidden: int = 64
    k: int = 16
    triplets_per_anchor: int = 1
    loss_mode: str = "triplet_ce"  # or "mse_only"
    selected_attributes: tuple | None = None
    label_flip_rate: float = 0.0

    def __post_init__(self):
        if self.margin_mu < 0:
            raise ParameterError("margin_mu must be non-negative")
        if self.lr_theta <= 0 or self.lr_omega <= 0:
            raise ParameterError("learning rates must be positive")
        if self.epochs < 0:
            raise ParameterError("epochs must be non-negative")
        if self.batch_size < 3:
            raise ParameterError("batch_size must be >= 3")
        if self.loss_mode not in ("triplet_ce", "mse_only"):
            raise ParameterError(f"unknown loss_mode {self.loss_mode!r}")
        if not 0 <= self.label_flip_rate < 0.5:
            raise ParameterError("label_flip_rate must lie in [0, 0.5)")
        if self.selected_attributes is not None:
            object.__setattr__(self, "selected_attributes", tuple(int(a) for a in self.selected_attributes))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Latent codes stored column-wise: ``X`` (N, d), ``identities`` (N,), ``semantics`` (N, m)."""

    X: np.ndarray
    identities: np.ndarray
    semantics: np.ndarray
    num_identities: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        ids = np.array(self.identities, dtype=np.int64)
        S = np.array(self.semantics, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] < 2:
            raise MalformedDataError("X must be (N, d) with d >= 2")
        if S.ndim != 2 or S.shape[0] != X.shape[0] or ids.shape != (X.shape[0],):
            raise MalformedDataError("identities/semantics do not match X")
        if S.size and not np.isin(S, (0, 1)).all():
            raise MalformedDataError("semantic labels must be binary")
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_identities):
            raise MalformedDataError("identity id out of range")
        if not np.all(np.isfinite(X)):
            raise MalformedDataError("non-finite latent values")
        for a in (X, ids, S):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "identities", ids)
        object.__setattr__(self, "semantics", S)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.semantics.shape[1]

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, i) -> LatentCode:
        return LatentCode(self.X[i], int(self.identities[i]), SemanticLabel(tuple(self.semantics[i])))

    @property
    def codes(self) -> list:
        return [self[i] for i in range(len(self))]

    def clusters(self, selected=None) -> np.ndarray:
        return cluster_ids(self.semantics, selected)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.identities[idx], self.semantics[idx], self.num_identities, dict(self.meta))

    @classmethod
    def from_codes(cls, codes: Sequence[LatentCode], num_identities: int | None = None) -> "Dataset":
        if not codes:
            raise MalformedDataError("empty code list")
        d, m = codes[0].d, len(codes[0].semantic)
        if any(c.d != d or len(c.semantic) != m for c in codes):
            raise MalformedDataError("codes disagree on d or m")
        ids = [c.identity_id for c in codes]
        return cls(
            np.stack([c.values for c in codes]),
            np.array(ids),
            np.array([c.semantic.bits for c in codes]),
            num_identities if num_identities is not None else max(ids) + 1,
        )

    # JSON layout: {d, m, num_identities, codes: [{values, identity_id, semantic}]}
    def to_json(self) -> str:
        doc = {
            "d": self.d,
            "m": self.m,
            "num_identities": int(self.num_identities),
            "codes": [
                {
                    "values": [float(v) for v in self.X[i]],
                    "identity_id": int(self.identities[i]),
                    "semantic": [int(b) for b in self.semantics[i]],
                }
                for i in range(len(self))
            ],
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        try:
            doc = json.loads(text)
            d, m = int(doc["d"]), int(doc["m"])
            codes = doc["codes"]
            X = np.array([c["values"] for c in codes], dtype=float).reshape(len(codes), d)
            S = np.array([c["semantic"] for c in codes], dtype=np.int64).reshape(len(codes), m)
            ids = np.array([c["identity_id"] for c in codes], dtype=np.int64)
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedDataError(f"malformed dataset document: {e}") from e
        return cls(X, ids, S, int(doc["num_identities"]))


def perceptual_distance(a, b) -> float:
    """Euclidean distance between two latent codes."""
    va, vb = _vec(a), _vec(b)
    if va.shape != vb.shape:
        raise MalformedDataError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    return float(np.linalg.norm(va - vb))


def are_adjacent(a, b, p: PrivacyParams) -> bool:
    # inclusive boundary
    return perceptual_distance(a, b) <= p.beta_adj


def pairwise_distances(X: np.ndarray, Y: np.ndarray | None = None) -> np.ndarray:
    Y = X if Y is None else Y
    sq = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.sqrt(np.maximum(sq, 0.0))


def median_intra_cluster_distance(data: Dataset, selected=None) -> float:
    """Default adjacency radius: median pairwise latent distance inside semantic clusters."""
    labels = data.clusters(selected)
    chunks = []
    for c in np.unique(labels):
        Xc = data.X[labels == c]
        if len(Xc) < 2:
            continue
        D = pairwise_distances(Xc)
        chunks.append(D[np.triu_indices(len(Xc), 1)])
    if not chunks:
        raise MalformedDataError("no cluster has two members")
    return float(np.median(np.concatenate(chunks)))
