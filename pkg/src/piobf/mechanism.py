"""The d_Y-private noise mechanism and per-cluster sensitivity clipping.

Noise density on R^k centred at ``y0``::

    D(y0)(z) = C(eps, k) * exp(-eps * ||y0 - z||)
    C(eps, k) = 1/2 * (eps / sqrt(pi))**k * Gamma(k/2) / Gamma(k)

Sampling is done in hyperspherical coordinates around ``y0``: the radius is
Gamma(shape=k, rate=eps) and the direction is uniform on the unit sphere.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import Dataset, MalformedDataError, ParameterError, PrivacyParams, _vec, cluster_ids
from .rng import make_rng


def log_norm_constant(epsilon: float, k: int) -> float:
    """ln C(eps, k), with factorials generalised to Gamma so odd k also normalises."""
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    if int(k) != k or k < 1:
        raise ParameterError(f"k must be a positive integer, got {k}")
    return (
        math.log(0.5)
        + k * (math.log(epsilon) - 0.5 * math.log(math.pi))
        + math.lgamma(k / 2)
        - math.lgamma(k)
    )


def log_sphere_area(k: int) -> float:
    """ln of the surface area of the unit (k-1)-sphere in R^k."""
    return math.log(2.0) + (k / 2) * math.log(math.pi) - math.lgamma(k / 2)


def log_density(y0, z, p: PrivacyParams) -> np.ndarray | float:
    y0, z = _vec(y0), _vec(z)
    if y0.shape[-1] != p.k or z.shape[-1] != p.k:
        raise MalformedDataError(f"expected vectors of length k={p.k}")
    dist = np.linalg.norm(z - y0, axis=-1)
    out = log_norm_constant(p.epsilon, p.k) - p.epsilon * dist
    return float(out) if np.ndim(out) == 0 else out


def density(y0, z, p: PrivacyParams):
    return np.exp(log_density(y0, z, p))


def sample_gamma(shape: float, rate: float, rng: np.random.Generator, size=None) -> np.ndarray:
    """Marsaglia-Tsang squeeze/rejection sampler for Gamma(shape, rate), shape >= 1."""
    if shape < 1:
        raise ParameterError("sampler requires shape >= 1")
    n = 1 if size is None else int(np.prod(size))
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    filled = 0
    while filled < n:
        want = n - filled
        # acceptance is > 95% for shape >= 1; oversample a little to finish in ~one pass
        batch = want + 16 + want // 16
        x = rng.standard_normal(batch)
        u = rng.random(batch)
        v = (1.0 + c * x) ** 3
        pos = v > 0
        x2 = x * x
        squeeze = u < 1.0 - 0.0331 * x2 * x2
        with np.errstate(divide="ignore", invalid="ignore"):
            full = np.log(u) < 0.5 * x2 + d * (1.0 - v + np.log(np.where(pos, v, 1.0)))
        ok = pos & (squeeze | full)
        got = (d * v[ok])[:want]
        out[filled : filled + got.size] = got
        filled += got.size
    out /= rate
    return out[0] if size is None else out.reshape(size)


def sample_radial(p: PrivacyParams, rng: np.random.Generator, size=None):
    return sample_gamma(p.k, p.epsilon, rng, size)


def sample_unit_sphere(k: int, rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniform direction on the unit (k-1)-sphere via normalised Gaussians."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    n = 1 if size is None else int(size)
    if k == 1:
        u = np.where(rng.random((n, 1)) < 0.5, -1.0, 1.0)
    else:
        u = rng.standard_normal((n, k))
        norms = np.linalg.norm(u, axis=1, keepdims=True)
        # a zero Gaussian vector has probability zero; redraw defensively
        while np.any(norms == 0):
            bad = norms[:, 0] == 0
            u[bad] = rng.standard_normal((bad.sum(), k))
            norms = np.linalg.norm(u, axis=1, keepdims=True)
        u = u / norms
    return u[0] if size is None else u


def sample_noise(y0, p: PrivacyParams, rng: np.random.Generator, radial=None) -> np.ndarray:
    """Draw z ~ D(y0). ``y0`` may be a single vector or an (n, k) batch.

    ``radial`` forces the radius (scalar or per-row array); used for
    degenerate-noise checks.
    """
    y0 = _vec(y0)
    if y0.shape[-1] != p.k:
        raise MalformedDataError(f"expected length k={p.k}, got {y0.shape[-1]}")
    single = y0.ndim == 1
    Y = np.atleast_2d(y0)
    n = Y.shape[0]
    r = sample_radial(p, rng, n) if radial is None else np.broadcast_to(np.asarray(radial, float), (n,))
    u = sample_unit_sphere(p.k, rng, n)
    Z = Y + r[:, None] * u
    return Z[0] if single else Z


@dataclass
class NoiseSampler:
    """Stateful sampler bound to one ``(seed, stream_key)`` stream."""

    params: PrivacyParams
    seed: int
    stream_key: int = 0

    def __post_init__(self):
        self.rng = make_rng(self.seed, self.stream_key)

    def sample(self, y0):
        return sample_noise(y0, self.params, self.rng)

    def radial(self, size=None):
        return sample_radial(self.params, self.rng, size)


def dump_samples_csv(path, y0, p: PrivacyParams, n: int, seed: int, stream_key: int = 0):
    """Diagnostic dump: one row per sample with columns sample_index, r, z_1..z_k."""
    rng = make_rng(seed, stream_key)
    Z = sample_noise(np.tile(_vec(y0), (n, 1)), p, rng)
    r = np.linalg.norm(Z - _vec(y0), axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "r"] + [f"z_{j + 1}" for j in range(p.k)])
        for i in range(n):
            w.writerow([i, repr(float(r[i]))] + [repr(float(v)) for v in Z[i]])


# -- clipping -------------------------------------------------------------


@dataclass(frozen=True)
class ClusterStats:
    cluster_id: int
    anchor_latent: np.ndarray
    anchor_transformed: np.ndarray
    member_count: int
    anchor_index: int = -1

    def __post_init__(self):
        if self.member_count < 1:
            raise ParameterError("member_count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "cluster_id": int(self.cluster_id),
            "anchor_index": int(self.anchor_index),
            "member_count": int(self.member_count),
            "anchor_latent": [float(v) for v in self.anchor_latent],
            "anchor_transformed": [float(v) for v in self.anchor_transformed],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusterStats":
        return cls(
            int(doc["cluster_id"]),
            np.array(doc["anchor_latent"], dtype=float),
            np.array(doc["anchor_transformed"], dtype=float),
            int(doc["member_count"]),
            int(doc.get("anchor_index", -1)),
        )


def compute_cluster_stats(encoder, data: Dataset, selected=None) -> dict:
    """One anchor per non-empty cluster: the member nearest the cluster centroid."""
    labels = cluster_ids(data.semantics, selected)
    stats = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        Xc = data.X[idx]
        centroid = Xc.mean(axis=0)
        a = idx[int(np.argmin(np.linalg.norm(Xc - centroid, axis=1)))]
        xa = data.X[a]
        stats[int(c)] = ClusterStats(int(c), xa.copy(), np.asarray(encoder(xa[None, :]))[0], len(idx), int(a))
    return stats


def clip_transformed(y, stats: ClusterStats, x, p: PrivacyParams, mode: str = "max") -> np.ndarray:
    """Pull ``y = f(x)`` towards the cluster anchor so ``||out - f(x_a)|| <= delta * ||x - x_a||``.

    ``mode="max"`` scales by ``1 / max(1, ||g|| / C)`` (identity inside the
    ball); ``mode="rescale"`` always projects onto the sphere of radius C.
    Accepts single vectors or row-aligned batches.
    """
    y, x = _vec(y), _vec(x)
    fa, xa = stats.anchor_transformed, stats.anchor_latent
    if y.shape[-1] != fa.shape[-1] or x.shape[-1] != xa.shape[-1]:
        raise MalformedDataError("dimension mismatch in clip")
    g = y - fa
    gnorm = np.linalg.norm(g, axis=-1, keepdims=True)
    C = p.delta * np.linalg.norm(x - xa, axis=-1, keepdims=True)
    if mode == "max":
        denom = np.maximum(1.0, np.divide(gnorm, C, out=np.full_like(gnorm, np.inf), where=C > 0))
    elif mode == "rescale":
        denom = np.divide(gnorm, C, out=np.full_like(gnorm, np.inf), where=C > 0)
        denom = np.where(gnorm == 0, 1.0, denom)
    else:
        raise ParameterError(f"unknown clip mode {mode!r}")
    # C == 0 means x is the anchor: return f(x_a) unchanged
    scaled = np.where(np.isinf(denom), 0.0, g / np.where(np.isinf(denom), 1.0, denom))
    return fa + scaled


def clip_batch(Y, X, labels, stats: dict, p: PrivacyParams, mode: str = "max") -> np.ndarray:
    out = np.empty_like(np.asarray(Y, dtype=float))
    for c in np.unique(labels):
        rows = labels == c
        out[rows] = clip_transformed(Y[rows], stats[int(c)], X[rows], p, mode)
    return out


def obfuscate_transformed(x, encoder, stats: ClusterStats, p: PrivacyParams, rng, radial=None, clip=True):
    """M(x) = H(f~(x)): encode, clip towards the anchor, add d_Y-private noise."""
    xv = _vec(x)
    y = np.asarray(encoder(np.atleast_2d(xv)))
    y = y[0] if xv.ndim == 1 else y
    if clip:
        y = clip_transformed(y, stats, xv, p)
    return sample_noise(y, p, rng, radial=radial)
