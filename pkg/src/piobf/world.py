"""A controllable stand-in for a pretrained face GAN.

Images are produced by a linear generator with orthonormal basis columns,
so inversion is the transpose. Latent codes come from a population with
semantic clusters (one per attribute pattern) and identity sub-clusters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Dataset, MalformedDataError, ParameterError, _vec, cluster_to_bits, pairwise_distances
from .rng import make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LinearGenerator:
    basis: np.ndarray  # (H*W, d), orthonormal columns
    height: int
    width: int
    bias: np.ndarray
    scale: float = 1.0
    seed: int = 0

    @property
    def d(self) -> int:
        return self.basis.shape[1]

    def with_scale(self, scale: float) -> "LinearGenerator":
        return replace(self, scale=float(scale))

    def to_dict(self) -> dict:
        # the basis is regenerated from the seed on load
        return {"height": self.height, "width": self.width, "d": self.d, "seed": int(self.seed), "scale": self.scale}

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearGenerator":
        g = make_generator(doc["height"], doc["width"], doc["d"], doc["seed"])
        return g.with_scale(doc["scale"])


def make_generator(height: int, width: int, d: int, seed: int) -> LinearGenerator:
    n = height * width
    if n < d:
        raise ParameterError(f"H*W={n} must be >= d={d}")
    rng = make_rng(seed, 0x6E6E)
    Q, R = np.linalg.qr(rng.standard_normal((n, d)))
    # fix column signs so the factorisation is unique
    Q = Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))
    return LinearGenerator(Q, height, width, np.full(n, 0.5), 1.0, seed)


def render_raw(g: LinearGenerator, X) -> np.ndarray:
    """Unclamped pixel vectors, shape (n, H*W)."""
    X = np.atleast_2d(_vec(X))
    if X.shape[1] != g.d:
        raise MalformedDataError(f"expected latent length {g.d}, got {X.shape[1]}")
    return g.bias + g.scale * X @ g.basis.T


def render(g: LinearGenerator, x) -> np.ndarray:
    """Image(s) of shape (H, W) or (n, H, W) with pixels clamped to [0, 1]."""
    xv = _vec(x)
    imgs = np.clip(render_raw(g, xv), 0.0, 1.0).reshape(-1, g.height, g.width)
    return imgs[0] if xv.ndim == 1 else imgs


def invert(g: LinearGenerator, img) -> np.ndarray:
    """Least-squares latent code(s) for image(s); exact on unclamped renders."""
    img = np.asarray(img, dtype=float)
    single = img.ndim == 2
    if img.shape[-2:] != (g.height, g.width):
        raise MalformedDataError(f"image shape {img.shape[-2:]} does not match generator {(g.height, g.width)}")
    P = img.reshape(-1, g.height * g.width)
    X = (P - g.bias) @ g.basis / g.scale
    return X[0] if single else X


def calibrate_scale(g: LinearGenerator, data: Dataset, clamp_fraction: float = 1e-3) -> LinearGenerator:
    """Pick the render scale so that at most ``clamp_fraction`` of population pixels clamp."""
    proj = np.abs(data.X @ g.basis.T).ravel()
    q = np.quantile(proj, 1.0 - clamp_fraction, method="higher")
    return g.with_scale(0.5 / q if q > 0 else 1.0)


def clamp_fraction(g: LinearGenerator, X) -> float:
    raw = render_raw(g, X)
    return float(np.mean((raw < 0) | (raw > 1)))


# -- population -----------------------------------------------------------


@dataclass(frozen=True)
class PopulationSpec:
    d: int = 32
    m: int = 4
    num_identities: int = 128
    samples_per_identity: int = 16
    cluster_spread: float = 0.1
    identity_spread: float = 0.04
    attribute_scale: float = 1.5
    seed: int = 0
    exclude_patterns: tuple = ()
    entangled: bool = False
    max_attempts: int = 1000

    def __post_init__(self):
        if self.num_identities < 2:
            raise ParameterError("num_identities must be >= 2")
        if not 0 < self.identity_spread < self.cluster_spread:
            raise ParameterError("need 0 < identity_spread < cluster_spread")
        if self.d < 2 or self.m < 1 or self.samples_per_identity < 1:
            raise ParameterError("d >= 2, m >= 1 and samples_per_identity >= 1 required")
        patterns = tuple(_pattern_id(p, self.m) for p in self.exclude_patterns)
        object.__setattr__(self, "exclude_patterns", patterns)
        if len(set(patterns)) >= 2**self.m:
            raise ParameterError("every semantic pattern is excluded")


def _pattern_id(p, m: int) -> int:
    if isinstance(p, str):
        if len(p) != m or set(p) - {"0", "1"}:
            raise ParameterError(f"pattern {p!r} is not an {m}-bit string")
        return int(p, 2)
    p = int(p)
    if not 0 <= p < 2**m:
        raise ParameterError(f"pattern {p} out of range for m={m}")
    return p


def generate_population(spec: PopulationSpec) -> Dataset:
    """Sample cluster means, identity means and per-identity samples.

    A cluster mean is the sum of signed attribute directions plus a
    Gaussian jitter; means are redrawn until every pair is at least
    ``4 * cluster_spread`` apart. Entangled mode shrinks the attribute
    directions so neighbouring clusters overlap.
    """
    rng = make_rng(spec.seed, 0x9090)
    d, m = spec.d, spec.m
    patterns = [c for c in range(2**m) if c not in spec.exclude_patterns]
    attr_scale = spec.attribute_scale * (0.15 if spec.entangled else 1.0)
    jitter = 0.25 * attr_scale
    min_sep = 4.0 * spec.cluster_spread
    for attempt in range(spec.max_attempts):
        dirs = rng.standard_normal((m, d))
        dirs *= attr_scale / np.linalg.norm(dirs, axis=1, keepdims=True)
        signs = np.array([[2 * b - 1 for b in cluster_to_bits(c, m)] for c in patterns], dtype=float)
        means = signs @ dirs + jitter * rng.standard_normal((len(patterns), d))
        D = pairwise_distances(means)
        if len(patterns) < 2 or D[np.triu_indices(len(patterns), 1)].min() >= min_sep:
            break
    else:
        raise ParameterError(
            f"could not separate {len(patterns)} cluster means by {min_sep:.3g} in {spec.max_attempts} "
            "attempts; use a larger d or a smaller cluster_spread"
        )

    # identities are dealt round-robin to the non-empty clusters
    X, ids, S = [], [], []
    for ident in range(spec.num_identities):
        ci = ident % len(patterns)
        mu = means[ci] + spec.cluster_spread * rng.standard_normal(d)
        pts = mu + spec.identity_spread * rng.standard_normal((spec.samples_per_identity, d))
        X.append(pts)
        ids.extend([ident] * spec.samples_per_identity)
        S.extend([cluster_to_bits(patterns[ci], m)] * spec.samples_per_identity)
    meta = {"cluster_means": {int(c): means[i].tolist() for i, c in enumerate(patterns)}, "attempts": attempt + 1}
    return Dataset(np.concatenate(X), np.array(ids), np.array(S), spec.num_identities, meta)


def split_by_sample(data: Dataset, frac: float, seed: int):
    """Split so every identity appears on both sides (used for gallery/probe and held-out tests)."""
    rng = make_rng(seed, 0x5A5A)
    test = np.zeros(len(data), dtype=bool)
    for ident in np.unique(data.identities):
        idx = np.flatnonzero(data.identities == ident)
        n_test = max(1, int(round(frac * len(idx)))) if len(idx) > 1 else 0
        test[rng.permutation(idx)[:n_test]] = True
    return np.flatnonzero(~test), np.flatnonzero(test)


# -- attribute classifier -------------------------------------------------


@dataclass(frozen=True, eq=False)
class AttributeClassifier:
    weights: np.ndarray  # (m, d)
    biases: np.ndarray  # (m,)
    constant: tuple = field(default_factory=tuple)  # attributes with a single observed value

    def logits(self, X) -> np.ndarray:
        return np.atleast_2d(_vec(X)) @ self.weights.T + self.biases

    def proba(self, X) -> np.ndarray:
        return _sigmoid(self.logits(X))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "biases": self.biases.tolist(), "constant": list(self.constant)}

    @classmethod
    def from_dict(cls, doc: dict) -> "AttributeClassifier":
        return cls(np.array(doc["weights"], float), np.array(doc["biases"], float), tuple(doc.get("constant", ())))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def train_attribute_classifier(
    data: Dataset, epochs: int = 500, lr: float = 0.5, l2: float = 1e-4
) -> AttributeClassifier:
    """Per-attribute logistic regression on standardised codes, full-batch gradient descent."""
    X, S = data.X, data.semantics.astype(float)
    mu, sd = X.mean(0), X.std(0) + 1e-12
    Z = (X - mu) / sd
    n, d = Z.shape
    m = S.shape[1]
    W = np.zeros((m, d))
    b = np.zeros(m)
    constant = []
    for j in range(m):
        frac = S[:, j].mean()
        if frac in (0.0, 1.0):
            constant.append(j)
            log.warning("attribute %d is constant (%d); using a constant predictor", j, int(frac))
            b[j] = 12.0 if frac == 1.0 else -12.0
            continue
        w, c = np.zeros(d), 0.0
        for _ in range(epochs):
            p = _sigmoid(Z @ w + c)
            r = p - S[:, j]
            w -= lr * (Z.T @ r / n + l2 * w)
            c -= lr * r.mean()
        W[j], b[j] = w, c
    # fold the standardisation into the weights
    Wf = W / sd
    bf = b - Wf @ mu
    return AttributeClassifier(Wf, bf, tuple(constant))


def predict_semantics(c: AttributeClassifier, x) -> np.ndarray:
    """Thresholded attribute bits, shape (m,) or (n, m)."""
    xv = _vec(x)
    bits = (c.proba(xv) >= 0.5).astype(np.int64)
    return bits[0] if xv.ndim == 1 else bits


# -- PGM codec ------------------------------------------------------------


def to_bytes(img) -> np.ndarray:
    # round half up from [0, 1] to 0..255
    return np.floor(np.clip(np.asarray(img, float), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, img) -> None:
    px = to_bytes(img)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise MalformedDataError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise MalformedDataError(f"{path}: 16-bit PGM unsupported")
    px = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return px.astype(float) / maxval


def save_generator(path, g: LinearGenerator) -> None:
    with open(path, "w") as fh:
        json.dump(g.to_dict(), fh, sort_keys=True)


def load_generator(path) -> LinearGenerator:
    with open(path) as fh:
        return LinearGenerator.from_dict(json.load(fh))
