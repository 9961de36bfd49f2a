"""Quality and privacy measurements: SSIM, attribute preservation, re-identification, detection proxy, sensitivity."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Dataset, MalformedDataError, ParameterError, PrivacyParams, cluster_ids
from .world import AttributeClassifier, LinearGenerator, invert, predict_semantics, render

log = logging.getLogger(__name__)

DETECT_THRESHOLD = 0.25


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ParameterError("window must be a positive odd integer")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ParameterError("SSIM constants must be positive")


def ssim(a, b, cfg: SSIMConfig = SSIMConfig()) -> float:
    """Mean SSIM over all stride-1 windows with uniform weights."""
    return float(ssim_batch(np.asarray(a, float)[None], np.asarray(b, float)[None], cfg)[0])


def ssim_batch(A, B, cfg: SSIMConfig = SSIMConfig()) -> np.ndarray:
    """Per-pair SSIM for stacks of images shaped (n, H, W)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise MalformedDataError(f"shape mismatch {A.shape} vs {B.shape}")
    w = cfg.window
    if min(A.shape[-2:]) < w:
        raise MalformedDataError(f"images smaller than the {w}x{w} window")
    C1 = (cfg.k1 * cfg.dynamic_range) ** 2
    C2 = (cfg.k2 * cfg.dynamic_range) ** 2
    wa = sliding_window_view(A, (w, w), axis=(-2, -1))
    wb = sliding_window_view(B, (w, w), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return (num / den).mean(axis=(-2, -1))


def _latents(images, generator):
    imgs = np.asarray(images, dtype=float)
    return np.atleast_2d(invert(generator, imgs))


def preservation_ratio_latent(X_orig, X_obf, classifier: AttributeClassifier, selected=None, truth=None) -> float:
    """Fraction of pairs whose selected predicted attributes survive obfuscation.

    Compares prediction on the obfuscated code with the prediction on the
    original (or with ``truth`` labels when given).
    """
    X_orig, X_obf = np.atleast_2d(X_orig), np.atleast_2d(X_obf)
    if X_orig.shape[0] != X_obf.shape[0] or X_orig.shape[0] == 0:
        raise MalformedDataError("preservation ratio needs equal, non-empty lists")
    sel = slice(None) if selected is None else list(selected)
    ref = np.asarray(truth)[:, sel] if truth is not None else predict_semantics(classifier, X_orig)[:, sel]
    got = predict_semantics(classifier, X_obf)[:, sel]
    return float(np.mean(np.all(ref == got, axis=1)))


def preservation_ratio(originals, obfuscated, classifier, selected_attributes=None, generator=None, truth=None):
    if generator is None:
        raise ParameterError("a generator is needed to invert images")
    return preservation_ratio_latent(
        _latents(originals, generator), _latents(obfuscated, generator), classifier, selected_attributes, truth
    )


def reid_rate_latent(gallery: Dataset, X_probe, probe_identities, metric: str = "euclidean") -> float:
    """1-NN identity matching of probe codes against the gallery."""
    if len(gallery) == 0:
        raise MalformedDataError("empty gallery")
    P = np.atleast_2d(X_probe)
    G = gallery.X
    if metric == "euclidean":
        score = (P * P).sum(1)[:, None] + (G * G).sum(1)[None, :] - 2.0 * P @ G.T
    elif metric == "cosine":
        Pn = P / np.maximum(np.linalg.norm(P, axis=1, keepdims=True), 1e-300)
        Gn = G / np.maximum(np.linalg.norm(G, axis=1, keepdims=True), 1e-300)
        score = -(Pn @ Gn.T)
    else:
        raise ParameterError(f"unknown metric {metric!r}")
    nn = np.argmin(score, axis=1)
    return float(np.mean(gallery.identities[nn] == np.asarray(probe_identities)))


def reid_rate(gallery: Dataset, probes_obfuscated, probe_identities, generator: LinearGenerator, metric="euclidean"):
    return reid_rate_latent(gallery, _latents(probes_obfuscated, generator), probe_identities, metric)


def inversion_residual(images, generator: LinearGenerator) -> np.ndarray:
    """||img - render(invert(img))|| / ||img - midgray|| per image."""
    imgs = np.asarray(images, dtype=float).reshape(-1, generator.height, generator.width)
    rec = render(generator, invert(generator, imgs)).reshape(len(imgs), -1)
    flat = imgs.reshape(len(imgs), -1)
    num = np.linalg.norm(flat - rec, axis=1)
    den = np.linalg.norm(flat - generator.bias, axis=1)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def detect_rate(images, generator: LinearGenerator, threshold: float = DETECT_THRESHOLD) -> float:
    """Fraction of images that still lie near the generator's image manifold."""
    r = inversion_residual(images, generator)
    if r.size == 0:
        raise MalformedDataError("no images")
    return float(np.mean(r < threshold))


def estimate_sensitivity(encoder, data: Dataset, p: PrivacyParams, selected=None, transform=None) -> dict:
    """Per-cluster max of d_Y(f(x), f(x')) / d_X(x, x') over same-cluster adjacent pairs.

    ``transform(Y, X, labels)`` post-processes encoder outputs (e.g. clipping).
    Clusters without adjacent pairs report 0.
    """
    labels = cluster_ids(data.semantics, selected)
    Y = np.asarray(encoder(data.X), dtype=float)
    if transform is not None:
        Y = transform(Y, data.X, labels)
    out = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        Xc, Yc = data.X[idx], Y[idx]
        dX = np.linalg.norm(Xc[:, None, :] - Xc[None, :, :], axis=-1)
        dY = np.linalg.norm(Yc[:, None, :] - Yc[None, :, :], axis=-1)
        mask = (dX <= p.beta_adj) & (dX > 0)
        if not mask.any():
            log.warning("cluster %d has no adjacent pairs; sensitivity reported as 0", c)
            out[int(c)] = 0.0
            continue
        out[int(c)] = float((dY[mask] / dX[mask]).max())
    return out


@dataclass
class EvalRow:
    epsilon: float
    method: str
    ssim_mean: float
    ssim_std: float
    preservation_ratio: float
    reid_rate: float
    detect_rate: float
    seeds: int

    def __post_init__(self):
        for name in ("preservation_ratio", "reid_rate", "detect_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name}={v} outside [0, 1]")
        if self.seeds < 1:
            raise ParameterError("seed count must be >= 1")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    detect_threshold: float = DETECT_THRESHOLD
    settings: dict = field(default_factory=dict)

    HEADER = ("epsilon", "method", "ssim_mean", "ssim_std", "preservation_ratio", "reid_rate", "detect_rate", "seeds")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for r in self.rows:
            w.writerow([getattr(r, h) for h in self.HEADER])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {"detect_threshold": self.detect_threshold, "settings": self.settings, "rows": [asdict(r) for r in self.rows]},
            indent=1,
        )
