"""Encoder/decoder networks, the three training losses and the training loop.

Networks are plain fully connected ReLU stacks held as lists of numpy
arrays; gradients are accumulated by hand in reverse mode.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Dataset, MalformedDataError, ParameterError, PrivacyParams, TrainConfig, _vec, cluster_ids
from .mechanism import ClusterStats, clip_batch, compute_cluster_stats, sample_noise
from .rng import derive_key, make_rng
from .world import AttributeClassifier, LinearGenerator, _sigmoid, invert, predict_semantics, render

log = logging.getLogger(__name__)

P_CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_finite=None):
        super().__init__(message)
        self.last_finite = last_finite


@dataclass(eq=False)
class MLP:
    """Weights ``W[l]`` have shape (out, in); ReLU on every layer but the last."""

    weights: list
    biases: list
    trained: bool = False

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def __call__(self, X) -> np.ndarray:
        return forward(self, X)[0]

    def copy(self) -> "MLP":
        return MLP([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.trained)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    @classmethod
    def from_flat(cls, sizes, flat, trained=False) -> "MLP":
        flat = np.asarray(flat, dtype=float)
        Ws, bs, pos = [], [], 0
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            Ws.append(flat[pos : pos + n_in * n_out].reshape(n_out, n_in).copy())
            pos += n_in * n_out
            bs.append(flat[pos : pos + n_out].copy())
            pos += n_out
        if pos != flat.size:
            raise MalformedDataError(f"flat parameter vector has {flat.size} entries, expected {pos}")
        return cls(Ws, bs, trained)

    def zeros_like(self) -> "MLP":
        return MLP([np.zeros_like(W) for W in self.weights], [np.zeros_like(b) for b in self.biases])

    def axpy(self, alpha: float, other: "MLP") -> None:
        """In-place ``self += alpha * other``."""
        for W, dW in zip(self.weights, other.weights):
            W += alpha * dW
        for b, db in zip(self.biases, other.biases):
            b += alpha * db

    def __add__(self, other: "MLP") -> "MLP":
        return MLP(
            [a + b for a, b in zip(self.weights, other.weights)], [a + b for a, b in zip(self.biases, other.biases)]
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(W)) for W in self.weights) and all(np.all(np.isfinite(b)) for b in self.biases)


EncoderParams = MLP
DecoderParams = MLP


def init_mlp(sizes, rng: np.random.Generator) -> MLP:
    """He-normal weights, zero biases."""
    Ws = [rng.standard_normal((n_out, n_in)) * math.sqrt(2.0 / n_in) for n_in, n_out in zip(sizes[:-1], sizes[1:])]
    return MLP(Ws, [np.zeros(W.shape[0]) for W in Ws])


def forward(net: MLP, X):
    a = np.atleast_2d(np.asarray(X, dtype=float))
    if a.shape[1] != net.weights[0].shape[1]:
        raise MalformedDataError(f"input width {a.shape[1]} != {net.weights[0].shape[1]}")
    inputs, pre = [], []
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = a @ W.T + b
        pre.append(z)
        a = z if l == last else np.maximum(z, 0.0)
    return a, (inputs, pre)


def backward(net: MLP, cache, d_out):
    """Return (parameter gradient as an MLP, gradient w.r.t. the input)."""
    inputs, pre = cache
    dWs, dbs = [None] * len(net.weights), [None] * len(net.weights)
    g = d_out
    for l in range(len(net.weights) - 1, -1, -1):
        if l != len(net.weights) - 1:
            g = g * (pre[l] > 0)
        dWs[l] = g.T @ inputs[l]
        dbs[l] = g.sum(axis=0)
        g = g @ net.weights[l]
    return MLP(dWs, dbs), g


def encode(theta: MLP, x) -> np.ndarray:
    xv = _vec(x)
    y = theta(xv)
    return y[0] if xv.ndim == 1 else y


def decode(omega: MLP, y) -> np.ndarray:
    yv = _vec(y)
    x = omega(yv)
    return x[0] if yv.ndim == 1 else x


# -- losses -----------------------------------------------------------------


def _triplet_terms(theta, X, triplets, mu):
    T = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    n = T.shape[0]
    F, cache = forward(theta, X[T.T.ravel()])
    fa, fp, fn = F[:n], F[n : 2 * n], F[2 * n :]
    raw = ((fa - fp) ** 2).sum(1) - ((fa - fn) ** 2).sum(1) + mu
    return raw, (fa, fp, fn), cache


def triplet_loss(theta: MLP, triplets, X, mu: float) -> float:
    """Sum over triplets of max(0, ||f(a)-f(p)||^2 - ||f(a)-f(n)||^2 + mu)."""
    if len(triplets) == 0:
        return 0.0
    raw, _, _ = _triplet_terms(theta, _as_matrix(X), triplets, mu)
    return float(np.maximum(raw, 0.0).sum())


def triplet_grads(theta: MLP, X, triplets, mu: float):
    X = _as_matrix(X)
    if len(triplets) == 0:
        return 0.0, theta.zeros_like()
    raw, (fa, fp, fn), cache = _triplet_terms(theta, X, triplets, mu)
    active = (raw > 0).astype(float)[:, None]  # subgradient 0 at the kink
    d_fa = 2.0 * (fn - fp) * active
    d_fp = -2.0 * (fa - fp) * active
    d_fn = 2.0 * (fa - fn) * active
    g, _ = backward(theta, cache, np.concatenate([d_fa, d_fp, d_fn]))
    return float(np.maximum(raw, 0.0).sum()), g


def recon_loss(theta: MLP, omega: MLP, X) -> float:
    """Sum of Euclidean (unsquared) reconstruction errors."""
    X = _as_matrix(X)
    return float(np.linalg.norm(omega(theta(X)) - X, axis=1).sum())


def recon_grads(theta: MLP, omega: MLP, X):
    X = _as_matrix(X)
    Y, c_enc = forward(theta, X)
    Xh, c_dec = forward(omega, Y)
    E = Xh - X
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    d_xh = np.divide(E, norms, out=np.zeros_like(E), where=norms > 0)
    g_omega, d_y = backward(omega, c_dec, d_xh)
    g_theta, _ = backward(theta, c_enc, d_y)
    return float(norms.sum()), g_theta, g_omega


def _ce_parts(classifier: AttributeClassifier, selected):
    sel = list(range(classifier.weights.shape[0])) if selected is None else list(selected)
    return classifier.weights[sel], classifier.biases[sel], sel


def ce_loss(theta: MLP, omega: MLP, X, S, classifier: AttributeClassifier, selected=None) -> float:
    """Per-attribute binary cross-entropy of the classifier on h(f(x)), probabilities clamped."""
    return ce_grads(theta, omega, X, S, classifier, selected, need_grad=False)[0]


def ce_grads(theta, omega, X, S, classifier, selected=None, need_grad=True):
    X = _as_matrix(X)
    W, b, sel = _ce_parts(classifier, selected)
    s = np.asarray(S, dtype=float).reshape(X.shape[0], -1)[:, sel]
    Y, c_enc = forward(theta, X)
    Xh, c_dec = forward(omega, Y)
    p = _sigmoid(Xh @ W.T + b)
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    loss = float(-(s * np.log(pc) + (1.0 - s) * np.log(1.0 - pc)).sum())
    if not need_grad:
        return loss, None, None
    inside = (p > P_CLAMP) & (p < 1.0 - P_CLAMP)
    d_logit = np.where(inside, p - s, 0.0)
    g_omega, d_y = backward(omega, c_dec, d_logit @ W)
    g_theta, _ = backward(theta, c_enc, d_y)
    return loss, g_theta, g_omega


@dataclass
class LossTerms:
    triplet: float = 0.0
    ce: float = 0.0
    recon: float = 0.0


def gradients(theta, omega, X, S, triplets, classifier, mu, loss_mode="triplet_ce", selected=None):
    """Gradients of one training step.

    ``triplet_ce``: theta gets grad(L_triplet + L_ce), omega gets grad(L_recon).
    ``mse_only``: both nets get grad(L_recon).
    """
    X = _as_matrix(X)
    terms = LossTerms()
    if loss_mode == "mse_only":
        terms.recon, g_theta, g_omega = recon_grads(theta, omega, X)
        return terms, g_theta, g_omega
    terms.triplet, g_tri = triplet_grads(theta, X, triplets, mu)
    terms.ce, g_ce, _ = ce_grads(theta, omega, X, S, classifier, selected)
    terms.recon, _, g_omega = recon_grads(theta, omega, X)
    return terms, g_tri + g_ce, g_omega


def _as_matrix(X):
    return np.atleast_2d(np.asarray(getattr(X, "X", X), dtype=float))


# -- triplet mining ---------------------------------------------------------


def mine_triplets(labels, per_anchor: int, rng: np.random.Generator, indices=None, warn=True) -> np.ndarray:
    """(T, 3) array of (anchor, positive, negative) indices.

    ``labels`` is a Dataset or an array of cluster ids. Positives come
    uniformly from the anchor's cluster, negatives from every other cluster.
    Anchors alone in their cluster are skipped.
    """
    if isinstance(labels, Dataset):
        labels = labels.clusters()
    labels = np.asarray(labels)
    idx = np.arange(labels.size) if indices is None else np.asarray(indices)
    if per_anchor <= 0 or idx.size == 0:
        return np.empty((0, 3), dtype=np.int64)
    lab = labels[idx]
    uniq = np.unique(lab)
    if uniq.size < 2:
        raise ParameterError("triplet mining needs at least two non-empty clusters")
    out = []
    skipped = 0
    for c in uniq:
        members = np.sort(idx[lab == c])
        others = idx[lab != c]
        if members.size < 2:
            skipped += members.size
            continue
        anchors = np.repeat(members, per_anchor)
        # positive: uniform over the other members of the cluster
        j = rng.integers(0, members.size - 1, anchors.size)
        pos_in = np.searchsorted(members, anchors)
        positives = members[j + (j >= pos_in)]
        negatives = others[rng.integers(0, others.size, anchors.size)]
        out.append(np.stack([anchors, positives, negatives], axis=1))
    if skipped and warn:
        log.warning("skipped %d anchors in singleton clusters", skipped)
    if not out:
        return np.empty((0, 3), dtype=np.int64)
    T = np.concatenate(out)
    return T[np.argsort(T[:, 0], kind="stable")]


def valid_triplet(t, semantics) -> bool:
    a, p, n = (int(v) for v in t)
    if len({a, p, n}) != 3:
        return False
    sa, sp, sn = (tuple(semantics[i]) for i in (a, p, n))
    return sa == sp and sa != sn


# -- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    theta: MLP
    omega: MLP
    log: list = field(default_factory=list)

    def log_csv(self) -> str:
        lines = ["epoch,triplet_loss,ce_loss,recon_loss"]
        for row in self.log:
            cells = [str(row["epoch"])]
            for key in ("triplet_loss", "ce_loss", "recon_loss"):
                v = row.get(key)
                cells.append("" if v is None else repr(float(v)))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def initial_params(d: int, cfg: TrainConfig):
    rng = make_rng(cfg.seed, derive_key("init"))
    h = cfg.hidden
    return init_mlp([d, h, h, cfg.k], rng), init_mlp([cfg.k, h, h, d], rng)


def train(data: Dataset, cfg: TrainConfig, classifier: AttributeClassifier) -> TrainResult:
    """Mini-batch SGD with a two-step update per batch.

    Each batch: theta <- theta - lr_theta * grad_theta(L_triplet + L_ce),
    then omega <- omega - lr_omega * grad_omega(L_recon) at the updated theta.
    """
    theta, omega = initial_params(data.d, cfg)
    rng = make_rng(cfg.seed, derive_key("train"))
    sel = cfg.selected_attributes
    S = data.semantics.copy()
    if cfg.label_flip_rate > 0:
        flips = rng.random(S.shape) < cfg.label_flip_rate
        S = np.where(flips, 1 - S, S)
    labels = cluster_ids(S, sel)
    X = data.X
    n = len(data)
    history = []
    last_finite = None
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        sums = LossTerms()
        for start in range(0, n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            Xb = X[batch]
            if cfg.loss_mode == "mse_only":
                lr_, g_theta, g_omega = recon_grads(theta, omega, Xb)
                theta.axpy(-cfg.lr_theta, g_theta)
                omega.axpy(-cfg.lr_omega, g_omega)
                sums.recon += lr_
                continue
            bl = labels[batch]
            if np.unique(bl).size > 1:
                local = mine_triplets(bl, cfg.triplets_per_anchor, rng, warn=False)
            else:
                local = np.empty((0, 3), dtype=np.int64)
            lt, g_tri = triplet_grads(theta, Xb, local, cfg.margin_mu)
            lc, g_ce, _ = ce_grads(theta, omega, Xb, S[batch], classifier, sel)
            theta.axpy(-cfg.lr_theta, g_tri + g_ce)
            lr_, _, g_omega = recon_grads(theta, omega, Xb)
            omega.axpy(-cfg.lr_omega, g_omega)
            sums.triplet += lt
            sums.ce += lc
            sums.recon += lr_
        row = {"epoch": epoch, "recon_loss": sums.recon}
        if cfg.loss_mode == "mse_only":
            row.update(triplet_loss=None, ce_loss=None)
        else:
            row.update(triplet_loss=sums.triplet, ce_loss=sums.ce)
        values = [v for v in row.values() if v is not None]
        if not (np.all(np.isfinite(values)) and theta.is_finite() and omega.is_finite()):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_finite)
        history.append(row)
        last_finite = row
    theta.trained = omega.trained = cfg.epochs > 0
    return TrainResult(theta, omega, history)


# -- assembled pipeline -------------------------------------------------------


@dataclass(eq=False)
class PINet:
    theta: MLP
    omega: MLP
    stats: dict  # cluster id -> ClusterStats
    classifier: AttributeClassifier | None = None
    selected_attributes: tuple | None = None
    loss_mode: str = "triplet_ce"
    clip_mode: str = "max"
    train_config: dict = field(default_factory=dict)

    @classmethod
    def build(cls, result: TrainResult, data: Dataset, classifier, cfg: TrainConfig) -> "PINet":
        stats = compute_cluster_stats(result.theta, data, cfg.selected_attributes)
        return cls(result.theta, result.omega, stats, classifier, cfg.selected_attributes, cfg.loss_mode,
                   train_config=asdict(cfg))

    def encoder(self, X):
        return self.theta(X)

    def cluster_of(self, X, labels=None) -> np.ndarray:
        """Cluster ids from given semantics, else from the attribute classifier."""
        X = _as_matrix(X)
        if labels is not None:
            sem = np.atleast_2d(np.asarray(labels))
        elif self.classifier is not None:
            sem = np.atleast_2d(predict_semantics(self.classifier, X))
        else:
            sem = None
        if sem is not None:
            ids = cluster_ids(sem, self.selected_attributes)
        else:
            ids = np.full(X.shape[0], -1)
        known = np.isin(ids, list(self.stats))
        if not known.all():
            # unseen pattern: fall back to the nearest anchor in Y
            keys = np.array(sorted(self.stats))
            A = np.stack([self.stats[k].anchor_transformed for k in keys])
            Y = self.theta(X[~known])
            ids[~known] = keys[np.argmin(((Y[:, None, :] - A[None]) ** 2).sum(-1), axis=1)]
        return ids

    def clipped(self, X, p: PrivacyParams, labels=None, clip=True) -> np.ndarray:
        X = _as_matrix(X)
        Y = self.theta(X)
        if not clip:
            return Y
        return clip_batch(Y, X, self.cluster_of(X, labels), self.stats, p, self.clip_mode)

    def obfuscate_latent(self, X, p: PrivacyParams, rng, labels=None, radial=None, clip=True) -> np.ndarray:
        """h(H(f~(x))) for each row of X."""
        C = self.clipped(X, p, labels, clip)
        Z = sample_noise(C, p, rng, radial=radial)
        return self.omega(Z)

    def obfuscate_images(self, imgs, generator: LinearGenerator, p, rng, labels=None, radial=None):
        imgs = np.asarray(imgs, dtype=float)
        single = imgs.ndim == 2
        X = np.atleast_2d(invert(generator, imgs))
        out = render(generator, self.obfuscate_latent(X, p, rng, labels, radial))
        return out[0] if single else out

    # checkpoint layout: {arch, theta, omega, cluster_stats, ...}
    def to_json(self) -> str:
        sizes = self.theta.sizes
        doc = {
            "arch": {"d": sizes[0], "k": sizes[-1], "hidden": sizes[1] if len(sizes) > 2 else None,
                     "layers": len(sizes) - 1},
            "theta": [float(v) for v in self.theta.flat()],
            "omega": [float(v) for v in self.omega.flat()],
            "cluster_stats": [self.stats[c].to_dict() for c in sorted(self.stats)],
            "classifier": None if self.classifier is None else self.classifier.to_dict(),
            "selected_attributes": None if self.selected_attributes is None else list(self.selected_attributes),
            "loss_mode": self.loss_mode,
            "clip_mode": self.clip_mode,
            "trained": bool(self.theta.trained),
            "train_config": self.train_config,
        }
        return json.dumps(doc, separators=(",", ":"), sort_keys=False, default=_jsonable)

    @classmethod
    def from_json(cls, text: str) -> "PINet":
        doc = json.loads(text)
        arch = doc["arch"]
        d, k, h, L = arch["d"], arch["k"], arch["hidden"], arch["layers"]
        enc_sizes = [d] + [h] * (L - 1) + [k]
        trained = doc.get("trained", True)
        theta = MLP.from_flat(enc_sizes, doc["theta"], trained)
        omega = MLP.from_flat(enc_sizes[::-1], doc["omega"], trained)
        stats = {s["cluster_id"]: ClusterStats.from_dict(s) for s in doc["cluster_stats"]}
        clf = None if doc.get("classifier") is None else AttributeClassifier.from_dict(doc["classifier"])
        sel = doc.get("selected_attributes")
        return cls(theta, omega, stats, clf, None if sel is None else tuple(sel), doc.get("loss_mode", "triplet_ce"),
                   doc.get("clip_mode", "max"), doc.get("train_config", {}))


def _jsonable(o):
    if isinstance(o, tuple):
        return list(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def obfuscate_image(img, net: PINet, generator: LinearGenerator, p: PrivacyParams, rng, label=None, radial=None):
    """render(h(H(clip(f(invert(img)))))) for a single image."""
    labels = None if label is None else [label]
    return net.obfuscate_images(np.asarray(img, float)[None], generator, p, rng, labels, radial)[0]
