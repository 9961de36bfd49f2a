"""Executable checks of the privacy guarantees and self-tests for the sampler.

Analytic checks (density ratio, clip bound, normalisation) carry no
statistical slack. Monte Carlo checks record their sample counts,
significance level and slack in the verdict.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps

from .core import Dataset, ParameterError, PrivacyParams, cluster_ids, pairwise_distances
from .mechanism import (
    clip_batch,
    compute_cluster_stats,
    log_density,
    log_norm_constant,
    log_sphere_area,
    sample_noise,
)

LOG_TOL = 1e-9
Z_999 = float(sps.norm.ppf(1 - 0.001 / 2))  # two-sided 99.9%
MIN_BIN_COUNT = 25
MIN_HISTOGRAM_SAMPLES = 10_000


@dataclass
class PIVerdict:
    test_name: str
    passed: bool
    worst_violation: float
    trials: int
    confidence_slack: float = 0.0
    details: dict = field(default_factory=dict)
    inconclusive: bool = False

    def __post_init__(self):
        if not math.isfinite(self.worst_violation):
            raise ParameterError(f"{self.test_name}: worst_violation must be finite")
        if self.trials < 1:
            raise ParameterError(f"{self.test_name}: trials must be >= 1")

    @property
    def status(self) -> str:
        if self.inconclusive:
            return "inconclusive"
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = self.status
        return d


def verdicts_to_json(verdicts) -> str:
    return json.dumps([v.to_dict() for v in verdicts], indent=1, default=float)


def exit_code(verdicts) -> int:
    """0 all pass, 1 any fail, 2 any inconclusive with none failing."""
    if any(not v.passed and not v.inconclusive for v in verdicts):
        return 1
    if any(v.inconclusive for v in verdicts):
        return 2
    return 0


# -- analytic checks ------------------------------------------------------


def check_normalization(p: PrivacyParams, tol: float = 1e-10) -> PIVerdict:
    """ln C + ln S_{k-1} + ln Gamma(k) - k ln eps == 0."""
    if p.k > 64:
        raise ParameterError("normalisation check supports k <= 64")
    resid = log_norm_constant(p.epsilon, p.k) + log_sphere_area(p.k) + math.lgamma(p.k) - p.k * math.log(p.epsilon)
    return PIVerdict(
        f"normalization[k={p.k},eps={p.epsilon:g}]",
        abs(resid) <= tol,
        abs(resid),
        1,
        0.0,
        {"epsilon": p.epsilon, "k": p.k, "log_residual": resid, "tolerance": tol},
    )


def check_lemma1_density_ratio(p: PrivacyParams, trials: int, rng: np.random.Generator) -> PIVerdict:
    """ln D(y0)(z) - ln D(y0')(z) <= eps * ||y0 - y0'|| on random triples, plus a tight colinear case."""
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    k = p.k
    Y0 = 3.0 * rng.standard_normal((trials, k))
    # mix near and far pairs
    offs = rng.standard_normal((trials, k)) * rng.exponential(1.0, (trials, 1))
    Y1 = Y0 + offs
    Z = sample_noise(Y0, p, rng)
    lr = log_density(Y0, Z, p) - log_density(Y1, Z, p)
    bound = p.epsilon * np.linalg.norm(Y0 - Y1, axis=1)
    excess = lr - bound
    violations = int(np.sum(excess > LOG_TOL))

    # colinear triple: z lies beyond y0 on the ray from y0' through y0
    u = rng.standard_normal(k)
    u /= np.linalg.norm(u)
    y0, y1 = rng.standard_normal(k), None
    y1 = y0 - 1.7 * u
    z = y0 + 2.3 * u
    tight_gap = float(p.epsilon * np.linalg.norm(y0 - y1) - (log_density(y0, z, p) - log_density(y1, z, p)))
    tight_ok = abs(tight_gap) <= LOG_TOL

    return PIVerdict(
        "lemma1_density_ratio",
        violations == 0 and tight_ok,
        float(max(excess.max(), 0.0)),
        trials,
        0.0,
        {"violations": violations, "tolerance": LOG_TOL, "colinear_gap": tight_gap, "epsilon": p.epsilon, "k": k},
    )


def _adjacent_pairs(data: Dataset, p: PrivacyParams, labels):
    pairs = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        D = pairwise_distances(data.X[idx])
        i, j = np.nonzero(np.triu(D <= p.beta_adj, 1))
        pairs.append(np.column_stack([idx[i], idx[j]]))
    return np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=int)


def check_theorem2_clip_bound(encoder, data: Dataset, p: PrivacyParams, selected=None, stats=None,
                              clip: bool = True, mode: str = "max") -> PIVerdict:
    """Exhaustive ||f~(x) - f~(x')|| <= 2 * delta * beta over same-cluster adjacent pairs."""
    labels = cluster_ids(data.semantics, selected)
    if stats is None:
        stats = compute_cluster_stats(encoder, data, selected)
    Y = np.asarray(encoder(data.X), dtype=float)
    if clip:
        Y = clip_batch(Y, data.X, labels, stats, p, mode)
    pairs = _adjacent_pairs(data, p, labels)
    bound = 2.0 * p.delta * p.beta_adj
    if len(pairs) == 0:
        return PIVerdict("theorem2_clip_bound", True, 0.0, 1, 0.0, {"pairs": 0, "bound": bound}, inconclusive=True)
    dY = np.linalg.norm(Y[pairs[:, 0]] - Y[pairs[:, 1]], axis=1)
    excess = dY - bound
    worst = int(np.argmax(excess))
    # furthest member from its anchor, useful when diagnosing a violation
    anchor_dist = max(
        float(np.linalg.norm(data.X[labels == c] - stats[int(c)].anchor_latent, axis=1).max()) for c in np.unique(labels)
    )
    return PIVerdict(
        "theorem2_clip_bound",
        bool(excess.max() <= 0.0),
        float(max(excess.max(), 0.0)),
        len(pairs),
        0.0,
        {
            "bound": bound,
            "max_distance": float(dY.max()),
            "violations": int(np.sum(excess > 0)),
            "worst_pair": pairs[worst].tolist(),
            "clip": clip,
            "max_anchor_distance": anchor_dist,
        },
    )


def check_theorem1_composition(net, data: Dataset, p: PrivacyParams, trials: int, rng: np.random.Generator,
                               points: int = 10, selected=None) -> PIVerdict:
    """Chained bound for M = H o f~ on random adjacent pairs and evaluation points.

    For each pair and each z the log density ratio must not exceed
    eps * ||f~(x) - f~(x')|| <= eps * Dhat * d_X(x, x'). Dhat is the
    post-clip sensitivity normalised by beta (||f~(x) - f~(x')|| / beta),
    which clipping caps at 2 * delta <= 1.
    """
    if not getattr(net.theta, "trained", False):
        raise ParameterError("refusing to certify an untrained encoder")
    sel = net.selected_attributes if selected is None else selected
    labels = cluster_ids(data.semantics, sel)
    Y = clip_batch(net.theta(data.X), data.X, labels, net.stats, p, net.clip_mode)
    pairs = _adjacent_pairs(data, p, labels)
    if len(pairs) == 0:
        raise ParameterError("no adjacent same-cluster pairs")
    dX_all = np.linalg.norm(data.X[pairs[:, 0]] - data.X[pairs[:, 1]], axis=1)
    dY_all = np.linalg.norm(Y[pairs[:, 0]] - Y[pairs[:, 1]], axis=1)
    dhat_norm = float(dY_all.max() / p.beta_adj)
    nz = dX_all > 0
    dhat_lip = float((dY_all[nz] / dX_all[nz]).max()) if nz.any() else 0.0

    pick = pairs[rng.choice(len(pairs), size=min(trials, len(pairs)), replace=len(pairs) < trials)]
    ya, yb = Y[pick[:, 0]], Y[pick[:, 1]]
    worst = -np.inf
    violations = 0
    for _ in range(points):
        # evaluation points drawn from either output distribution
        src = np.where(rng.random((len(pick), 1)) < 0.5, ya, yb)
        Z = sample_noise(src, p, rng)
        lr = np.abs(log_density(ya, Z, p) - log_density(yb, Z, p))
        chained = p.epsilon * dhat_norm * p.beta_adj
        ex = np.maximum(lr - p.epsilon * np.linalg.norm(ya - yb, axis=1), lr - chained)
        violations += int(np.sum(ex > LOG_TOL))
        worst = max(worst, float(ex.max()))
    ok = violations == 0 and dhat_norm <= 1.0
    return PIVerdict(
        "theorem1_composition",
        ok,
        float(max(worst, dhat_norm - 1.0, 0.0)),
        len(pick) * points,
        0.0,
        {
            "pairs": len(pick),
            "points_per_pair": points,
            "dhat_normalised": dhat_norm,
            "dhat_lipschitz": dhat_lip,
            "violations": violations,
            "tolerance": LOG_TOL,
        },
    )


# -- statistical checks ---------------------------------------------------


def check_radial_marginal(p: PrivacyParams, samples: int, rng: np.random.Generator, alpha: float = 1e-3,
                          shape_offset: float = 0.0, center=None) -> PIVerdict:
    """KS test of ||z - y0|| against Gamma(k + shape_offset, rate eps).

    ``shape_offset != 0`` turns the check into a wrong-shape negative control.
    """
    y0 = np.zeros(p.k) if center is None else np.asarray(center, float)
    Z = sample_noise(np.tile(y0, (samples, 1)), p, rng)
    r = np.linalg.norm(Z - y0, axis=1)
    ref = sps.gamma(a=p.k + shape_offset, scale=1.0 / p.epsilon)
    res = sps.kstest(r, ref.cdf)
    return PIVerdict(
        f"radial_marginal[k={p.k},eps={p.epsilon:g}]" if shape_offset == 0
        else f"radial_marginal_wrong_shape[k={p.k},eps={p.epsilon:g}]",
        bool(res.pvalue >= alpha),
        float(res.statistic),
        samples,
        float(sps.kstwo.ppf(1 - alpha, samples)),
        {"ks_statistic": float(res.statistic), "p_value": float(res.pvalue), "alpha": alpha,
         "shape": p.k + shape_offset, "rate": p.epsilon},
    )


@dataclass
class NoiseOnCenters:
    """A mechanism given by noise H around a deterministic centre map.

    ``center(x)`` returns the point the noise is added to; ``noise_params``
    controls the sampled noise (which may differ from the budget under test).
    """

    center: object
    noise_params: PrivacyParams

    def sample(self, x, n: int, rng: np.random.Generator) -> np.ndarray:
        c = np.asarray(self.center(x), dtype=float)
        return sample_noise(np.tile(c, (n, 1)), self.noise_params, rng)


def _merge_bins(cp, cq, min_count):
    """Greedily merge neighbouring bins until both counts reach ``min_count``."""
    merged_p, merged_q = [], []
    ap = aq = 0
    for a, b in zip(cp, cq):
        ap += a
        aq += b
        if ap >= min_count and aq >= min_count:
            merged_p.append(ap)
            merged_q.append(aq)
            ap = aq = 0
    if ap or aq:
        if merged_p:
            merged_p[-1] += ap
            merged_q[-1] += aq
        else:
            merged_p.append(ap)
            merged_q.append(aq)
    return np.array(merged_p), np.array(merged_q)


def empirical_pi_histogram_test(mechanism: NoiseOnCenters, x, x_prime, p: PrivacyParams, samples: int, bins: int,
                                rng_p: np.random.Generator, rng_q: np.random.Generator,
                                distance: float | None = None) -> PIVerdict:
    """Binned log-ratio test of M(x) against M(x') along the centre-difference line.

    Budget is eps * d_X(x, x') (override with ``distance``). Bins are
    equal-probability under the pooled sample; any bin with fewer than 25
    hits on either side is merged into its neighbour.
    """
    if samples < 1:
        raise ParameterError("samples must be >= 1")
    x, x_prime = np.asarray(x, float), np.asarray(x_prime, float)
    d = float(np.linalg.norm(x - x_prime)) if distance is None else float(distance)
    budget = p.epsilon * d
    c0 = np.asarray(mechanism.center(x), float)
    c1 = np.asarray(mechanism.center(x_prime), float)
    u = c1 - c0
    nu = np.linalg.norm(u)
    if nu > 0:
        u = u / nu
    else:
        u = np.zeros_like(c0)
        u[0] = 1.0
    tp = (mechanism.sample(x, samples, rng_p) - c0) @ u
    tq = (mechanism.sample(x_prime, samples, rng_q) - c0) @ u
    pooled = np.concatenate([tp, tq])
    edges = np.quantile(pooled, np.linspace(0, 1, bins + 1)[1:-1])
    cp = np.bincount(np.searchsorted(edges, tp, side="right"), minlength=bins)
    cq = np.bincount(np.searchsorted(edges, tq, side="right"), minlength=bins)
    mp, mq = _merge_bins(cp, cq, MIN_BIN_COUNT)
    details = {
        "epsilon": p.epsilon,
        "distance": d,
        "budget": budget,
        "center_distance": float(nu),
        "bins_requested": bins,
        "bins_used": int(len(mp)),
        "samples": samples,
        "z": Z_999,
        "slack_formula": "z_0.999 * sqrt(1/count_p + 1/count_q)",
    }
    sparse = samples < MIN_HISTOGRAM_SAMPLES or len(mp) < 2
    if sparse or mp.min() < MIN_BIN_COUNT or mq.min() < MIN_BIN_COUNT:
        return PIVerdict("empirical_pi_histogram", False, 0.0, samples, 0.0, details, inconclusive=True)
    logr = np.abs(np.log(mp / mp.sum()) - np.log(mq / mq.sum()))
    slack = Z_999 * np.sqrt(1.0 / mp + 1.0 / mq)
    excess = logr - (budget + slack)
    worst = int(np.argmax(excess))
    details.update({"max_log_ratio": float(logr.max()), "worst_bin": worst, "worst_bin_slack": float(slack[worst])})
    return PIVerdict(
        "empirical_pi_histogram",
        bool(excess.max() <= 0.0),
        float(max(excess.max(), 0.0)),
        samples,
        float(slack[worst]),
        details,
    )
