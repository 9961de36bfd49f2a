"""Benchmark harness: privacy/utility curves for the PI pipeline and the baselines.

Emits the tables behind every evaluation figure as plain rows:
preservation, re-identification, quality (SSIM), detection, and 2-D PCA
coordinates of the transformed codes.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import PixDPParams, SVDPrivParams, pixdp_obfuscate, svdpriv_obfuscate
from .core import Dataset, PrivacyParams, TrainConfig, cluster_ids, median_intra_cluster_distance
from .metrics import (
    DETECT_THRESHOLD,
    EvalReport,
    EvalRow,
    SSIMConfig,
    detect_rate,
    preservation_ratio,
    reid_rate,
    ssim_batch,
)
from .pinet import PINet, train
from .rng import derive_key, make_rng
from .world import (
    AttributeClassifier,
    LinearGenerator,
    PopulationSpec,
    calibrate_scale,
    generate_population,
    make_generator,
    render,
    split_by_sample,
    train_attribute_classifier,
)

log = logging.getLogger(__name__)

BASELINES = ("pixdp", "svdpriv")


@dataclass
class World:
    data: Dataset
    generator: LinearGenerator
    classifier: AttributeClassifier
    gallery_idx: np.ndarray
    probe_idx: np.ndarray
    beta: float

    @property
    def gallery(self) -> Dataset:
        return self.data.subset(self.gallery_idx)

    @property
    def probes(self) -> Dataset:
        return self.data.subset(self.probe_idx)


def build_world(spec: PopulationSpec = PopulationSpec(), height: int = 16, width: int = 16,
                clamp_fraction: float = 1e-3, test_fraction: float = 0.2, data: Dataset | None = None) -> World:
    """Population, calibrated generator, gallery/probe split and attribute classifier."""
    data = generate_population(spec) if data is None else data
    gen = calibrate_scale(make_generator(height, width, data.d, spec.seed), data, clamp_fraction)
    g_idx, p_idx = split_by_sample(data, test_fraction, spec.seed)
    gallery = data.subset(g_idx)
    clf = train_attribute_classifier(gallery)
    beta = median_intra_cluster_distance(gallery)
    return World(data, gen, clf, g_idx, p_idx, beta)


def variant_key(loss_mode: str, attributes) -> tuple:
    return (loss_mode, None if attributes is None else tuple(sorted(attributes)))


def variant_tag(key: tuple, m: int) -> str:
    loss_mode, attrs = key
    attrs = tuple(range(m)) if attrs is None else attrs
    return f"{loss_mode}/m{len(attrs)}"


def train_variants(world: World, seeds, variants, base: TrainConfig = TrainConfig()) -> dict:
    """Train one PINet per (variant, seed) on the gallery split."""
    out = {}
    gallery = world.gallery
    m = gallery.m
    for loss_mode, attrs in variants:
        sel = None if attrs is None or sorted(attrs) == list(range(m)) else tuple(sorted(attrs))
        nets = []
        for s in seeds:
            cfg = replace(base, seed=int(s), loss_mode=loss_mode, selected_attributes=sel)
            nets.append(PINet.build(train(gallery, cfg, world.classifier), gallery, world.classifier, cfg))
        out[variant_key(loss_mode, sel)] = nets
    return out


@dataclass(frozen=True)
class BenchConfig:
    epsilons: tuple = (0.5, 1.0, 2.0, 4.0, 8.0)
    seeds: tuple = (0, 1, 2, 3, 4)
    images: int | None = 50  # probes per seed; None uses every probe
    delta: float = 0.5
    beta_adj: float | None = None
    pixdp: PixDPParams = field(default_factory=lambda: PixDPParams(1.0))
    svdpriv: SVDPrivParams = field(default_factory=lambda: SVDPrivParams(1.0))
    ssim: SSIMConfig = SSIMConfig()
    detect_threshold: float = DETECT_THRESHOLD
    reid_metric: str = "euclidean"
    baselines: tuple = BASELINES
    preservation_vs_truth: bool = False


@dataclass
class BenchResult:
    preservation: list
    reid: list
    quality: list
    detect: list
    yspace_pca: list
    report: EvalReport

    TABLES = ("preservation", "reid", "quality", "detect", "yspace_pca")

    def write(self, out_dir) -> list:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name in self.TABLES:
            rows = getattr(self, name)
            path = out_dir / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                if rows:
                    w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
                    w.writeheader()
                    w.writerows(rows)
            written.append(path)
        (out_dir / "report.csv").write_text(self.report.to_csv())
        (out_dir / "report.json").write_text(self.report.to_json())
        return written + [out_dir / "report.csv", out_dir / "report.json"]


def _pick_probes(world: World, seed: int, n):
    probes = world.probes
    if n is None or n >= len(probes):
        return np.arange(len(probes))
    rng = make_rng(seed, derive_key("probe-pick"))
    return np.sort(rng.choice(len(probes), size=n, replace=False))


def _baseline_outputs(method, imgs, eps, cfg: BenchConfig, rng):
    if method == "pixdp":
        p = replace(cfg.pixdp, epsilon=eps)
        return np.stack([pixdp_obfuscate(im, p, rng) for im in imgs])
    if method == "svdpriv":
        p = replace(cfg.svdpriv, epsilon=eps)
        return np.stack([svdpriv_obfuscate(im, p, rng) for im in imgs])
    raise ValueError(f"unknown baseline {method!r}")


def _pca2(Y):
    Yc = Y - Y.mean(axis=0)
    _, _, Vt = np.linalg.svd(Yc, full_matrices=False)
    P = Yc @ Vt[:2].T
    # fix the sign so exports are stable across runs
    signs = np.sign(np.where(np.abs(P).max(0) > 0, P[np.argmax(np.abs(P), axis=0), [0, 1]], 1.0))
    return P * signs


def run_bench(world: World, models: dict, cfg: BenchConfig = BenchConfig(), primary=None) -> BenchResult:
    """Evaluate every model variant and baseline over the epsilon grid and seeds.

    ``models`` maps ``variant_key(loss_mode, attrs)`` to a list of PINets,
    one per seed or a single one reused for every seed.
    """
    gen, clf = world.generator, world.classifier
    gallery, probes = world.gallery, world.probes
    m = gallery.m
    beta = world.beta if cfg.beta_adj is None else cfg.beta_adj
    primary = variant_key("triplet_ce", None) if primary is None else primary
    if primary not in models:
        raise KeyError(f"primary variant {primary} not among models")

    pres_rows, reid_rows, qual_rows, det_rows = [], [], [], []
    agg: dict = {}

    def record(method, loss_mode, attrs_n, eps, seed, out, orig, ids, truth, sel):
        pr = preservation_ratio(orig, out, clf, sel, gen, truth if cfg.preservation_vs_truth else None)
        rr = reid_rate(gallery, out, ids, gen, cfg.reid_metric)
        ss = ssim_batch(orig, out, cfg.ssim)
        dr = detect_rate(out, gen, cfg.detect_threshold)
        base = {"method": method, "loss_mode": loss_mode, "attributes": attrs_n, "epsilon": eps, "seed": seed}
        pres_rows.append({**base, "preservation_ratio": pr})
        reid_rows.append({**base, "reid_rate": rr})
        qual_rows.append({**base, "ssim_mean": float(ss.mean()), "ssim_std": float(ss.std())})
        det_rows.append({**base, "detect_rate": dr})
        agg.setdefault((eps, method), []).append((ss, pr, rr, dr))

    for si, seed in enumerate(cfg.seeds):
        pick = _pick_probes(world, seed, cfg.images)
        orig = render(gen, probes.X[pick])
        ids = probes.identities[pick]
        truth = probes.semantics[pick]
        for eps in cfg.epsilons:
            for key, nets in models.items():
                net = nets[si] if len(nets) > 1 else nets[0]
                loss_mode, attrs = key
                sel = None if attrs is None else list(attrs)
                p = PrivacyParams(eps, net.theta.sizes[-1], cfg.delta, beta)
                rng = make_rng(seed, derive_key("pinet", loss_mode, str(attrs), repr(float(eps))))
                out = net.obfuscate_images(orig, gen, p, rng)
                method = "pinet" if key == primary else f"pinet[{variant_tag(key, m)}]"
                record(method, loss_mode, m if attrs is None else len(attrs), eps, seed, out, orig, ids, truth, sel)
            for method in cfg.baselines:
                rng = make_rng(seed, derive_key(method, repr(float(eps))))
                out = _baseline_outputs(method, orig, eps, cfg, rng)
                record(method, "-", m, eps, seed, out, orig, ids, truth, None)

    pca_rows = []
    for key, nets in models.items():
        loss_mode, attrs = key
        labels = cluster_ids(gallery.semantics, None if attrs is None else list(attrs))
        P = _pca2(nets[0].theta(gallery.X))
        for i in range(len(gallery)):
            pca_rows.append({
                "loss_mode": loss_mode,
                "attributes": m if attrs is None else len(attrs),
                "seed": cfg.seeds[0],
                "index": i,
                "identity": int(gallery.identities[i]),
                "cluster": int(labels[i]),
                "pc1": float(P[i, 0]),
                "pc2": float(P[i, 1]),
            })

    rows = []
    for (eps, method), vals in sorted(agg.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        ss = np.concatenate([v[0] for v in vals])
        rows.append(EvalRow(
            epsilon=eps,
            method=method,
            ssim_mean=float(np.mean([v[0].mean() for v in vals])),
            ssim_std=float(ss.std()),
            preservation_ratio=float(np.mean([v[1] for v in vals])),
            reid_rate=float(np.mean([v[2] for v in vals])),
            detect_rate=float(np.mean([v[3] for v in vals])),
            seeds=len(vals),
        ))
    settings = {
        "epsilons": list(cfg.epsilons),
        "seeds": list(cfg.seeds),
        "images_per_seed": cfg.images,
        "delta": cfg.delta,
        "beta_adj": beta,
        "pixdp": {"pixel_sensitivity": cfg.pixdp.pixel_sensitivity, "neighborhood_pixels": cfg.pixdp.neighborhood_pixels},
        "svdpriv": {"rank_kept": cfg.svdpriv.rank_kept, "sv_sensitivity": cfg.svdpriv.sv_sensitivity},
        "reid_metric": cfg.reid_metric,
        "variants": [variant_tag(k, m) for k in models],
    }
    report = EvalReport(rows, cfg.detect_threshold, settings)
    return BenchResult(pres_rows, reid_rows, qual_rows, det_rows, pca_rows, report)


def mean_by(rows, value: str, *keys) -> dict:
    """Average ``value`` over rows grouped by ``keys`` (seeds collapse)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}
