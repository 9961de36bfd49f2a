"""pi-obfuscate <gen-data|train|obfuscate|verify|bench> --config <path> [--key value ...]

Exit codes: 0 ok, 1 verification failure, 2 inconclusive, 64 config
error, 65 training divergence, 66 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import verifier as V
from .baselines import PixDPParams, SVDPrivParams, pixdp_obfuscate, svdpriv_obfuscate
from .bench import BenchConfig, World, build_world, run_bench, variant_key
from .config import ConfigError, checkpoint_path, load_config, train_config_from
from .core import Dataset, MalformedDataError, ParameterError, PrivacyParams, cluster_ids, pairwise_distances
from .metrics import SSIMConfig, detect_rate
from .pinet import PINet, TrainingDiverged, train
from .rng import derive_key, make_rng
from .world import PopulationSpec, generate_population, load_generator, read_pgm, render, save_generator, write_pgm

log = logging.getLogger("piobf")

EXIT_OK, EXIT_FAIL, EXIT_INCONCLUSIVE = 0, 1, 2
EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 64, 65, 66

DATASET_FILE = "dataset.json"
GENERATOR_FILE = "generator.json"


class MissingArtifact(FileNotFoundError):
    pass


def _population_spec(cfg) -> PopulationSpec:
    w = cfg["world"]
    try:
        return PopulationSpec(
            d=w["d"],
            m=w["m"],
            num_identities=w["num_identities"],
            samples_per_identity=w["samples_per_identity"],
            cluster_spread=w["cluster_spread"],
            identity_spread=w["identity_spread"],
            attribute_scale=w["attribute_scale"],
            seed=cfg["seed"],
            exclude_patterns=tuple(w["exclude_patterns"]),
            entangled=w["entangled"],
        )
    except ParameterError as e:
        raise ConfigError(f"world: {e}") from e


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}")
    return path


def _load_world(cfg) -> World:
    data_dir = Path(cfg["paths"]["data_dir"])
    data = Dataset.from_json(_require(data_dir / DATASET_FILE, "dataset").read_text())
    gen = load_generator(_require(data_dir / GENERATOR_FILE, "generator"))
    w = cfg["world"]
    world = build_world(_population_spec(cfg), gen.height, gen.width, w["clamp_fraction"], w["test_fraction"], data=data)
    # keep the generator exactly as written by gen-data
    world.generator = gen
    return world


def _privacy(cfg, world: World | None, k: int, epsilon=None) -> PrivacyParams:
    pr = cfg["privacy"]
    beta = pr["beta_adj"]
    if beta is None:
        beta = world.beta if world is not None else 1.0
    return PrivacyParams(pr["epsilon"] if epsilon is None else epsilon, k, pr["delta"], beta)


def _load_net(path: Path) -> PINet:
    net = PINet.from_json(_require(path, "checkpoint").read_text())
    return net


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- commands -----------------------------------------------------------------


def cmd_gen_data(cfg) -> int:
    spec = _population_spec(cfg)
    data = generate_population(spec)
    w = cfg["world"]
    world = build_world(spec, w["height"], w["width"], w["clamp_fraction"], w["test_fraction"], data=data)
    out = Path(cfg["paths"]["data_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / DATASET_FILE, data.to_json())
    save_generator(out / GENERATOR_FILE, world.generator)
    sheet = out / "contact"
    sheet.mkdir(exist_ok=True)
    # one render per identity, first sample, up to the configured count
    firsts = np.unique(data.identities, return_index=True)[1][: w["contact_sheet"]]
    for i in firsts:
        write_pgm(sheet / f"id{int(data.identities[i]):04d}.pgm", render(world.generator, data.X[i]))

    labels = data.clusters()
    means = np.stack([data.X[labels == c].mean(0) for c in np.unique(labels)])
    D = pairwise_distances(means)
    inter = D[np.triu_indices(len(means), 1)].min() if len(means) > 1 else float("nan")
    print(f"codes={len(data)} d={data.d} m={data.m} clusters={len(np.unique(labels))} "
          f"identities={data.num_identities}")
    print(f"beta_adj(median intra-cluster)={world.beta:.4f} min inter-cluster centroid distance={inter:.4f} "
          f"render scale={world.generator.scale:.4f}")
    print(f"wrote {out / DATASET_FILE}, {out / GENERATOR_FILE}, {len(firsts)} contact renders")
    return EXIT_OK


def cmd_train(cfg) -> int:
    world = _load_world(cfg)
    tcfg = train_config_from(cfg)
    gallery = world.gallery
    try:
        res = train(gallery, tcfg, world.classifier)
    except TrainingDiverged as e:
        print(f"training diverged: {e}; last finite losses: {e.last_finite}", file=sys.stderr)
        return EXIT_DIVERGED
    net = PINet.build(res, gallery, world.classifier, tcfg)
    net.clip_mode = cfg["obfuscate"]["clip_mode"]
    path = checkpoint_path(cfg["paths"]["model_path"], tcfg.loss_mode, tcfg.selected_attributes, gallery.m)
    _write_text(path, net.to_json())
    _write_text(path.with_suffix(".log.csv"), res.log_csv())
    last = res.log[-1] if res.log else {}
    print(f"trained {tcfg.loss_mode} epochs={tcfg.epochs} final={last}")
    print(f"wrote {path}")
    return EXIT_OK


def _inputs(cfg, world: World):
    o = cfg["obfuscate"]
    if o["input_dir"]:
        d = _require(Path(o["input_dir"]), "input directory")
        files = sorted(d.glob("*.pgm"))
        if not files:
            raise MissingArtifact(f"no .pgm files in {d}")
        files = files[: o["limit"]] if o["limit"] else files
        return [(str(f), f.stem, read_pgm(f)) for f in files]
    probes = world.probes
    n = len(probes) if o["limit"] is None else min(o["limit"], len(probes))
    imgs = render(world.generator, probes.X[:n])
    return [(f"probe:{i}", f"probe{i:05d}", imgs[i]) for i in range(n)]


def cmd_obfuscate(cfg) -> int:
    world = _load_world(cfg)
    o = cfg["obfuscate"]
    method, eps, seed = o["method"], cfg["privacy"]["epsilon"], cfg["seed"]
    net = None
    if method == "pinet":
        net = _load_net(checkpoint_path(cfg["paths"]["model_path"], "triplet_ce", None, world.data.m))
        net.clip_mode = o["clip_mode"]
    items = _inputs(cfg, world)
    out_dir = Path(cfg["paths"]["report_dir"]) / "obfuscated" / f"{method}-eps{eps:g}"
    out_dir.mkdir(parents=True, exist_ok=True)
    b = cfg["baselines"]
    manifest, outputs = [], []
    for i, (src, stem, img) in enumerate(items):
        key = derive_key("obfuscate", method, i)
        rng = make_rng(seed, key)
        if method == "pinet":
            p = _privacy(cfg, world, net.theta.sizes[-1])
            out = net.obfuscate_images(img[None], world.generator, p, rng)[0]
        elif method == "pixdp":
            out = pixdp_obfuscate(img, PixDPParams(eps, b["pixel_sensitivity"], b["neighborhood_pixels"]), rng)
        else:
            out = svdpriv_obfuscate(img, SVDPrivParams(eps, b["rank_kept"], b["sv_sensitivity"]), rng)
        dst = out_dir / f"{stem}.pgm"
        write_pgm(dst, out)
        outputs.append(read_pgm(dst))
        manifest.append({"input": src, "output": str(dst), "stream_key": f"{key:016x}"})
    det = detect_rate(np.stack(outputs), world.generator, cfg["metrics"]["detect_threshold"])
    doc = {"method": method, "epsilon": eps, "seed": seed, "count": len(manifest), "detect_rate": det,
           "items": manifest}
    _write_text(out_dir / "manifest.json", json.dumps(doc, indent=1, sort_keys=True))
    print(f"{method} eps={eps:g}: {len(manifest)} images -> {out_dir} (detect_rate={det:.3f})")
    return EXIT_OK


def negative_control(v: V.PIVerdict) -> V.PIVerdict:
    """A control passes when the wrapped check fails as intended."""
    return V.PIVerdict(
        f"{v.test_name}[negative_control]",
        v.status == "fail",
        v.worst_violation,
        v.trials,
        v.confidence_slack,
        {**v.details, "inner_status": v.status},
        inconclusive=v.inconclusive,
    )


def _shift_center(p: PrivacyParams):
    u = np.zeros(p.k)
    u[0] = 1.0
    return np.zeros(p.k), p.beta_adj * u


def run_verify_suite(cfg, world: World | None, net: PINet | None) -> list:
    vc = cfg["verify"]
    seed = cfg["seed"]
    k = net.theta.sizes[-1] if net is not None else cfg["train"]["k"]
    p = _privacy(cfg, world, k)
    inject = vc["inject_wrong_epsilon"]
    out = []
    for kk in (1, 2, 3, 4, 8, 16, 32):
        for e in (0.5, 1.0, 2.0, 8.0):
            out.append(V.check_normalization(PrivacyParams(e, kk)))
    out.append(V.check_normalization(p))
    out.append(V.check_lemma1_density_ratio(p, vc["lemma1_trials"], make_rng(seed, derive_key("lemma1"))))
    for kk, e in ((4, 1.0), (16, 2.0), (1, 1.0), (p.k, p.epsilon)):
        pk = PrivacyParams(e, kk)
        out.append(V.check_radial_marginal(pk, vc["radial_samples"], make_rng(seed, derive_key("ks", kk, str(e))),
                                           vc["ks_alpha"]))
        out.append(negative_control(V.check_radial_marginal(
            pk, vc["radial_samples"], make_rng(seed, derive_key("ks-neg", kk, str(e))), vc["ks_alpha"], shape_offset=2)))

    # mechanism H alone at distance beta; noise uses eps * inject
    y0, y1 = _shift_center(p)
    actual = V.NoiseOnCenters(lambda x: x, p.with_epsilon(p.epsilon * inject))
    rp, rq = make_rng(seed, derive_key("hist-p")), make_rng(seed, derive_key("hist-q"))
    out.append(V.empirical_pi_histogram_test(actual, y0, y1, p, vc["histogram_samples"], vc["histogram_bins"], rp, rq))
    doubled = V.NoiseOnCenters(lambda x: x, p.with_epsilon(2 * p.epsilon))
    rp, rq = make_rng(seed, derive_key("hist-neg-p")), make_rng(seed, derive_key("hist-neg-q"))
    out.append(negative_control(V.empirical_pi_histogram_test(doubled, y0, y1, p, vc["histogram_samples"],
                                                              vc["histogram_bins"], rp, rq)))

    if net is not None and world is not None:
        gallery = world.gallery
        sel = net.selected_attributes
        out.append(V.check_theorem2_clip_bound(net.theta, gallery, p, sel, net.stats, mode=net.clip_mode))
        adv = lambda X: 1e3 * net.theta(X)  # noqa: E731
        out.append(V.check_theorem2_clip_bound(adv, gallery, p, sel, mode=net.clip_mode))
        out.append(negative_control(V.check_theorem2_clip_bound(adv, gallery, p, sel, clip=False)))
        if net.theta.trained:
            out.append(V.check_theorem1_composition(net, gallery, p, vc["theorem1_pairs"],
                                                    make_rng(seed, derive_key("thm1")), vc["theorem1_points"]))
        x, xp = reference_pair(gallery, p, sel)
        labels = cluster_ids(gallery.semantics, sel)

        def center(v):
            return _clip_known(net, v, p, labels[_row(gallery, v)])

        mech = V.NoiseOnCenters(center, p.with_epsilon(p.epsilon * inject))
        rp, rq = make_rng(seed, derive_key("pipe-p")), make_rng(seed, derive_key("pipe-q"))
        out.append(V.empirical_pi_histogram_test(mech, x, xp, p, vc["pipeline_histogram_samples"],
                                                 vc["pipeline_histogram_bins"], rp, rq))
        out[-1].test_name = "empirical_pi_histogram[pipeline]"
    return out


def _row(data: Dataset, x) -> int:
    return int(np.flatnonzero(np.all(data.X == x, axis=1))[0])


def _clip_known(net: PINet, x, p, cluster: int):
    from .mechanism import clip_transformed

    return clip_transformed(net.theta(x[None])[0], net.stats[int(cluster)], x, p, net.clip_mode)


def reference_pair(data: Dataset, p: PrivacyParams, selected=None):
    """The farthest same-cluster adjacent pair: the hardest case for the budget."""
    labels = cluster_ids(data.semantics, selected)
    best, pair = -1.0, None
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        D = pairwise_distances(data.X[idx])
        D[D > p.beta_adj] = -1
        i, j = np.unravel_index(np.argmax(D), D.shape)
        if D[i, j] > best:
            best, pair = D[i, j], (data.X[idx[i]], data.X[idx[j]])
    if pair is None:
        raise ParameterError("no adjacent pair")
    return pair


def cmd_verify(cfg) -> int:
    world, net = None, None
    data_dir = Path(cfg["paths"]["data_dir"])
    if (data_dir / DATASET_FILE).exists() and (data_dir / GENERATOR_FILE).exists():
        world = _load_world(cfg)
        ck = checkpoint_path(cfg["paths"]["model_path"], "triplet_ce", None, world.data.m)
        if ck.exists():
            net = _load_net(ck)
    if net is None:
        print("no checkpoint found: running the mechanism-only suite")
    verdicts = run_verify_suite(cfg, world, net)
    _write_text(Path(cfg["paths"]["report_dir"]) / "verdicts.json", V.verdicts_to_json(verdicts))
    width = max(len(v.test_name) for v in verdicts)
    for v in verdicts:
        print(f"{v.test_name:<{width}}  {v.status:<12}  worst={v.worst_violation:.4g}  trials={v.trials}")
    code = V.exit_code(verdicts)
    print(f"exit {code}")
    return code


def cmd_bench(cfg) -> int:
    world = _load_world(cfg)
    m = world.data.m
    base = cfg["paths"]["model_path"]
    models = {}
    primary = variant_key("triplet_ce", None)
    models[primary] = [_load_net(checkpoint_path(base, "triplet_ce", None, m))]
    for attrs in cfg["bench"]["attribute_sets"]:
        for mode in ("triplet_ce", "mse_only"):
            sel = None if sorted(attrs) == list(range(m)) else tuple(sorted(attrs))
            key = variant_key(mode, sel)
            if key in models:
                continue
            path = checkpoint_path(base, mode, sel, m)
            if path.exists():
                models[key] = [_load_net(path)]
            else:
                log.warning("no checkpoint for %s at %s; skipping that variant", key, path)
    b, mt = cfg["baselines"], cfg["metrics"]
    bcfg = BenchConfig(
        epsilons=tuple(cfg["bench"]["epsilons"]),
        seeds=tuple(cfg["bench"]["seeds"]),
        images=cfg["bench"]["images"],
        delta=cfg["privacy"]["delta"],
        beta_adj=cfg["privacy"]["beta_adj"],
        pixdp=PixDPParams(1.0, b["pixel_sensitivity"], b["neighborhood_pixels"]),
        svdpriv=SVDPrivParams(1.0, b["rank_kept"], b["sv_sensitivity"]),
        ssim=SSIMConfig(mt["ssim_window"], mt["ssim_k1"], mt["ssim_k2"], mt["dynamic_range"]),
        detect_threshold=mt["detect_threshold"],
        reid_metric=mt["reid_metric"],
        preservation_vs_truth=mt["preservation_vs_truth"],
    )
    res = run_bench(world, models, bcfg, primary)
    out_dir = Path(cfg["paths"]["report_dir"]) / "bench"
    for p in res.write(out_dir):
        print(f"wrote {p}")
    print(res.report.to_csv(), end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "obfuscate": cmd_obfuscate,
    "verify": cmd_verify,
    "bench": cmd_bench,
}


def _override_pairs(rest):
    pairs, i = [], 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            k, v = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"missing value for {tok}")
            k, v = tok[2:], rest[i + 1]
            i += 2
        pairs.append((k, v))
    return pairs


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="pi-obfuscate", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", default=None, help="JSON run config (defaults used when omitted)")
    ap.add_argument("-v", "--verbose", action="store_true")
    args, rest = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, _override_pairs(rest))
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ParameterError, MalformedDataError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
