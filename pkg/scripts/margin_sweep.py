"""Calibration sweep for the training margin and learning rates.

For each (mu, lr_theta, lr_omega) trains triplet+CE on the reference
gallery and reports preservation at a few budgets, the Y-space cluster
factor and whether training diverged. This is how the frozen defaults
were chosen.
"""

import argparse
import itertools

import numpy as np

from piobf.bench import build_world
from piobf.core import PrivacyParams, TrainConfig
from piobf.metrics import preservation_ratio_latent
from piobf.pinet import PINet, TrainingDiverged, train
from piobf.rng import make_rng


def cluster_factor(net, data):
    Y = net.theta(data.X)
    lab = data.clusters()
    D = np.linalg.norm(Y[:, None] - Y[None], axis=-1)
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(lab), dtype=bool)
    return D[~same].mean() / D[same & off].mean()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--mu", type=float, nargs="+", default=[100, 400, 1600])
    ap.add_argument("--lr-theta", type=float, nargs="+", default=[1e-5, 3e-5])
    ap.add_argument("--lr-omega", type=float, nargs="+", default=[3e-4])
    ap.add_argument("--epochs", type=int, default=600)
    ap.add_argument("--eps", type=float, nargs="+", default=[1, 2, 4])
    args = ap.parse_args()

    world = build_world()
    g, P = world.gallery, world.probes
    print(f"{'mu':>6} {'lr_th':>7} {'lr_om':>7}  {'factor':>6}  " + "  ".join(f"pres@{e:g}" for e in args.eps))
    for mu, lt, lo in itertools.product(args.mu, args.lr_theta, args.lr_omega):
        cfg = TrainConfig(margin_mu=mu, lr_theta=lt, lr_omega=lo, epochs=args.epochs)
        try:
            net = PINet.build(train(g, cfg, world.classifier), g, world.classifier, cfg)
        except TrainingDiverged as e:
            print(f"{mu:>6g} {lt:>7g} {lo:>7g}  diverged ({e})")
            continue
        pres = []
        for e in args.eps:
            p = PrivacyParams(e, cfg.k, 0.5, world.beta)
            Xo = net.obfuscate_latent(P.X, p, make_rng(0, 5))
            pres.append(preservation_ratio_latent(P.X, Xo, world.classifier))
        cells = "  ".join(f"{v:>8.3f}" for v in pres)
        print(f"{mu:>6g} {lt:>7g} {lo:>7g}  {cluster_factor(net, g):>6.2f}  {cells}")


if __name__ == "__main__":
    main()
