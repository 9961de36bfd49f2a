"""Why small budgets push PI outputs off the image manifold.

At low epsilon the noise radius in Y is large and the decoder maps it to
latent codes far outside the population, so renders clamp. For each eps
this prints the clamped-pixel fraction of the rendered outputs, the latent
norm ratio against the population, and the detect rate over a range of
residual thresholds.
"""

import argparse

import numpy as np

from piobf.bench import build_world
from piobf.core import PrivacyParams, TrainConfig
from piobf.metrics import inversion_residual
from piobf.pinet import PINet, train
from piobf.rng import make_rng
from piobf.world import clamp_fraction, render


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.25, 0.5, 1, 2, 4, 8])
    ap.add_argument("--thresholds", type=float, nargs="+", default=[0.1, 0.25, 0.5])
    ap.add_argument("--draws", type=int, default=5)
    args = ap.parse_args()

    world = build_world()
    cfg = TrainConfig(seed=args.seed)
    net = PINet.build(train(world.gallery, cfg, world.classifier), world.gallery, world.classifier, cfg)
    g = world.generator
    P = world.probes
    imgs = render(g, P.X)
    pop_norm = np.linalg.norm(world.data.X, axis=1).mean()

    head = "".join(f"  det@{t:g}" for t in args.thresholds)
    print(f"{'eps':>6}  {'radius':>7}  {'|x_out|/|x|':>11}  {'clamped':>8}{head}")
    for e in args.eps:
        p = PrivacyParams(e, 16, 0.5, world.beta)
        Xo, res = [], []
        for s in range(args.draws):
            X = net.obfuscate_latent(P.X, p, make_rng(s, 99))
            Xo.append(X)
            res.append(inversion_residual(render(g, X), g))
        Xo, res = np.concatenate(Xo), np.concatenate(res)
        ratio = np.linalg.norm(Xo, axis=1).mean() / pop_norm
        cells = "".join(f"  {np.mean(res < t):>7.3f}" for t in args.thresholds)
        print(f"{e:>6g}  {16 / e:>7.1f}  {ratio:>11.2f}  {clamp_fraction(g, Xo):>8.4f}{cells}")


if __name__ == "__main__":
    main()
