"""Short attack runs across noise bounds, scored by the inference classifier only.

Needs the VAE, inference classifier and class statistics from a desk run.

    python3 scripts/eta_bound_sweep.py --bounds none,3,2,1.5,1
"""

import argparse
from pathlib import Path

import numpy as np
import torch

from latent_poison import attack as atk
from latent_poison import classifiers as clf
from latent_poison import latentstats
from latent_poison import vae as vae_mod
from latent_poison.dataio import load_dataset


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--runs", default="runs/desk")
    p.add_argument("--data-root", default="data/mnist")
    p.add_argument("--bounds", default="none,3,2,1.5,1")
    p.add_argument("--grid", default="0:1,0.6:0.8")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--train-limit", type=int, default=5000)
    p.add_argument("--test-limit", type=int, default=500)
    args = p.parse_args()

    runs = Path(args.runs)
    vae, _ = vae_mod.load_vae(runs / "train-vae" / "model.ckpt")
    inference = clf.load_classifier(runs / "train-inference" / "model.ckpt")
    stats = latentstats.ClassLatentStats.load(runs / "fit-stats" / "stats.json")
    train = load_dataset(args.data_root, "train")
    test = load_dataset(args.data_root, "test").subset(args.test_limit)
    x, y = torch.tensor(test.images), test.labels

    print("| eta_bound | alpha | beta | inference flip | mean SSIM | pair inequality |")
    print("|---|---|---|---|---|---|")
    for raw in args.bounds.split(","):
        bound = None if raw.strip() == "none" else float(raw)
        for point in args.grid.split(","):
            a, b = (float(v) for v in point.split(":"))
            cfg = atk.AttackConfig(lambda_org=a, lambda_noised=b, epochs=args.epochs,
                                   train_limit=args.train_limit, eta_bound=bound)
            nets, _ = atk.attack_train(vae, inference, stats, train, cfg)
            records, x_adv = atk.attack_apply(nets, vae, inference, stats, x, y, cfg)
            with torch.no_grad():
                pred = inference(x_adv).argmax(1).numpy()
            print(f"| {raw} | {a:g} | {b:g} | {(pred != y).mean():.3f} | "
                  f"{np.mean([r.ssim for r in records]):.3f} | "
                  f"{np.mean([r.pair_inequality for r in records]):.3f} |", flush=True)


if __name__ == "__main__":
    main()
