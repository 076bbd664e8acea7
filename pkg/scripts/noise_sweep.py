"""Noise table for a trained checkpoint: mean/std PSNR and SSIM per (sigma, gamma).

    python scripts/noise_sweep.py runs/toy/model.ckpt
"""

import argparse
import csv
import sys

from mosaic.imaging import synthetic_image
from mosaic.train import evaluate, load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--sigmas", default="0,0.001,0.002,0.004,0.01,0.1,0.4")
    ap.add_argument("--gammas", default="0.1,0.25,0.5")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--domain", default="pixel", choices=["pixel", "measurement"])
    args = ap.parse_args()

    model = load_checkpoint(args.checkpoint).model
    image = synthetic_image(64, 64, 0)
    w = csv.writer(sys.stdout)
    w.writerow(["sigma", "gamma", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"])
    for sigma in sorted(float(s) for s in args.sigmas.split(",")):
        for gamma in sorted(float(g) for g in args.gammas.split(",")):
            rep = evaluate([image], model, gamma, seeds=range(args.seeds), noise_sigma=sigma, noise_domain=args.domain)
            w.writerow([sigma, gamma, f"{rep.mean_psnr:.3f}", f"{rep.std_psnr:.3f}", f"{rep.mean_ssim:.4f}", f"{rep.std_ssim:.4f}"])


if __name__ == "__main__":
    main()
