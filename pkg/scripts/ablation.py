"""Embedding ablation at toy scale: train each lift mode under one budget and compare.

    python scripts/ablation.py --steps 2000
"""

import argparse
from dataclasses import replace

from mosaic.embed import EMBEDDING_MODES
from mosaic.imaging import pad_and_patch, synthetic_image
from mosaic.model import ModelConfig, MosaicModel
from mosaic.train import evaluate, train

from train_toy import RECIPE


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=RECIPE.max_steps)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    image = synthetic_image(64, 64, 0)
    patches, _ = pad_and_patch(image, 8)
    cfg = replace(RECIPE, max_steps=args.steps)
    print("mode,psnr_mean,psnr_std,ssim_mean")
    for mode in EMBEDDING_MODES:
        model = MosaicModel(ModelConfig(embedding=mode), seed=0)
        train(patches, model, cfg)
        rep = evaluate([image], model, cfg.gamma, seeds=range(args.seeds))
        print(f"{mode},{rep.mean_psnr:.3f},{rep.std_psnr:.3f},{rep.mean_ssim:.4f}", flush=True)


if __name__ == "__main__":
    main()
