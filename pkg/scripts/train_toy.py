"""Train the toy model on 64 synthetic 8x8 patches and report overfit PSNR.

    python scripts/train_toy.py --out runs/toy
"""

import argparse
import time
from dataclasses import replace
from pathlib import Path

from mosaic.imaging import pad_and_patch, synthetic_image
from mosaic.model import ModelConfig, MosaicModel
from mosaic.train import TrainConfig, evaluate, save_checkpoint, train

RECIPE = TrainConfig(gamma=0.25, lr0=1e-2, warmup_steps=500, batch_size=128, epochs=5000, max_steps=5000)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--steps", type=int, default=RECIPE.max_steps)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--embedding", default="hadamard")
    ap.add_argument("--mask-policy", default="resample")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    image = synthetic_image(64, 64, 0)
    patches, _ = pad_and_patch(image, 8)
    cfg = replace(RECIPE, max_steps=args.steps, seed=args.seed, mask_policy=args.mask_policy)
    model = MosaicModel(ModelConfig(embedding=args.embedding), seed=args.seed)

    def log(step, lr, loss):
        if step % 250 == 0:
            print(f"step {step:5d}  lr {lr:.2e}  loss {loss:.3e}", flush=True)

    t0 = time.perf_counter()
    res = train(patches, model, cfg, callback=log)
    print(f"trained {len(res.losses)} steps in {time.perf_counter() - t0:.0f} s")
    res.write_trace(out / "trace.csv")
    save_checkpoint(model, out / "model.ckpt", step=len(res.losses), optimizer=res.optimizer)
    rep = evaluate([image], model, cfg.gamma, seeds=range(10))
    rep.write_csv(out / "eval.csv")
    print(f"overfit set, 10 mask seeds: PSNR {rep.mean_psnr:.2f} +- {rep.std_psnr:.2f} dB, SSIM {rep.mean_ssim:.4f}")


if __name__ == "__main__":
    main()
