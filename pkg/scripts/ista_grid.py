"""Grid over ISTA lambda and step size on 8-sparse DCT patches at gamma=0.5.

Reports the worst peak-to-peak PSNR over the seeds and the most iterations used.
"""

import argparse
import itertools

import numpy as np

from mosaic.classic import IstaConfig, ista_solve, sparse_dct_patch
from mosaic.errors import DivergenceError
from mosaic.imaging import psnr
from mosaic.sampler import compress, draw_mask
from mosaic.wht import build_hadamard, sample_full


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lams", default="1e-4,1e-3,1e-2,3e-2,1e-1")
    ap.add_argument("--alphas", default="0.25,0.5,1.0")
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--iters", type=int, default=500)
    args = ap.parse_args()

    b = build_hadamard(32)
    cases = []
    for s in range(args.seeds):
        X = sparse_dct_patch(b, 8, s)
        cases.append((X, compress(sample_full(X, b), draw_mask(1024, 0.5, s))))
    print("lam,alpha,worst_psnr,max_iters")
    for lam, alpha in itertools.product(map(float, args.lams.split(",")), map(float, args.alphas.split(","))):
        worst, most = np.inf, 0
        try:
            for X, cm in cases:
                res = ista_solve(cm, b, IstaConfig(lam=lam, alpha=alpha, iters=args.iters))
                worst = min(worst, psnr(res.x, X, data_range=np.ptp(X)))
                most = max(most, res.iterations)
        except DivergenceError:
            worst = float("nan")
        print(f"{lam:g},{alpha:g},{worst:.2f},{most}", flush=True)


if __name__ == "__main__":
    main()
