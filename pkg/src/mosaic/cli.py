"""Command-line entry point: ``mosaic <command> [options]``.

Exit codes: 0 success, 2 invalid arguments or data, 3 file/IO problems,
4 numerical failure (NaN loss, ISTA divergence, failed gradient check).

Images are PGM files (other formats need Pillow) or ``synthetic:WxH:SEED``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import time
import types
import typing

import numpy as np

from . import autodiff as ad
from .classic import IstaConfig
from .errors import CheckpointError, NumericalError
from .imaging import GrayImage, PatchLayout, pad_and_patch, psnr, read_image, ssim, stitch, synthetic_image, write_pgm
from .model import ModelConfig, MosaicModel
from .sampler import CompressedMeasurements, MaskSpec, derive_seed, draw_mask
from .train import (
    METHODS,
    NOISE_DOMAINS,
    TrainConfig,
    evaluate,
    load_checkpoint,
    measure,
    reconstruct_patches,
    save_checkpoint,
    train,
)
from .wht import build_hadamard, fwht

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

MEAS_MAGIC = "MOSAIC-MEASUREMENTS"
MEAS_VERSION = 1
MASK_MAGIC = "MOSAIC-MASKS"

# Mask seeds for patch p of a sampled image are derive_seed(seed, SAMPLE_STREAM, p).
SAMPLE_STREAM = 11


class UsageError(ValueError):
    pass


# --- config overrides ---------------------------------------------------------


def _coerce(tp, raw: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", "null"):
            return None
        return _coerce(args[0], raw)
    if tp is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def apply_overrides(cls, pairs, base=None):
    """Build a dataclass from ``key=value`` strings; unknown keys are rejected."""
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls)}
    values = dataclasses.asdict(base) if base is not None else {}
    for item in pairs:
        key, sep, raw = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"override {item!r} is not key=value")
        if key not in fields:
            raise UsageError(f"unknown {cls.__name__} key {key!r}; valid keys: {', '.join(sorted(fields))}")
        try:
            values[key] = _coerce(hints[key], raw.strip())
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from exc
    return cls(**values)


def split_overrides(pairs):
    """Route each ``key=value`` to TrainConfig, ModelConfig or IstaConfig (prefix ``ista.``)."""
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    out = {"train": [], "model": [], "ista": []}
    for item in pairs:
        key = item.partition("=")[0].strip().replace("-", "_")
        if key.startswith("ista."):
            out["ista"].append(item.strip()[len("ista.") :])
        elif key in train_keys:
            out["train"].append(item)
        elif key in model_keys:
            out["model"].append(item)
        else:
            raise UsageError(f"unknown config key {key!r}")
    return out


# --- images and measurement files -----------------------------------------------


def load_image(spec: str) -> GrayImage:
    if spec.startswith("synthetic:"):
        try:
            _, size, seed = spec.split(":")
            w, h = (int(t) for t in size.lower().split("x"))
            return synthetic_image(w, h, int(seed))
        except ValueError as exc:
            raise UsageError(f"synthetic image spec must be synthetic:WxH:SEED, got {spec!r}") from exc
    return read_image(spec)


def write_measurements(path, records, header: dict):
    """``records``: list of (MaskSpec, values). Values are written with full precision."""
    with open(path, "w") as fh:
        fh.write(f"{MEAS_MAGIC} {MEAS_VERSION}\n")
        fh.write(" ".join(f"{k}={v}" for k, v in header.items()) + "\n")
        for p, (mask, values) in enumerate(records):
            fh.write(f"patch {p} {mask.m} {mask.seed}\n")
            for (i, j), y in zip(mask.indices, values):
                fh.write(f"{i} {j} {float(y)!r}\n")


def read_measurements(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0].split() != [MEAS_MAGIC, str(MEAS_VERSION)]:
        raise UsageError(f"{path}: not a version {MEAS_VERSION} measurement file")
    try:
        header = dict(tok.split("=", 1) for tok in lines[1].split())
        N = int(header["N"])
        gamma = float(header["gamma"])
        records = []
        pos = 2
        while pos < len(lines):
            if not lines[pos].strip():
                pos += 1
                continue
            tag, p, m, seed = lines[pos].split()
            if tag != "patch" or int(p) != len(records):
                raise ValueError(f"expected 'patch {len(records)}' at line {pos + 1}")
            m = int(m)
            rows = [lines[pos + 1 + r].split() for r in range(m)]
            flat = tuple((int(i) - 1) * N + int(j) - 1 for i, j, _ in rows)
            values = np.array([float(y) for _, _, y in rows])
            records.append(CompressedMeasurements(MaskSpec(N * N, gamma, int(seed), flat), values))
            pos += 1 + m
    except (KeyError, IndexError, ValueError) as exc:
        raise UsageError(f"{path}: malformed measurement file ({exc})") from exc
    return header, records


def write_masks(path, masks, seed: int):
    """Header ``MOSAIC-MASKS count base_seed``, then one MaskSpec text block per patch."""
    with open(path, "w") as fh:
        fh.write(f"{MASK_MAGIC} {len(masks)} {seed}\n")
        for mask in masks:
            fh.write(mask.to_text())


def read_masks(path):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[0] != MASK_MAGIC:
        raise UsageError(f"{path}: not a mask file")
    count, seed = int(head[1]), int(head[2])
    if len(lines) != 1 + 2 * count:
        raise UsageError(f"{path}: expected {count} masks")
    return [MaskSpec.from_text("\n".join(lines[1 + 2 * k : 3 + 2 * k])) for k in range(count)], seed


# --- commands ----------------------------------------------------------------------


def cmd_sample(args):
    img = load_image(args.input)
    N = args.N
    basis = build_hadamard(N, args.ordering)
    patches, layout = pad_and_patch(img, N)
    seed = args.seed
    if args.masks:
        masks, seed = read_masks(args.masks)
        if len(masks) != len(patches) or any(mk.n != N * N for mk in masks):
            raise UsageError(f"{args.masks}: masks do not match {len(patches)} patches of {N}x{N}")
    else:
        masks = [draw_mask(N * N, args.gamma, derive_seed(seed, SAMPLE_STREAM, p)) for p in range(len(patches))]
    records = []
    for patch, mask in zip(patches, masks):
        values = measure(patch[None], mask.flat_array[None], basis)[0]
        records.append((mask, values))
    header = {
        "N": N,
        "ordering": args.ordering,
        "width": layout.width,
        "height": layout.height,
        "patches": layout.count,
        "gamma": repr(masks[0].gamma),
        "seed": seed,
    }
    write_measurements(args.out + ".meas", records, header)
    write_masks(args.out + ".mask", masks, seed)
    print(f"wrote {args.out}.meas and {args.out}.mask: {layout.count} patches, m={masks[0].m} of {N * N}")
    return EXIT_OK


def cmd_reconstruct(args):
    header, records = read_measurements(args.measurements)
    N = int(header["N"])
    basis = build_hadamard(N, header.get("ordering", "sylvester"))
    w, h = int(header["width"]), int(header["height"])
    layout = PatchLayout(N, -(-h // N), -(-w // N), w, h)
    if layout.count != len(records):
        raise UsageError(f"header declares {layout.count} patches, file has {len(records)}")
    model = None
    if args.method == "mosaic":
        if not args.checkpoint:
            raise UsageError("--method mosaic requires --checkpoint")
        model = load_checkpoint(args.checkpoint).model
        if model.config.N != N or model.config.ordering != basis.ordering:
            raise UsageError("checkpoint patch size or ordering does not match the measurements")
        basis = model.basis
    ms = {cm.mask.m for cm in records}
    ista_cfg = apply_overrides(IstaConfig, args.set or [])
    recon = []
    for m in sorted(ms):
        idx = [k for k, cm in enumerate(records) if cm.mask.m == m]
        flat = np.stack([records[k].mask.flat_array for k in idx])
        values = np.stack([records[k].values for k in idx])
        out = reconstruct_patches(None, flat, values, basis, args.method, model, ista_cfg)
        recon.append((idx, out))
    patches = np.zeros((len(records), N, N))
    for idx, out in recon:
        patches[idx] = out
    img = stitch(patches, layout)
    write_pgm(args.out, img)
    print(f"wrote {args.out}")
    if args.truth:
        truth = load_image(args.truth)
        row = {"method": args.method, "psnr": psnr(img, truth), "ssim": ssim(img, truth) if min(truth.values.shape) >= 11 else float("nan")}
        if args.metrics:
            with open(args.metrics, "w", newline="") as fh:
                wr = csv.DictWriter(fh, fieldnames=list(row))
                wr.writeheader()
                wr.writerow(row)
        print(f"psnr={row['psnr']:.4f} ssim={row['ssim']:.4f}")
    return EXIT_OK


def _training_patches(inputs, N):
    stacks = [pad_and_patch(load_image(s), N)[0] for s in inputs]
    return np.concatenate(stacks, axis=0)


def cmd_train(args):
    groups = split_overrides(args.set or [])
    mcfg = apply_overrides(ModelConfig, groups["model"])
    tcfg = apply_overrides(TrainConfig, groups["train"])
    patches = _training_patches(args.input, mcfg.N)
    if args.resume:
        ckpt = load_checkpoint(args.resume, mcfg)
        model = ckpt.model
    else:
        model = MosaicModel(mcfg, seed=tcfg.seed)

    def report(step, lr, loss):
        if args.log_every and step % args.log_every == 0:
            print(f"step {step} lr {lr:.3g} loss {loss:.6g}", flush=True)

    t0 = time.perf_counter()
    result = train(patches, model, tcfg, callback=report)
    elapsed = time.perf_counter() - t0
    save_checkpoint(model, args.out, step=len(result.losses), optimizer=result.optimizer)
    if args.trace:
        result.write_trace(args.trace)
    print(f"trained {len(result.losses)} steps in {elapsed:.1f}s, final loss {result.losses[-1]:.6g}; wrote {args.out}")
    return EXIT_OK


def _eval_setup(args):
    groups = split_overrides(args.set or [])
    if groups["train"] or groups["model"]:
        raise UsageError("only ista.* overrides apply here")
    ista_cfg = apply_overrides(IstaConfig, groups["ista"])
    model = None
    if args.method == "mosaic":
        if not args.checkpoint:
            raise UsageError("--method mosaic requires --checkpoint")
        model = load_checkpoint(args.checkpoint).model
        basis = model.basis
    else:
        basis = build_hadamard(args.N, args.ordering)
    images = [load_image(s) for s in args.input]
    return images, model, basis, ista_cfg


def cmd_eval(args):
    images, model, basis, ista_cfg = _eval_setup(args)
    seeds = range(args.seed, args.seed + args.seeds)
    rep = evaluate(images, model, args.gamma, seeds, args.method, basis, args.sigma, args.noise_domain, ista_cfg)
    if args.out:
        rep.write_csv(args.out)
    print(f"psnr {rep.mean_psnr:.4f} +- {rep.std_psnr:.4f}  ssim {rep.mean_ssim:.4f} +- {rep.std_ssim:.4f}  ({len(rep.seeds)} seeds)")
    return EXIT_OK


def cmd_noise_sweep(args):
    images, model, basis, ista_cfg = _eval_setup(args)
    seeds = range(args.seed, args.seed + args.seeds)
    rows = []
    for sigma in sorted(args.sigmas):
        for gamma in sorted(args.gammas):
            rep = evaluate(images, model, gamma, seeds, args.method, basis, sigma, args.noise_domain, ista_cfg)
            rows.append(
                {
                    "sigma": sigma,
                    "gamma": gamma,
                    "psnr_mean": rep.mean_psnr,
                    "psnr_std": rep.std_psnr,
                    "ssim_mean": rep.mean_ssim,
                    "ssim_std": rep.std_ssim,
                }
            )
            print(f"sigma={sigma:g} gamma={gamma:g} psnr={rep.mean_psnr:.3f} ssim={rep.mean_ssim:.4f}", flush=True)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        wr = csv.DictWriter(out, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_grad_check(args):
    groups = split_overrides(args.set or [])
    if groups["train"] or groups["ista"]:
        raise UsageError("only model keys apply to grad-check")
    cfg = apply_overrides(ModelConfig, groups["model"])
    model = MosaicModel(cfg, seed=args.seed, dtype=np.float64)
    rng = np.random.default_rng(args.seed)
    n = cfg.n
    flat = np.stack([draw_mask(n, args.gamma, derive_seed(args.seed, b)).flat_array for b in range(args.batch)])
    target = rng.random((args.batch, cfg.N, cfg.N))
    values = measure(target, flat, model.basis)

    def closure():
        return ad.mse_loss(model(values, flat), ad.Tensor(target))

    report = ad.grad_check(closure, model.parameters(), tolerance=args.tolerance, coords_per_param=args.coords, seed=args.seed)
    if args.verbose:
        for name, err in report.per_parameter.items():
            print(f"{name:32s} {err:.3e}")
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_bench_wht(args):
    size = 1 << args.log2
    v = np.random.default_rng(0).standard_normal(size)
    fwht(v)  # warm-up
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        fwht(v)
        times.append(time.perf_counter() - t0)
    best = min(times)
    print(f"fwht 2^{args.log2} = {size} elements: best {best * 1e3:.2f} ms, median {np.median(times) * 1e3:.2f} ms, "
          f"{size / best / 1e6:.1f} M elements/s")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------


def _gamma(text):
    g = float(text)
    if not 0 < g <= 1:
        raise argparse.ArgumentTypeError(f"gamma must be in (0, 1], got {text}")
    return g


def _floats(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mosaic", description="Hadamard compressive sensing toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="measure an image and write measurement and mask files")
    s.add_argument("--input", required=True)
    s.add_argument("--gamma", type=_gamma, default=0.25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--N", type=int, default=8)
    s.add_argument("--ordering", default="sylvester", choices=["sylvester", "sequency"])
    s.add_argument("--masks", help="replay masks from a mask file instead of drawing them")
    s.add_argument("--out", required=True, help="output prefix; writes PREFIX.meas and PREFIX.mask")
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("reconstruct", help="reconstruct an image from a measurement file")
    r.add_argument("--measurements", required=True)
    r.add_argument("--method", choices=METHODS, default="inverse")
    r.add_argument("--checkpoint")
    r.add_argument("--out", required=True, help="output PGM")
    r.add_argument("--truth", help="ground-truth image for metrics")
    r.add_argument("--metrics", help="metrics CSV (needs --truth)")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="ISTA settings (lam, alpha, iters, tol, sparsifier)")
    r.set_defaults(func=cmd_reconstruct)

    t = sub.add_parser("train", help="train a reconstructor on image patches")
    t.add_argument("--input", nargs="+", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--trace", help="loss trace CSV")
    t.add_argument("--resume", help="start from this checkpoint")
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="TrainConfig or ModelConfig field")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "PSNR/SSIM over mask seeds"),
        ("noise-sweep", cmd_noise_sweep, "PSNR/SSIM over a sigma x gamma grid"),
    ):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--input", nargs="+", required=True)
        e.add_argument("--method", choices=METHODS, default="mosaic")
        e.add_argument("--checkpoint")
        e.add_argument("--seeds", type=int, default=10, help="number of mask seeds")
        e.add_argument("--seed", type=int, default=0, help="first mask seed")
        e.add_argument("--N", type=int, default=8, help="patch side for non-learned methods")
        e.add_argument("--ordering", default="sylvester", choices=["sylvester", "sequency"])
        e.add_argument("--noise-domain", choices=NOISE_DOMAINS, default="pixel")
        e.add_argument("--out", help="CSV output")
        e.add_argument("--set", action="append", metavar="KEY=VALUE", help="ista.* settings")
        if name == "eval":
            e.add_argument("--gamma", type=_gamma, default=0.25)
            e.add_argument("--sigma", type=float, default=0.0)
        else:
            e.add_argument("--gammas", type=_floats, default=[0.25])
            e.add_argument("--sigmas", type=_floats, default=[0.0, 0.01, 0.1, 0.4])
        e.set_defaults(func=func)

    g = sub.add_parser("grad-check", help="finite-difference check of the model gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--gamma", type=_gamma, default=0.25)
    g.add_argument("--batch", type=int, default=2)
    g.add_argument("--coords", type=int, default=20)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--verbose", action="store_true")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="ModelConfig field")
    g.set_defaults(func=cmd_grad_check)

    b = sub.add_parser("bench-wht", help="time the fast Walsh-Hadamard transform")
    b.add_argument("--log2", type=int, default=20)
    b.add_argument("--repeats", type=int, default=10)
    b.set_defaults(func=cmd_bench_wht)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:  # pragma: no cover - only with np.seterr(raise)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
