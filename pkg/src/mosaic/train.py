"""Training, evaluation and checkpointing for :class:`~mosaic.model.MosaicModel`."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .classic import IstaConfig, ista_reconstruct
from .errors import CheckpointError, NumericalError
from .imaging import GrayImage, add_gaussian_noise, pad_and_patch, psnr, ssim, stitch
from .model import ModelConfig, MosaicModel
from .sampler import CompressedMeasurements, MaskSpec, derive_seed, draw_mask, retained_count, scatter
from .wht import HadamardBasis, inverse_full, sample_full

MASK_POLICIES = ("resample", "fixed")
METHODS = ("mosaic", "inverse", "ista")
NOISE_DOMAINS = ("pixel", "measurement")

# Stream tags keep derived seeds for different purposes apart.
_MASK_STREAM = 1
_NOISE_STREAM = 2
_SHUFFLE_STREAM = 3


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.25
    lr0: float = 1e-3
    tau: float = 0.9
    decay_steps: int = 15000
    warmup_steps: int = 0
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    mask_policy: str = "resample"
    max_steps: int | None = None
    debug: bool = False

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must be in (0, 1]")
        if self.decay_steps < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("decay_steps, epochs and batch_size must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.mask_policy not in MASK_POLICIES:
            raise ValueError(f"mask_policy must be one of {MASK_POLICIES}")


def learning_rate(step: int, lr0: float, tau: float = 0.9, decay_steps: int = 15000, warmup_steps: int = 0) -> float:
    """``lr0 * tau ** floor(step / decay_steps)``, ramped linearly over the first ``warmup_steps``."""
    lr = lr0 * tau ** (step // decay_steps)
    if step < warmup_steps:
        lr *= (step + 1) / warmup_steps
    return lr


class Adam:
    """Adam with bias correction; the learning rate is supplied per step."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainResult:
    model: MosaicModel
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    optimizer: Adam | None = None

    def write_trace(self, path):
        write_loss_trace(path, self.losses, self.lrs)


def batch_masks(n: int, gamma: float, seeds) -> np.ndarray:
    """Stack of 0-based flat mask positions, one row per seed."""
    return np.stack([draw_mask(n, gamma, s).flat_array for s in seeds])


def measure(patches: np.ndarray, flat: np.ndarray, basis: HadamardBasis) -> np.ndarray:
    """Retained measurements ``(B, m)`` of ``(B, N, N)`` patches at positions ``flat``."""
    y = sample_full(patches, basis).reshape(len(patches), -1)
    return np.take_along_axis(y, flat, axis=1)


def train(patches, model: MosaicModel, cfg: TrainConfig, callback=None) -> TrainResult:
    """Fit ``model`` to reconstruct ``patches`` from random measurement subsets.

    Each step draws a fresh mask per sample (``mask_policy="resample"``) or
    reuses one mask for everything (``"fixed"``), measures, reconstructs and
    takes an Adam step on the pixel MSE. A batch larger than the dataset
    holds several shuffled copies, each with its own masks.
    """
    patches = np.asarray(patches, dtype=np.float64)
    N = model.config.N
    if patches.ndim != 3 or patches.shape[1:] != (N, N):
        raise ValueError(f"patches must be (P, {N}, {N}), got {patches.shape}")
    if len(patches) == 0:
        raise ValueError("empty training set")
    n = model.config.n
    basis = model.basis
    opt = Adam(model.parameters())
    result = TrainResult(model, optimizer=opt)
    copies = math.ceil(cfg.batch_size / len(patches))
    per_epoch = copies * len(patches)
    steps_per_epoch = math.ceil(per_epoch / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    fixed = draw_mask(n, cfg.gamma, derive_seed(cfg.seed, _MASK_STREAM)).flat_array
    prev_debug = ad._DEBUG
    ad.set_debug(cfg.debug)
    try:
        step = 0
        while step < total:
            epoch = step // steps_per_epoch
            rng = np.random.default_rng(derive_seed(cfg.seed, _SHUFFLE_STREAM, epoch))
            order = np.concatenate([rng.permutation(len(patches)) for _ in range(copies)])
            for start in range(0, per_epoch, cfg.batch_size):
                if step >= total:
                    break
                idx = order[start : start + cfg.batch_size]
                batch = patches[idx]
                if cfg.mask_policy == "resample":
                    seeds = [derive_seed(cfg.seed, _MASK_STREAM, step, k) for k in range(len(idx))]
                    flat = batch_masks(n, cfg.gamma, seeds)
                else:
                    flat = np.broadcast_to(fixed, (len(idx), fixed.size))
                values = measure(batch, flat, basis)
                lr = learning_rate(step, cfg.lr0, cfg.tau, cfg.decay_steps, cfg.warmup_steps)
                pred = model(values, flat)
                loss = ad.mse_loss(pred, ad.Tensor(batch.astype(model.dtype)))
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"loss became {value} at step {step}")
                opt.zero_grad()
                ad.backward(loss)
                if cfg.debug:
                    for p in model.parameters():
                        if not np.all(np.isfinite(p.grad)):
                            raise NumericalError(f"non-finite gradient for {p.name} at step {step}")
                opt.step(lr)
                result.losses.append(value)
                result.lrs.append(lr)
                if callback is not None:
                    callback(step, lr, value)
                step += 1
    finally:
        ad.set_debug(prev_debug)
    return result


def smooth(trace, window: int = 50) -> np.ndarray:
    """Means over consecutive non-overlapping windows."""
    t = np.asarray(trace, dtype=np.float64)
    usable = len(t) // window * window
    return t[:usable].reshape(-1, window).mean(axis=1)


def write_loss_trace(path, losses, lrs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for i, (lr, loss) in enumerate(zip(lrs, losses)):
            w.writerow([i, repr(lr), repr(loss)])


# --- evaluation -------------------------------------------------------------


@dataclass
class EvalReport:
    gamma: float
    seeds: list[int]
    psnr: list[float]
    ssim: list[float]
    noise_sigma: float = 0.0

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def std_psnr(self) -> float:
        return _std(self.psnr)

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def std_ssim(self) -> float:
        return _std(self.ssim)

    def rows(self):
        for s, p, q in zip(self.seeds, self.psnr, self.ssim):
            yield {"seed": s, "gamma": self.gamma, "psnr": p, "ssim": q}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["seed", "gamma", "psnr", "ssim"])
            w.writeheader()
            for row in self.rows():
                w.writerow(row)


def _std(values) -> float:
    a = np.asarray(values, dtype=np.float64)
    if np.isinf(a).all():
        return 0.0
    return float(np.std(a))  # population std: one seed gives 0


def reconstruct_patches(
    patches: np.ndarray,
    flat: np.ndarray,
    values: np.ndarray,
    basis: HadamardBasis,
    method: str = "mosaic",
    model: MosaicModel | None = None,
    ista_cfg: IstaConfig | None = None,
    chunk: int = 256,
) -> np.ndarray:
    """Reconstruct a stack of patches from their (B, m) measurements."""
    if method == "mosaic":
        if model is None:
            raise ValueError("method 'mosaic' needs a trained model")
        out = [model.predict(values[s : s + chunk], flat[s : s + chunk]) for s in range(0, len(values), chunk)]
        return np.concatenate(out, axis=0)
    n = basis.order**2
    gamma = flat.shape[1] / n
    results = []
    for f, v in zip(flat, values):
        cm = CompressedMeasurements(MaskSpec(n, gamma, 0, tuple(int(x) for x in f)), np.asarray(v, dtype=np.float64))
        if method == "inverse":
            results.append(inverse_full(scatter(cm), basis))
        elif method == "ista":
            results.append(ista_reconstruct(cm, basis, ista_cfg or IstaConfig()))
        else:
            raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    return np.stack(results)


def evaluate(
    images,
    model: MosaicModel | None = None,
    gamma: float = 0.25,
    seeds=(0,),
    method: str = "mosaic",
    basis: HadamardBasis | None = None,
    noise_sigma: float = 0.0,
    noise_domain: str = "pixel",
    ista_cfg: IstaConfig | None = None,
) -> EvalReport:
    """PSNR/SSIM of stitched reconstructions, one value per mask seed.

    For seed ``s``, patch ``p`` of image ``i`` uses mask seed
    ``derive_seed(s, MASK, i, p)``; pixel-domain noise uses
    ``derive_seed(s, NOISE, i)``. Each seed's value is the mean over images.
    """
    images = [im if isinstance(im, GrayImage) else GrayImage(im) for im in images]
    if not images:
        raise ValueError("empty evaluation set")
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    if noise_domain not in NOISE_DOMAINS:
        raise ValueError(f"noise_domain must be one of {NOISE_DOMAINS}")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if basis is None:
        if model is None:
            raise ValueError("need a basis or a model")
        basis = model.basis
    N = basis.order
    n = N * N
    if retained_count(n, gamma) == 0:
        raise ValueError(f"gamma={gamma} keeps no measurements")
    report = EvalReport(gamma, seeds, [], [], noise_sigma)
    for s in seeds:
        ps, ss = [], []
        for i, img in enumerate(images):
            noisy = img
            if noise_domain == "pixel" and noise_sigma > 0:
                noisy = add_gaussian_noise(img, noise_sigma, derive_seed(s, _NOISE_STREAM, i))
            patches, layout = pad_and_patch(noisy, N)
            flat = batch_masks(n, gamma, [derive_seed(s, _MASK_STREAM, i, p) for p in range(len(patches))])
            values = measure(patches, flat, basis)
            if noise_domain == "measurement" and noise_sigma > 0:
                rng = np.random.default_rng(derive_seed(s, _NOISE_STREAM, i))
                values = values + rng.normal(0.0, noise_sigma, size=values.shape)
            recon = reconstruct_patches(patches, flat, values, basis, method, model, ista_cfg)
            out = stitch(recon, layout)  # clamps to [0, 1]
            ps.append(psnr(out, img))
            ss.append(ssim(out, img))
        report.psnr.append(float(np.mean(ps)))
        report.ssim.append(float(np.mean(ss)))
    return report


# --- checkpoints --------------------------------------------------------------

MAGIC = "MOSAIC-CHECKPOINT"
VERSION = 1


@dataclass
class Checkpoint:
    model: MosaicModel
    step: int = 0
    optimizer: Adam | None = None


def save_checkpoint(model: MosaicModel, path, step: int = 0, optimizer: Adam | None = None) -> None:
    """Text manifest (one ``tensor name dtype shape offset nbytes`` line each) then raw LE data."""
    tensors = [(name, p.data) for name, p in model.params.items()]
    extra = []
    if optimizer is not None:
        tensors += [(f"adam.m.{k}", v) for k, v in optimizer.m.items()]
        tensors += [(f"adam.v.{k}", v) for k, v in optimizer.v.items()]
        extra.append(f"adam_t {optimizer.t}")
    lines = [f"{MAGIC} {VERSION}", "config " + json.dumps(model.config.to_dict(), sort_keys=True), f"step {step}"]
    lines += extra
    offset = 0
    blobs = []
    for name, arr in tensors:
        a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        shape = ",".join(str(s) for s in a.shape)
        lines.append(f"tensor {name} {a.dtype.str} {shape} {offset} {a.nbytes}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    lines.append(f"end {offset}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    """Load a checkpoint; if ``config`` is given the stored one must equal it."""
    with open(path, "rb") as fh:
        data = fh.read()
    header_lines = []
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated manifest")
        try:
            line = data[pos:nl].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt manifest") from exc
        pos = nl + 1
        header_lines.append(line)
        if line.startswith("end "):
            break
        if len(header_lines) == 1:
            parts = line.split()
            if len(parts) != 2 or parts[0] != MAGIC:
                raise CheckpointError(f"{path}: not a MOSAIC checkpoint")
            if parts[1] != str(VERSION):
                raise CheckpointError(f"{path}: unsupported checkpoint version {parts[1]}")
    body = data[pos:]
    try:
        total = int(header_lines[-1].split()[1])
        cfg_line = next(ln for ln in header_lines if ln.startswith("config "))
        stored = ModelConfig(**json.loads(cfg_line[len("config ") :]))
        step = int(next(ln for ln in header_lines if ln.startswith("step ")).split()[1])
    except (StopIteration, ValueError, TypeError, IndexError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    if len(body) != total:
        raise CheckpointError(f"{path}: expected {total} data bytes, found {len(body)}")
    if config is not None and config != stored:
        raise CheckpointError(f"{path}: checkpoint config {stored} does not match {config}")
    arrays = {}
    adam_t = None
    for ln in header_lines[1:-1]:
        parts = ln.split()
        if parts[0] == "adam_t":
            adam_t = int(parts[1])
        if parts[0] != "tensor":
            continue
        try:
            _, name, dtype, shape, off, nbytes = parts
            shape = tuple(int(s) for s in shape.split(",")) if shape else ()
            off, nbytes = int(off), int(nbytes)
            dt = np.dtype(dtype)
        except (ValueError, TypeError) as exc:
            raise CheckpointError(f"{path}: bad tensor line {ln!r}") from exc
        if off + nbytes > len(body) or nbytes != dt.itemsize * int(np.prod(shape)):
            raise CheckpointError(f"{path}: tensor {name} overruns the data section")
        arrays[name] = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape)
    model_state = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    dtypes = {v.dtype for v in model_state.values()}
    if len(dtypes) != 1:
        raise CheckpointError(f"{path}: mixed parameter dtypes {dtypes}")
    model = MosaicModel(stored, dtype=dtypes.pop().newbyteorder("="))
    try:
        model.load_state_dict(model_state)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    opt = None
    if adam_t is not None:
        opt = Adam(model.parameters())
        opt.t = adam_t
        for k in opt.m:
            opt.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=model.dtype)
            opt.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=model.dtype)
    return Checkpoint(model, step, opt)
