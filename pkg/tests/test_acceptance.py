"""Acceptance criteria 1-10, one test each.

Every test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (also repeated
in the terminal summary), so ``pytest tests/test_acceptance.py -v`` doubles
as the acceptance report. The toy model is trained once per session and
shared by criteria 6, 8 and 9.
"""

import contextlib
import math
import time

import numpy as np
import pytest

from mosaic import autodiff as ad
from mosaic.classic import IstaConfig, ista_solve, sparse_dct_patch
from mosaic.cli import main as cli_main
from mosaic.embed import embedding_matrices
from mosaic.imaging import GrayImage, pad_and_patch, psnr, stitch, synthetic_image
from mosaic.model import ModelConfig, MosaicModel
from mosaic.sampler import compress, draw_mask, full_mask
from mosaic.train import TrainConfig, evaluate, load_checkpoint, measure, save_checkpoint, smooth, train
from mosaic.wht import build_hadamard, fwht, inverse_full, sample_full

RESULTS = {}

# Toy recipe shared by criteria 6-9. See README for how it was chosen.
TOY_RECIPE = TrainConfig(gamma=0.25, lr0=1e-2, warmup_steps=500, batch_size=128, epochs=5000, max_steps=5000, seed=0)
TOY_MODEL = ModelConfig()  # N=8, d=16, 2+2 blocks, 1 head
STEP_BUDGET = 5000
TIME_BUDGET = 15 * 60


@contextlib.contextmanager
def criterion(number, title, capsys):
    detail = {}
    try:
        yield detail
    except BaseException:
        line = f"ACCEPTANCE {number:>2} FAIL  {title}  {detail.get('note', '')}".rstrip()
        RESULTS[number] = line
        with capsys.disabled():
            print("\n" + line)
        raise
    line = f"ACCEPTANCE {number:>2} PASS  {title}  {detail.get('note', '')}".rstrip()
    RESULTS[number] = line
    with capsys.disabled():
        print("\n" + line)


def dense_walsh(N):
    """Sylvester matrix from the popcount rule, independent of the library."""
    idx = np.arange(N)
    bits = np.bitwise_and(idx[:, None], idx[None, :])
    parity = np.array([bin(int(b)).count("1") & 1 for b in bits.ravel()]).reshape(N, N)
    return 1 - 2 * parity


@pytest.fixture(scope="session")
def overfit_image():
    return synthetic_image(64, 64, 0)


def _train_toy(image, embedding):
    patches, _ = pad_and_patch(image, 8)
    assert len(patches) == 64
    model = MosaicModel(ModelConfig(embedding=embedding), seed=0)
    t0 = time.perf_counter()
    result = train(patches, model, TOY_RECIPE)
    return model, result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained_toy(overfit_image):
    return _train_toy(overfit_image, "hadamard")


def test_1_transform_correctness(capsys):
    with criterion(1, "fwht equals dense oracle; 2^20 transform <= 100 ms", capsys) as d:
        rng = np.random.default_rng(0)
        for N in (2, 4, 8, 16, 32, 64):
            H = dense_walsh(N)
            v = rng.integers(-1000, 1000, size=(5, N))
            assert np.array_equal(fwht(v), v @ H.T)
            X = rng.integers(-50, 50, size=(N, N)).astype(float)
            b = build_hadamard(N)
            assert np.array_equal(sample_full(X, b) * N, H @ X @ H.T)
        big = rng.standard_normal(1 << 20)
        fwht(big)
        best = math.inf
        for _ in range(5):
            t0 = time.perf_counter()
            fwht(big)
            best = min(best, time.perf_counter() - t0)
        d["note"] = f"(best {best * 1e3:.1f} ms)"
        assert best <= 0.100


def test_2_orthogonality_parseval(capsys):
    with criterion(2, "Phi Phi^T = N I; Parseval on 100 patches", capsys):
        for N in (2, 4, 8, 16, 32, 64):
            for ordering in ("sylvester", "sequency"):
                P = build_hadamard(N, ordering).matrix.astype(np.int64)
                assert np.array_equal(P @ P.T, N * np.eye(N, dtype=np.int64))
        rng = np.random.default_rng(1)
        b = build_hadamard(32)
        for _ in range(100):
            X = rng.random((32, 32))
            assert abs(np.linalg.norm(sample_full(X, b)) - np.linalg.norm(X)) <= 1e-9 * np.linalg.norm(X)


def test_3_exact_inversion(capsys):
    with criterion(3, "inverse_full o sample_full = id; (1/k) sum E = X", capsys):
        rng = np.random.default_rng(2)
        for N in (4, 8, 32):
            for ordering in ("sylvester", "sequency"):
                b = build_hadamard(N, ordering)
                for _ in range(10):
                    X = rng.random((N, N))
                    back = inverse_full(sample_full(X, b), b)
                    assert np.linalg.norm(back - X) <= 1e-9 * np.linalg.norm(X)
                    flat = np.arange(N * N)
                    y = sample_full(X, b).reshape(-1)
                    E = embedding_matrices(y, flat, b).reshape(N * N, N, N)
                    assert np.linalg.norm(E.sum(axis=0) / N - X) <= 1e-9 * np.linalg.norm(X)


def test_4_gradient_fidelity(capsys):
    with criterion(4, "autodiff primitives and toy model match finite differences", capsys) as d:
        t0 = time.perf_counter()
        rng = np.random.default_rng(3)

        def p(shape, name):
            return ad.Parameter(rng.standard_normal(shape), name, dtype=np.float64)

        x, w, b, g = p((3, 6), "x"), p((6, 6), "w"), p((6,), "b"), p((6,), "g")
        t = ad.Tensor(rng.standard_normal((3, 6)))
        cases = {
            "matmul": lambda: ad.mse_loss(ad.matmul(x, w), t),
            "add/scale": lambda: ad.mse_loss(ad.scale(ad.add(x, b), 0.7), t),
            "transpose/reshape": lambda: ad.mse_loss(ad.reshape(ad.transpose(ad.matmul(x, w)), (3, 6)), t),
            "concat": lambda: ad.mse_loss(ad.concat_rows([x, x]), ad.concat_rows([t, t])),
            "softmax": lambda: ad.mse_loss(ad.softmax(x), t),
            "layer_norm": lambda: ad.mse_loss(ad.layer_norm(x, g, b), t),
            "gelu": lambda: ad.mse_loss(ad.gelu(x), t),
            "linear": lambda: ad.mse_loss(ad.linear(x, w, b), t),
        }
        worst = 0.0
        for name, f in cases.items():
            rep = ad.grad_check(f, [x, w, b, g], tolerance=1e-4, coords_per_param=20)
            assert rep.passed, f"{name}: {rep.summary()}"
            worst = max(worst, rep.max_rel_error)

        model = MosaicModel(TOY_MODEL, seed=3, dtype=np.float64)
        X = rng.random((2, 8, 8))
        flat = np.stack([draw_mask(64, 0.25, s).flat_array for s in range(2)])
        values = measure(X, flat, model.basis)
        rep = ad.grad_check(
            lambda: ad.mse_loss(model(values, flat), ad.Tensor(X)),
            model.parameters(),
            tolerance=1e-4,
            coords_per_param=20,
        )
        elapsed = time.perf_counter() - t0
        worst = max(worst, rep.max_rel_error)
        d["note"] = f"(max rel err {worst:.2e}, {rep.checked} model coords, {elapsed:.1f} s)"
        assert rep.passed, rep.summary()
        assert elapsed < 120


def test_5_classical_baseline(capsys):
    with criterion(5, "ISTA exact at gamma=1; 8-sparse DCT patches > 40 dB", capsys) as d:
        b = build_hadamard(32)
        X = np.random.default_rng(4).random((32, 32))
        cm = compress(sample_full(X, b), full_mask(1024))
        res = ista_solve(cm, b, IstaConfig(lam=0.0, alpha=0.5, iters=1))
        assert res.iterations == 1 and np.abs(res.x - X).max() < 1e-8
        worst = math.inf
        for seed in range(10):
            S = sparse_dct_patch(b, 8, seed)
            cm = compress(sample_full(S, b), draw_mask(1024, 0.5, seed))
            res = ista_solve(cm, b, IstaConfig(iters=500))
            assert res.iterations <= 500
            worst = min(worst, psnr(res.x, S, data_range=np.ptp(S)))
        d["note"] = f"(worst {worst:.1f} dB)"
        assert worst > 40


def test_6_toy_training(trained_toy, overfit_image, capsys):
    with criterion(6, "toy overfit >= 30 dB in 5000 steps, <= 15 min, smoothed loss monotone", capsys) as d:
        model, result, elapsed = trained_toy
        rep = evaluate([overfit_image], model, 0.25, seeds=range(5))
        sm = smooth(result.losses, 50)
        # monotone until plateau: allow rises below 1% of the current level
        rises = np.diff(sm) / sm[:-1]
        d["note"] = (
            f"(PSNR {rep.mean_psnr:.2f} dB, {len(result.losses)} steps, {elapsed:.0f} s, "
            f"largest smoothed rise {rises.max():.2%})"
        )
        assert len(result.losses) <= STEP_BUDGET
        assert elapsed <= TIME_BUDGET
        assert np.all(rises < 0.01)
        assert rep.mean_psnr >= 30


def test_7_embedding_ablation(trained_toy, overfit_image, capsys):
    with criterion(7, "no-embedding ablation scores lower than Hadamard embedding", capsys) as d:
        full = evaluate([overfit_image], trained_toy[0], 0.25, seeds=range(5)).mean_psnr
        ablated_model, _, _ = _train_toy(overfit_image, "ones-times-y")
        ablated = evaluate([overfit_image], ablated_model, 0.25, seeds=range(5)).mean_psnr
        d["note"] = f"(hadamard {full:.2f} dB, ones-times-y {ablated:.2f} dB)"
        assert ablated < full


def test_8_noise_monotonicity(trained_toy, overfit_image, capsys):
    with criterion(8, "PSNR(0.01) >= PSNR(0.1) >= PSNR(0.4) at gamma=0.25", capsys) as d:
        model = trained_toy[0]
        means = [
            evaluate([overfit_image], model, 0.25, seeds=range(5), noise_sigma=s).mean_psnr for s in (0.01, 0.1, 0.4)
        ]
        d["note"] = "(" + ", ".join(f"{m:.2f}" for m in means) + " dB)"
        assert means[0] >= means[1] >= means[2]


def test_9_seed_consistency(trained_toy, overfit_image, capsys):
    with criterion(9, "10-seed PSNR std < 1 dB", capsys) as d:
        rep = evaluate([overfit_image], trained_toy[0], 0.25, seeds=range(10))
        d["note"] = f"(mean {rep.mean_psnr:.2f} dB, std {rep.std_psnr:.3f} dB)"
        assert len(rep.psnr) == 10
        assert rep.std_psnr < 1.0


def test_10_round_trips(tmp_path, capsys):
    with criterion(10, "pad/patch/stitch, checkpoint and mask replay round trips", capsys):
        rng = np.random.default_rng(5)
        for N in (8, 32):
            for h in range(1, 101):
                for w in (h, int(rng.integers(1, 101))):
                    img = GrayImage(rng.random((h, w)))
                    p, lay = pad_and_patch(img, N)
                    assert np.array_equal(stitch(p, lay).values, img.values)

        model = MosaicModel(TOY_MODEL, seed=7)
        path = tmp_path / "toy.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path, TOY_MODEL).model
        X = rng.random((6, 8, 8))
        flat = np.stack([draw_mask(64, 0.25, s).flat_array for s in range(6)])
        values = measure(X, flat, model.basis)
        assert np.array_equal(loaded.predict(values, flat), model.predict(values, flat))

        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert cli_main(["sample", "--input", "synthetic:37x21:4", "--gamma", "0.3", "--seed", "9", "--out", a]) == 0
        assert cli_main(["sample", "--input", "synthetic:37x21:4", "--masks", a + ".mask", "--out", b]) == 0
        assert open(a + ".meas").read() == open(b + ".meas").read()
        assert open(a + ".mask").read() == open(b + ".mask").read()
