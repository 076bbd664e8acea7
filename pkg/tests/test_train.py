import math

import numpy as np
import pytest

from mosaic import autodiff as ad
from mosaic.errors import CheckpointError, NumericalError
from mosaic.imaging import pad_and_patch, synthetic_image
from mosaic.model import ModelConfig, MosaicModel
from mosaic.train import (
    Adam,
    TrainConfig,
    evaluate,
    learning_rate,
    load_checkpoint,
    measure,
    save_checkpoint,
    smooth,
    train,
    write_loss_trace,
)
from mosaic.sampler import draw_mask

TOY = ModelConfig()


def toy_patches(count=64, seed=0):
    patches, _ = pad_and_patch(synthetic_image(64, 64, seed), 8)
    return patches[:count]


def test_config_validation():
    for kw in (dict(gamma=0), dict(gamma=1.5), dict(lr0=0), dict(tau=0), dict(tau=1.1), dict(mask_policy="x"), dict(batch_size=0), dict(warmup_steps=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_lr_schedule():
    assert learning_rate(0, 1e-3) == 1e-3
    assert learning_rate(14999, 1e-3) == 1e-3
    assert learning_rate(15000, 1e-3) == 0.9 * 1e-3
    assert learning_rate(30000, 2e-3) == pytest.approx(0.81 * 2e-3)
    assert learning_rate(10, 1.0, tau=0.5, decay_steps=5) == 0.25


def test_warmup_ramp():
    assert learning_rate(0, 1.0, warmup_steps=4) == 0.25
    assert learning_rate(3, 1.0, warmup_steps=4) == 1.0
    assert learning_rate(4, 1.0, warmup_steps=4) == 1.0
    res = train(toy_patches(4), MosaicModel(TOY), TrainConfig(epochs=3, batch_size=4, warmup_steps=2))
    assert res.lrs == [5e-4, 1e-3, 1e-3]


def test_batch_larger_than_dataset():
    seen = []
    res = train(toy_patches(3), MosaicModel(TOY), TrainConfig(epochs=2, batch_size=8),
                callback=lambda s, lr, l: seen.append(s))
    # 3 copies of 3 patches per epoch, batches of 8 then 1
    assert seen == [0, 1, 2, 3] and len(res.losses) == 4


def test_adam_matches_reference_update():
    p = ad.Parameter(np.array([1.0, -2.0]), "p", dtype=np.float64)
    opt = Adam([p])
    m = v = np.zeros(2)
    x = p.data.copy()
    for t in range(1, 6):
        g = 2 * x  # gradient of sum(x^2)
        p.zero_grad()
        ad.backward(ad.scale(ad.mse_loss(p, ad.Tensor(np.zeros(2))), 2.0))
        assert np.allclose(p.grad, g)
        opt.step(0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.allclose(p.data, x, rtol=1e-12)


def test_single_sample_overfit_improves():
    patch = toy_patches(1)
    model = MosaicModel(TOY, seed=0)
    res = train(patch, model, TrainConfig(epochs=100, batch_size=1, lr0=1e-3))
    assert len(res.losses) == 100
    assert min(res.losses[1:]) < res.losses[0]


def test_training_is_bitwise_reproducible():
    patches = toy_patches(8)
    cfg = TrainConfig(epochs=5, batch_size=4, lr0=3e-3, seed=3)
    a = train(patches, MosaicModel(TOY, seed=1), cfg).losses
    b = train(patches, MosaicModel(TOY, seed=1), cfg).losses
    assert a == b


def test_fixed_mask_policy_runs():
    res = train(toy_patches(4), MosaicModel(TOY, seed=0), TrainConfig(epochs=3, batch_size=4, mask_policy="fixed"))
    assert len(res.losses) == 3


def test_max_steps_and_trace(tmp_path):
    res = train(toy_patches(16), MosaicModel(TOY), TrainConfig(epochs=10, batch_size=8, max_steps=5))
    assert len(res.losses) == 5 and len(res.lrs) == 5
    path = tmp_path / "trace.csv"
    res.write_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,lr,loss" and len(lines) == 6
    assert float(lines[1].split(",")[2]) == res.losses[0]


def test_callback_sees_every_step():
    seen = []
    train(toy_patches(4), MosaicModel(TOY), TrainConfig(epochs=2, batch_size=2), callback=lambda s, lr, l: seen.append(s))
    assert seen == [0, 1, 2, 3]


def test_nan_loss_names_step():
    model = MosaicModel(TOY)
    model["head.bias"].data[:] = np.nan
    with pytest.raises(NumericalError, match="step 0"):
        train(toy_patches(2), model, TrainConfig(epochs=1, batch_size=2))


def test_debug_mode_checks_gradients():
    res = train(toy_patches(2), MosaicModel(TOY), TrainConfig(epochs=2, batch_size=2, debug=True))
    assert all(math.isfinite(v) for v in res.losses)
    assert not ad._DEBUG


def test_bad_patch_shapes():
    with pytest.raises(ValueError):
        train(np.zeros((2, 4, 4)), MosaicModel(TOY), TrainConfig())
    with pytest.raises(ValueError):
        train(np.zeros((0, 8, 8)), MosaicModel(TOY), TrainConfig())


def test_smooth_windows():
    assert smooth(list(range(10)), 5).tolist() == [2.0, 7.0]
    assert smooth([1.0] * 49, 50).size == 0


def test_write_loss_trace(tmp_path):
    write_loss_trace(tmp_path / "t.csv", [0.5, 0.25], [1e-3, 1e-3])
    assert (tmp_path / "t.csv").read_text().splitlines()[2] == "1,0.001,0.25"


# --- evaluation ----------------------------------------------------------------


def test_single_seed_std_zero():
    img = synthetic_image(16, 16, 0)
    rep = evaluate([img], MosaicModel(TOY), 0.25, seeds=[4])
    assert rep.std_psnr == 0.0 and len(rep.psnr) == 1


def test_gamma_one_inverse_is_exact():
    img = synthetic_image(24, 20, 2)
    rep = evaluate([img], None, 1.0, seeds=[0, 1], method="inverse", basis=MosaicModel(TOY).basis)
    assert rep.psnr == [math.inf, math.inf]
    assert rep.mean_ssim == 1.0
    assert rep.std_psnr == 0.0


def test_evaluate_is_pure():
    img = synthetic_image(16, 16, 1)
    model = MosaicModel(TOY, seed=5)
    a = evaluate([img], model, 0.25, seeds=[0, 1, 2])
    b = evaluate([img], model, 0.25, seeds=[0, 1, 2])
    assert a.psnr == b.psnr and a.ssim == b.ssim


def test_noise_zero_equals_plain_eval():
    img = synthetic_image(16, 16, 1)
    model = MosaicModel(TOY, seed=5)
    a = evaluate([img], model, 0.25, seeds=[0, 1])
    b = evaluate([img], model, 0.25, seeds=[0, 1], noise_sigma=0.0, noise_domain="measurement")
    assert a.psnr == b.psnr


def test_measurement_noise_domain_changes_result():
    img = synthetic_image(16, 16, 1)
    b = MosaicModel(TOY).basis
    clean = evaluate([img], None, 1.0, seeds=[0], method="inverse", basis=b)
    noisy = evaluate([img], None, 1.0, seeds=[0], method="inverse", basis=b, noise_sigma=0.05, noise_domain="measurement")
    assert noisy.mean_psnr < clean.mean_psnr


def test_evaluate_errors():
    model = MosaicModel(TOY)
    with pytest.raises(ValueError):
        evaluate([], model)
    with pytest.raises(ValueError):
        evaluate([synthetic_image(16, 16, 0)], model, seeds=[])
    with pytest.raises(ValueError):
        evaluate([synthetic_image(16, 16, 0)], None, method="inverse")
    with pytest.raises(ValueError):
        evaluate([synthetic_image(16, 16, 0)], model, method="magic")
    with pytest.raises(ValueError):
        evaluate([synthetic_image(16, 16, 0)], None, method="mosaic", basis=model.basis)


def test_report_csv(tmp_path):
    rep = evaluate([synthetic_image(16, 16, 0)], MosaicModel(TOY), 0.25, seeds=[0, 1])
    rep.write_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "seed,gamma,psnr,ssim" and len(lines) == 3


# --- checkpoints --------------------------------------------------------------------


def _probe(model):
    rng = np.random.default_rng(0)
    X = rng.random((4, 8, 8))
    flat = np.stack([draw_mask(64, 0.25, s).flat_array for s in range(4)])
    return measure(X, flat, model.basis), flat


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = MosaicModel(TOY, seed=3)
    res = train(toy_patches(4), model, TrainConfig(epochs=3, batch_size=4))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, step=3, optimizer=res.optimizer)
    ck = load_checkpoint(path, TOY)
    values, flat = _probe(model)
    assert np.array_equal(ck.model.predict(values, flat), model.predict(values, flat))
    assert ck.step == 3 and ck.optimizer.t == 3
    for k in res.optimizer.m:
        assert np.array_equal(ck.optimizer.m[k], res.optimizer.m[k])
    head = path.read_bytes().split(b"\n", 1)[0]
    assert head == b"MOSAIC-CHECKPOINT 1"


def test_checkpoint_float64(tmp_path):
    model = MosaicModel(TOY, seed=1, dtype=np.float64)
    save_checkpoint(model, tmp_path / "d.ckpt")
    ck = load_checkpoint(tmp_path / "d.ckpt")
    assert ck.model.dtype == np.float64 and ck.optimizer is None


def test_checkpoint_rejects_other_config(tmp_path):
    save_checkpoint(MosaicModel(TOY), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", ModelConfig(d=32))
    load_checkpoint(tmp_path / "m.ckpt", ModelConfig())


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(MosaicModel(TOY), path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(data[:40])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_version_and_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(MosaicModel(TOY), path)
    data = path.read_bytes()
    path.write_bytes(data.replace(b"MOSAIC-CHECKPOINT 1", b"MOSAIC-CHECKPOINT 9", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    path.write_bytes(b"PK" + data)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(MosaicModel(TOY), path)
    text = path.read_bytes()
    bad = text.replace(b"tensor placeholder <f4 16 ", b"tensor placeholder <f4 4,4 ", 1)
    assert bad != text
    path.write_bytes(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
