import json
import math
from collections import OrderedDict

import numpy as np
import pytest

from jdcodec import autodiff as ad
from jdcodec import trainer
from jdcodec.autodiff import Tensor
from jdcodec.codec import CodecConfig
from jdcodec.dataset import DataSources, make_synthetic_scene_set, score_pairs
from jdcodec.entropy import ChannelDensity, PriorSet, rate_bits_per_sample
from jdcodec.trainer import (
    AdamState,
    TrainConfig,
    TrainingAborted,
    default_schedule,
    optimizer_step,
    parse_schedule,
    rd_loss,
    rd_terms,
    train,
)

TINY = CodecConfig(hidden_channels=6, latent_channels=4)


@pytest.fixture(scope="module")
def sources(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_synthetic_scene_set(root / "pairs", 3, 64, [(0.01, 0.001)], seed=1)
    score_pairs(root / "pairs" / "manifest.jsonl", 32)
    make_synthetic_scene_set(root / "clean", 3, 64, [], seed=2, prefix="c")
    return DataSources.from_manifests(root / "pairs" / "manifest.jsonl", [root / "clean" / "manifest.jsonl"])


def tiny_config(**kw):
    kw.setdefault("lambda_schedule", [(64.0, 3), (32.0, 3)])
    kw.setdefault("crop_size", 32)
    kw.setdefault("codec", TINY)
    return TrainConfig.desk("JDC-CN", **kw)


# -------------------------------------------------------------------- schedule


def test_full_schedule():
    assert default_schedule() == [(4096, 6_000_000), (2048, 3_000_000), (1024, 3_000_000), (512, 3_000_000), (256, 3_000_000)]
    assert [lam for lam, _ in default_schedule(extended=True)] == [8192, 4096, 2048, 1024, 512, 256]
    assert [lam for lam, _ in default_schedule(extended=True, testolina=True)][:2] == [16384, 8192]


def test_scaled_schedule_keeps_proportions():
    assert default_schedule(2e-4) == [(4096, 1200), (2048, 600), (1024, 600), (512, 600), (256, 600)]
    assert all(steps >= 1 for _, steps in default_schedule(1e-9))
    with pytest.raises(ValueError):
        default_schedule(0)


def test_parse_schedule_and_validation():
    assert parse_schedule("4096:12, 2048:6") == [(4096.0, 12), (2048.0, 6)]
    with pytest.raises(ValueError):
        TrainConfig.desk("JDC-N", lambda_schedule=[(0.0, 5)])
    with pytest.raises(ValueError):
        TrainConfig.desk("JDC-N", lambda_schedule=[(10.0, 0)])


def test_config_from_kv():
    cfg = TrainConfig.from_kv({"mode": "JDC-Cn(0.7)", "scale": 0.0002, "lr": 0.001, "crop_size": 64, "hidden_channels": 8, "seed": 4})
    assert str(cfg.mode) == "JDC-Cn(0.7)" and cfg.codec.hidden_channels == 8 and cfg.seed == 4
    assert cfg.lambda_schedule[0] == (4096.0, 1200)
    assert cfg.codec_id == "JDC-Cn(0.7)"
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_kv({"mode": "JDC-N", "bogus": 1})


# ------------------------------------------------------------------------ loss


def _density(seed=0, channels=2):
    r = np.random.default_rng(seed)
    return ChannelDensity.from_arrays(r.standard_normal((channels, 3)), r.uniform(-1, 1, (channels, 3)), r.uniform(-0.5, 1, (channels, 3)))


def test_loss_targets_the_clean_image():
    rng = np.random.default_rng(0)
    clean = rng.random((2, 3, 8, 8))
    noisy = clean + 0.1 * rng.standard_normal(clean.shape)
    x_hat = Tensor(clean.copy(), requires_grad=True)
    latent = Tensor(rng.uniform(-2, 2, (2, 2, 1, 1)))
    d = _density()
    with ad.Tape() as tape:
        loss = rd_loss(x_hat, Tensor(clean), latent, d, 100.0)
    ad.backward(loss, tape)
    # a perfect reconstruction of the clean target has zero distortion gradient
    assert np.abs(x_hat.grad).max() == 0.0
    rate, dist = rd_terms(x_hat, Tensor(noisy), latent, d)
    assert float(dist.data) == pytest.approx(np.mean((clean - noisy) ** 2))
    assert float(rd_loss(x_hat, Tensor(noisy), latent, d, 100.0).data) == pytest.approx(float(rate.data) + 100 * float(dist.data))


def test_rate_is_bits_per_pixel():
    latent = Tensor(np.zeros((2, 2, 1, 1)))
    d = _density(1)
    rate, _ = rd_terms(Tensor(np.zeros((2, 3, 16, 16))), Tensor(np.zeros((2, 3, 16, 16))), latent, d)
    bits = rate_bits_per_sample(latent, d).data.sum()
    assert float(rate.data) == pytest.approx(bits / (2 * 16 * 16))


def test_multi_prior_charges_cheapest_per_image():
    rng = np.random.default_rng(3)
    a, b = _density(4), _density(5)
    latent = Tensor(np.round(rng.uniform(-3, 3, (4, 2, 2, 2))))
    img = Tensor(np.zeros((4, 3, 32, 32)))
    rate, _ = rd_terms(img, img, latent, PriorSet([a, b]))
    per = np.minimum(rate_bits_per_sample(latent, a).data, rate_bits_per_sample(latent, b).data)
    assert float(rate.data) == pytest.approx(per.sum() / (4 * 32 * 32))


def test_shape_mismatch():
    with pytest.raises(ad.ShapeMismatch):
        rd_terms(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((1, 3, 8, 4))), Tensor(np.zeros((1, 2, 1, 1))), _density())


# ------------------------------------------------------------------------ Adam


def adam_oracle(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_adam_matches_textbook_update():
    grads = [0.5, -1.0, 2.0, 0.1, -0.3]
    p = OrderedDict(w=Tensor(np.array([1.0], dtype=np.float32), requires_grad=True))
    state = AdamState()
    for g in grads:
        optimizer_step(p, {"w": np.array([g])}, state, 1e-2)
    assert state.t == 5
    assert p["w"].data.dtype == np.float32 and state.m["w"].dtype == np.float32
    assert float(p["w"].data[0]) == pytest.approx(adam_oracle(1.0, grads, 1e-2), abs=1e-6)


def test_adam_first_step_moves_by_lr():
    p = OrderedDict(w=Tensor(np.zeros(3, dtype=np.float32), requires_grad=True))
    optimizer_step(p, {"w": np.array([3.0, -0.2, 0.0])}, AdamState(), 1e-3)
    np.testing.assert_allclose(p["w"].data, [-1e-3, 1e-3, 0.0], atol=1e-9)


def test_adam_refuses_non_finite_gradients():
    p = OrderedDict(w=Tensor(np.zeros(2, dtype=np.float32), requires_grad=True))
    state = AdamState()
    with pytest.raises(TrainingAborted, match="w"):
        optimizer_step(p, {"w": np.array([1.0, np.nan])}, state, 1e-3)
    assert state.t == 0 and np.all(p["w"].data == 0)


# ------------------------------------------------------------------------ loop


def test_run_writes_logs_and_checkpoints(sources, tmp_path):
    res = train(tiny_config(), sources, tmp_path)
    assert [p.name for p in res.checkpoints] == ["model_lambda64.jdcm", "model_lambda32.jdcm"]
    rows = res.log_path.read_text().splitlines()
    assert rows[0] == "step,lambda,bpp,mse,loss" and len(rows) == 7
    step, lam, bpp, mse, loss = rows[-1].split(",")
    assert (step, lam) == ("6", "32")
    assert float(loss) == pytest.approx(float(bpp) + 32 * float(mse), rel=1e-6)
    prov = [json.loads(ln) for ln in (tmp_path / "provenance.jsonl").read_text().splitlines()]
    assert len(prov) == 6
    assert all(sorted(p["tag"] for p in rec["batch"]) == ["clean-paired"] + ["noisy-paired"] * 4 for rec in prov)
    assert all(p["target"] != p["input"] for rec in prov for p in rec["batch"] if p["tag"] == "noisy-paired")


def test_training_is_deterministic(sources, tmp_path):
    train(tiny_config(seed=5), sources, tmp_path / "a")
    train(tiny_config(seed=5), sources, tmp_path / "b")
    for name in ("train_log.csv", "provenance.jsonl", "model_lambda64.jdcm", "model_lambda32.jdcm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    train(tiny_config(seed=6), sources, tmp_path / "c")
    assert (tmp_path / "a" / "model_lambda32.jdcm").read_bytes() != (tmp_path / "c" / "model_lambda32.jdcm").read_bytes()


class _Crash(Exception):
    pass


def test_resume_reproduces_uninterrupted_run(sources, tmp_path):
    cfg = tiny_config(checkpoint_every=2, seed=1)
    train(cfg, sources, tmp_path / "full")

    def crash(model, lam, si):
        raise _Crash

    with pytest.raises(_Crash):
        train(cfg, sources, tmp_path / "cut", on_stage_end=crash)
    # state.jdcm holds step 2; the log already has row 3, which must be discarded
    assert len((tmp_path / "cut" / "train_log.csv").read_text().splitlines()) == 4
    train(cfg, sources, tmp_path / "cut", resume_from=tmp_path / "cut" / "state.jdcm")
    for name in ("train_log.csv", "provenance.jsonl", "model_lambda32.jdcm"):
        assert (tmp_path / "cut" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()


def test_non_finite_values_abort_with_dump(sources, tmp_path, monkeypatch):
    real = trainer.decode_synthesis
    monkeypatch.setattr(trainer, "decode_synthesis", lambda z, m: ad.scale(real(z, m), math.inf))
    with pytest.raises(TrainingAborted, match="nonfinite_dump.json"):
        train(tiny_config(), sources, tmp_path)
    dump = json.loads((tmp_path / "nonfinite_dump.json").read_text())
    assert dump["step"] == 0 and len(dump["provenance"]) == 5


def test_loss_decreases(sources, tmp_path):
    cfg = tiny_config(lambda_schedule=[(256.0, 60)], lr=3e-3, seed=2)
    train(cfg, sources, tmp_path)
    loss = np.loadtxt(tmp_path / "train_log.csv", delimiter=",", skiprows=1)[:, 4]
    assert loss[-10:].mean() < 0.7 * loss[:10].mean()
