import dataclasses
import math
import zlib

import numpy as np
import pytest

from clops.checkpoint import (CheckpointError, CheckpointVersionError, CRCMismatchError, OptimizerState,
                              decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint)
from clops.config import ConfigError, ModelConfig, TrainConfig
from clops.features import make_windows
from clops.models import build_model
from clops.synthetic import gen_synthetic
from clops.tensor import Tensor
from clops.training import (TrainingAborted, adamw_step, clip_gradients, finetune, lr_at, pretrain, train_scratch,
                            zero_shot)

MC = ModelConfig.preset("tiny", L=24, H=6, lags=(1, 2, 12), layers=1, d_model=32, d_ff=64, n_heads=2, d_kv=16)


def tc(**kw):
    base = dict(iterations=40, batch_size=8, warmup_steps=4, eval_every=20, max_val_series=8)
    return TrainConfig.desk(**{**base, **kw})


@pytest.fixture(scope="module")
def series():
    return gen_synthetic(12, 300, seed=0)


def forecasts(model, series):
    b = make_windows(series, np.arange(3), np.array([100, 150, 200]), MC.L, MC.H, MC.lags)
    return model.forecast(b).params


# -- schedule -------------------------------------------------------------------

def test_lr_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.0
    assert lr_at(10_000, cfg) == pytest.approx(1e-3)
    assert lr_at(cfg.iterations, cfg) <= 1e-9
    assert lr_at(cfg.iterations + 5, cfg) == 0.0


def test_lr_continuous_at_junction():
    cfg = TrainConfig(iterations=1000, warmup_steps=100)
    left = lr_at(100, cfg)
    right = cfg.peak_lr * 0.5 * (1 + math.cos(0.0))
    assert left == right == cfg.peak_lr
    assert abs(lr_at(101, cfg) - cfg.peak_lr) < 1e-7
    steps = [lr_at(s, cfg) for s in range(1, 1001)]
    assert max(np.abs(np.diff(steps))) < 2 * cfg.peak_lr / 100


# -- optimizer ----------------------------------------------------------------------

def test_adamw_pure_decay():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, OptimizerState(), lr=1e-3, wd=0.1)
    np.testing.assert_allclose(p["w"], [0.9999, -1.9998], rtol=1e-12)


def test_adamw_moves_against_gradient():
    p = {"w": np.array([0.0, 0.0])}
    state = OptimizerState()
    for _ in range(50):
        adamw_step(p, {"w": np.array([3.0, -0.5])}, state, lr=1e-2, wd=0.0)
    assert p["w"][0] < 0 < p["w"][1]


def test_adamw_masked_bias_unchanged():
    p = {"b": np.array([0.5, 1.5])}
    adamw_step(p, {"b": np.zeros(2)}, OptimizerState(), lr=1e-3, wd=0.1, decay={"b": False})
    np.testing.assert_array_equal(p["b"], [0.5, 1.5])


def test_adamw_skips_non_finite():
    p = {"w": np.array([1.0])}
    state = OptimizerState()
    assert not adamw_step(p, {"w": np.array([np.nan])}, state, lr=1.0, wd=0.1)
    assert p["w"][0] == 1.0 and state.skipped == 1 and state.step == 0


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(g, 1.0) == 5.0
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8], rtol=1e-9)


# -- loop -----------------------------------------------------------------------------

def test_loss_decreases(series):
    res = pretrain(series, MC, tc(iterations=200, warmup_steps=20, eval_every=100, peak_lr=3e-3))
    first, last = np.mean(res.losses[:50]), np.mean(res.losses[-50:])
    assert last < first


def test_same_seed_same_bytes(series, tmp_path):
    a = pretrain(series, MC, tc(), out_dir=tmp_path / "a")
    b = pretrain(series, MC, tc(), out_dir=tmp_path / "b")
    assert a.losses == b.losses
    assert (tmp_path / "a/final.clops").read_bytes() == (tmp_path / "b/final.clops").read_bytes()
    log = (tmp_path / "a/train.jsonl").read_text().splitlines()
    assert len(log) == 40 and '"grad_norm"' in log[0] and '"wallclock"' in log[0]


def test_resume_matches_uninterrupted(series, tmp_path):
    full = pretrain(series, MC, tc(), out_dir=tmp_path / "full")
    part = pretrain(series, MC, tc(), out_dir=tmp_path / "part", stop_at=20)
    assert part.losses == full.losses[:20]
    rest = pretrain(series, MC, tc(), out_dir=tmp_path / "part", resume_from=tmp_path / "part/ckpt_0000020.clops")
    assert rest.losses == full.losses[20:]
    assert (tmp_path / "part/final.clops").read_bytes() == (tmp_path / "full/final.clops").read_bytes()


def test_resume_needs_matching_config(series, tmp_path):
    pretrain(series, MC, tc(), out_dir=tmp_path, stop_at=20)
    other = dataclasses.replace(MC, d_ff=32)
    with pytest.raises(ConfigError):
        pretrain(series, other, tc(), resume_from=tmp_path / "ckpt_0000020.clops")


def test_nan_streak_aborts(series, monkeypatch):
    model, _ = build_model(MC)
    monkeypatch.setattr(type(model), "loss", lambda self, b: Tensor(np.nan))
    with pytest.raises(TrainingAborted):
        pretrain(series, MC, tc(), model=model)


# -- adaptation ---------------------------------------------------------------------------

def test_zero_shot_leaves_model(series):
    model, _ = build_model(MC)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    assert zero_shot(model, series) is model
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())
    with pytest.raises(ConfigError):
        zero_shot(model, gen_synthetic(2, 300, d_y=2))


def test_finetune_single_lr(series):
    model, _ = build_model(MC)
    res = finetune(model, series, tc(iterations=10), lr_grid=(1e-4,))
    assert res.best_lr == 1e-4 and not res.fallback and res.model is not model


def test_finetune_fallback(series, monkeypatch):
    import clops.training as tr
    model, _ = build_model(MC)

    def boom(*a, **k):
        raise TrainingAborted(1, [float("nan")])
    monkeypatch.setattr(tr, "_train_loop", boom)
    res = finetune(model, series, tc(iterations=10), lr_grid=(1e-3, 1e-4))
    assert res.fallback and res.model is model and res.best_lr is None


def test_scratch_trains_fresh(series):
    res = train_scratch(series, MC, tc(iterations=10))
    assert len(res.losses) == 10


# -- checkpoints ----------------------------------------------------------------------------

def test_checkpoint_round_trip(series, tmp_path):
    model, _ = build_model(MC, seed=3)
    path = save_checkpoint(model, tmp_path / "m.clops", meta={"note": "x"})
    ck = load_checkpoint(path)
    assert ck.inference_only and ck.meta == {"note": "x"} and ck.config == MC
    a, b = forecasts(model, series), forecasts(ck.model, series)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not (tmp_path / "m.clops.tmp").exists()


def test_checkpoint_corruption_and_version(tmp_path):
    model, _ = build_model(MC)
    raw = bytearray(encode_checkpoint(model, OptimizerState()))
    raw[len(raw) // 2] ^= 0xFF
    with pytest.raises(CRCMismatchError):
        decode_checkpoint(bytes(raw))
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"nonsense" * 4)
    good = bytearray(encode_checkpoint(model))
    good[6] = 9
    body = bytes(good[:-4])
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(body + (zlib.crc32(body) & 0xFFFFFFFF).to_bytes(4, "little"))


def test_checkpoint_layout(tmp_path):
    model, _ = build_model(MC)
    header, records = decode_checkpoint(encode_checkpoint(model))
    assert header["model"]["d_model"] == 32 and header["optimizer"] is None
    assert list(records) == [n for n, _ in model.named_parameters()]
