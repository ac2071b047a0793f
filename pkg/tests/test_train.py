import math

import numpy as np
import pytest

from plainpose.config import EncoderConfig, preset
from plainpose.core.params import ParamStore
from plainpose.core.tensor import NonFiniteError, Tensor
from plainpose.encoder import init_encoder_params
from plainpose.model import ViTPose
from plainpose.schemas import Schema
from plainpose.train import (
    AdamState,
    EmptyDatasetError,
    MultiDatasetSampler,
    SynthParams,
    SyntheticDataset,
    TrainConfig,
    TrainingDivergedError,
    UnlabeledParamError,
    adamw_step,
    apply_freeze,
    init_mim_params,
    layer_lr,
    load_training_checkpoint,
    mim_pretrain_step,
    param_layer,
    read_metric_log,
    step_schedule,
    synth_sample,
    train_loop,
)
from plainpose.train.loop import train_step
from plainpose.train.optim import AdamW
from plainpose.train.synth import sample_joints

# -- optimizer --------------------------------------------------------------


def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    before = p["w"].copy()
    adamw_step(p, {"w": np.zeros(3)}, AdamState(), 0.1, wd=0.0)
    np.testing.assert_array_equal(p["w"], before)


def test_adamw_first_step_closed_form():
    for g in (0.3, -2.5, 1e-3):
        p = {"w": np.array([1.0])}
        adamw_step(p, {"w": np.array([g])}, AdamState(), 0.1, wd=0.0)
        assert p["w"][0] == pytest.approx(1.0 - 0.1 * g / (abs(g) + 1e-8), abs=1e-15)


def test_adamw_pure_decay():
    p = {"w": np.array([2.0, -4.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), 0.01, wd=0.1)
    np.testing.assert_allclose(p["w"], np.array([2.0, -4.0]) * (1 - 0.01 * 0.1), rtol=0, atol=1e-15)


def test_adamw_non_finite_aborts_untouched():
    p = {"a": np.ones(2), "b": np.ones(2)}
    state = AdamState()
    with pytest.raises(NonFiniteError):
        adamw_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state, 0.1)
    np.testing.assert_array_equal(p["a"], 1.0)
    assert state.step == 0 and not state.m


def test_layer_lr():
    assert all(layer_lr(5e-4, 1.0, l, 12) == 5e-4 for l in range(14))
    assert layer_lr(5e-4, 0.75, 0, 12) == pytest.approx(5e-4 * 0.75**13, rel=1e-15)
    assert layer_lr(5e-4, 0.75, 13, 12) == 5e-4
    lrs = [layer_lr(1.0, 0.8, l, 6) for l in range(8)]
    assert lrs == sorted(lrs)


def test_step_schedule():
    assert step_schedule(10, [170, 200]) == 1.0
    assert step_schedule(205, [170, 200]) == pytest.approx(0.01)
    assert step_schedule(3, [2, 4]) == pytest.approx(0.1)


def test_param_layer_convention():
    assert param_layer("patch_embed.weight", 12) == 0
    assert param_layer("pos_embed", 12) == 0
    assert param_layer("blocks.0.attn.qkv.weight", 12) == 1
    assert param_layer("blocks.11.mlp.fc2.bias", 12) == 12
    assert param_layer("norm.weight", 12) == 13
    assert param_layer("heads.coco.final.weight", 12) == 13
    with pytest.raises(ValueError):
        param_layer("mystery", 12)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, decay_epochs=[5, 5])
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, decay_epochs=[12])
    with pytest.raises(ValueError):
        TrainConfig(layer_decay=0.0)
    with pytest.raises(ValueError):
        TrainConfig(freeze="norm")
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


# -- freezing ---------------------------------------------------------------


def test_freeze_modes_closed_form():
    c = 16
    cfg = EncoderConfig(depth=3, embed_dim=c, num_heads=2, input_hw=(32, 32))
    counts = {}
    for mode in ("none", "mhsa", "ffn"):
        store = init_encoder_params(cfg, np.random.default_rng(0))
        mask = apply_freeze(store, mode)
        counts[mode] = store.num_params(trainable_only=True)
        if mode == "none":
            assert all(mask.values())
    # per layer: attention 4C^2 + 4C frozen, MLP 8C^2 + 5C frozen
    assert counts["none"] - counts["mhsa"] == 3 * (4 * c * c + 4 * c)
    assert counts["none"] - counts["ffn"] == 3 * (8 * c * c + 5 * c)
    assert counts["none"] > counts["mhsa"] > counts["ffn"] > 0


def test_freeze_rejects_unlabeled():
    store = ParamStore()
    store.add("x", np.zeros(3), "mystery")
    with pytest.raises(UnlabeledParamError):
        apply_freeze(store, "none")


def test_frozen_tensors_bitwise_stable():
    model = ViTPose(preset("toy-tiny"), seed=0)
    data = SyntheticDataset(64, (32, 32), seed=3)
    frozen = {k: t.data.copy() for k, t in model.params.items() if ".attn." in k}
    cfg = TrainConfig(base_lr=1e-2, epochs=1, decay_epochs=[], batch_size=2, steps_per_epoch=100, freeze="mhsa", log_every=0)
    train_loop(model, {"coco": data}, cfg)
    for k, v in frozen.items():
        assert np.array_equal(model.params[k].data, v), k
    assert not np.array_equal(model.params["blocks.0.mlp.fc1.weight"].data, ViTPose(preset("toy-tiny"), seed=0).params["blocks.0.mlp.fc1.weight"].data)


# -- masked image modelling ---------------------------------------------------


def _mim_setup(seed=0):
    cfg = EncoderConfig(depth=1, embed_dim=16, num_heads=2, input_hw=(32, 32))
    store = init_encoder_params(cfg, np.random.default_rng(seed), dtype=np.float64)
    init_mim_params(store, cfg, np.random.default_rng(seed + 1), dtype=np.float64)
    return cfg, store


def test_mim_mask_counts():
    cfg, store = _mim_setup()
    imgs = np.random.default_rng(0).random((4, 32, 32, 3))
    loss, mask = mim_pretrain_step(imgs, cfg, store, np.random.default_rng(1), 0.75)
    assert (mask.sum(axis=1) == math.ceil(0.75 * 4)).all()
    assert len({m.tobytes() for m in mask}) > 1
    assert float(loss.data) > 0


def test_mim_no_mask_zero_loss():
    cfg, store = _mim_setup()
    loss, mask = mim_pretrain_step(np.ones((2, 32, 32, 3)), cfg, store, np.random.default_rng(0), 0.0)
    assert not mask.any() and float(loss.data) == 0.0


def test_mim_gradient_audit():
    cfg, store = _mim_setup()
    store.add("heads.coco.final.weight", np.zeros((1, 1, 16, 17)), "head")
    loss, _ = mim_pretrain_step(np.random.default_rng(0).random((2, 32, 32, 3)), cfg, store, np.random.default_rng(1))
    loss.backward()
    touched = {k for k, t in store.items() if t.grad is not None and np.any(t.grad)}
    assert "mask_token" in touched and "mim_head.weight" in touched and "patch_embed.weight" in touched
    assert not any(k.startswith("heads.") for k in touched)


def test_mim_constant_image_converges():
    cfg, store = _mim_setup()
    img = np.full((2, 32, 32, 3), 0.6)
    state = AdamState()
    first = None
    for step in range(150):
        store.zero_grad()
        loss, _ = mim_pretrain_step(img, cfg, store, np.random.default_rng(step))
        loss.backward()
        first = first if first is not None else float(loss.data)
        grads = {k: t.grad for k, t in store.trainable() if t.grad is not None}
        adamw_step(dict(store.trainable()), grads, state, 1e-2, wd=0.0)
    assert float(loss.data) < 1e-3 < first


# -- synthetic data -----------------------------------------------------------


def test_synth_deterministic():
    a = synth_sample(5, (64, 48), seed=9)
    b = synth_sample(5, (64, 48), seed=9)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.kps.points, b.kps.points)
    assert not np.array_equal(a.image, synth_sample(6, (64, 48), seed=9).image)


def test_synth_blob_centred_on_annotation():
    one = Schema("one", 1, ("joint",))
    p = SynthParams(noise_std=0.0, clutter_rects=0, limb_alpha=0.0)
    for i in range(10):
        s = synth_sample(i, (64, 48), one, seed=1, params=p)
        img = s.image.astype(np.float64)
        # colour (0, 0, 1) on a grey background: blue minus red is the blob alpha
        alpha = img[..., 2] - img[..., 0]
        yy, xx = np.mgrid[0:64, 0:48]
        cx, cy = (alpha * xx).sum() / alpha.sum(), (alpha * yy).sum() / alpha.sum()
        assert abs(cx - s.kps.points[0, 0]) < 2e-3 and abs(cy - s.kps.points[0, 1]) < 2e-3


def test_synth_marginals_uniform():
    # chi-square critical value, 9 degrees of freedom, p = 0.01
    crit = 21.666
    hw, margin = (64, 48), SynthParams().margin
    pts = np.array([sample_joints(np.random.default_rng([0, i]), hw, 17, margin)[3] for i in range(10000)])
    x0, y0 = margin * hw[1], margin * hw[0]
    for vals, lo, span in ((pts[:, 0], x0, (1 - 2 * margin) * hw[1]), (pts[:, 1], y0, (1 - 2 * margin) * hw[0])):
        counts = np.histogram(vals, bins=10, range=(lo, lo + span))[0]
        assert counts.sum() == 10000
        assert ((counts - 1000.0) ** 2 / 1000.0).sum() < crit


# -- sampler ----------------------------------------------------------------


def test_sampler_single_dataset_is_shuffle():
    s = MultiDatasetSampler({"coco": 10}, batch_size=5, seed=0)
    epoch = s.batch(0).items + s.batch(1).items
    assert sorted(i for _, i in epoch) == list(range(10))
    assert [i for _, i in epoch] != list(range(10))


def test_sampler_frequency():
    s = MultiDatasetSampler({"coco": 150_000, "aic": 350_000}, batch_size=100, seed=1)
    draws = [d for step in range(100) for d, _ in s.batch(step).items]
    n_coco = draws.count("coco")
    sd = math.sqrt(10_000 * 0.3 * 0.7)
    assert abs(n_coco - 3000) < 4 * sd
    assert set(draws) == {"coco", "aic"}


def test_sampler_errors():
    with pytest.raises(EmptyDatasetError):
        MultiDatasetSampler({}, 4)
    with pytest.raises(EmptyDatasetError):
        MultiDatasetSampler({"coco": 0}, 4)


# -- training loop ----------------------------------------------------------


def _tiny_run(tmp_path, steps, name, start=None, **kw):
    cfg = TrainConfig(
        base_lr=1e-3, layer_decay=0.8, epochs=4, decay_epochs=[2, 3], batch_size=4, steps_per_epoch=3, seed=7, **kw
    )
    data = {"coco": SyntheticDataset(40, (32, 32), seed=11)}
    if start is None:
        model, state, step = ViTPose(preset("toy-tiny"), seed=2), None, 0
    else:
        model, state, step = load_training_checkpoint(start)
    out = tmp_path / f"{name}.ckpt"
    train_loop(model, data, cfg, steps=steps, out=out, log=tmp_path / f"{name}.jsonl", state=state, start_step=step)
    return model, out, cfg


def test_lr_log_matches_schedule(tmp_path):
    _, _, cfg = _tiny_run(tmp_path, 12, "a")
    steps = [r for r in read_metric_log(tmp_path / "a.jsonl") if r["event"] == "step"]
    assert len(steps) == 12
    for r in steps:
        mult = step_schedule(r["step"] // cfg.steps_per_epoch, cfg.decay_epochs)
        assert r["lr"] == [layer_lr(cfg.base_lr, cfg.layer_decay, l, 2) * mult for l in range(4)]
    epochs = [r for r in read_metric_log(tmp_path / "a.jsonl") if r["event"] == "epoch"]
    assert [r["epoch"] for r in epochs] == [0, 1, 2, 3]


def test_deterministic_and_resume_bitwise(tmp_path):
    full, _, _ = _tiny_run(tmp_path, 12, "full")
    again, _, _ = _tiny_run(tmp_path, 12, "again")
    _, mid, _ = _tiny_run(tmp_path, 2, "mid")
    resumed, _, _ = _tiny_run(tmp_path, 12, "resumed", start=mid)
    for k, t in full.params.items():
        assert np.array_equal(t.data, again.params[k].data), k
        assert np.array_equal(t.data, resumed.params[k].data), k


def test_nan_halts_with_diagnostic(tmp_path):
    model = ViTPose(preset("toy-tiny"), seed=0)
    model.params["blocks.0.mlp.fc1.weight"].data[0, 0] = np.inf
    cfg = TrainConfig(epochs=1, decay_epochs=[], batch_size=2, steps_per_epoch=5)
    with pytest.raises(TrainingDivergedError, match="step 0"):
        train_loop(model, {"coco": SyntheticDataset(8, (32, 32))}, cfg, log=tmp_path / "log.jsonl")
    last = read_metric_log(tmp_path / "log.jsonl")[-1]
    assert last["event"] == "diverged" and last["step"] == 0


def test_multi_dataset_step_routes_heads():
    cfg = preset("toy-tiny", heads={"coco": 17, "mpii": 16})
    model = ViTPose(cfg, seed=0)
    data = {"coco": SyntheticDataset(8, (32, 32), "coco"), "mpii": SyntheticDataset(8, (32, 32), "mpii")}
    from plainpose.train.sampler import Batch

    for only, other in (("coco", "mpii"), ("mpii", "coco")):
        model.params.zero_grad()
        train_step(model, data, Batch(0, ((only, 0), (only, 1))), np.random.default_rng(0))
        assert np.any(model.params["blocks.0.attn.qkv.weight"].grad)
        assert np.any(model.params[f"heads.{only}.final.weight"].grad)
        assert model.params[f"heads.{other}.final.weight"].grad is None

    before = {k: t.data.copy() for k, t in model.params.items()}
    tc = TrainConfig(base_lr=1e-3, epochs=1, decay_epochs=[], batch_size=2, steps_per_epoch=1)
    opt = AdamW(model.params, tc, cfg.encoder.depth)
    model.params.zero_grad()
    train_step(model, data, Batch(0, (("coco", 0), ("coco", 1))), np.random.default_rng(0))
    opt.step(0)
    assert all(np.array_equal(model.params[k].data, v) for k, v in before.items() if k.startswith("heads.mpii."))
    assert not np.array_equal(model.params["blocks.0.attn.qkv.weight"].data, before["blocks.0.attn.qkv.weight"])
