"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (visible with or
without ``-s``). Criteria 8 and 9 train small models and take several
minutes each on one core.

    pytest tests/test_acceptance.py -v
"""

import math
import time

import numpy as np
import pytest

from oracles import brute_ap_ar
from plainpose.codec import KeypointSet, decode_heatmaps, encode_targets
from plainpose.config import preset
from plainpose.core import (
    RunningStats,
    Tensor,
    activation,
    affine_channel,
    batch_norm,
    bilinear_resize,
    concat,
    conv2d,
    finite_difference_check,
    layer_norm,
    linear,
    matmul,
    mse,
    pad,
    roll,
    softmax,
    square,
    transposed_conv2d,
    weighted_mse,
    where_const,
)
from plainpose.core.tensor import reciprocal
from plainpose.cost import ATTENTION_STUDY, cost_report, training_flops
from plainpose.distill import (
    init_token,
    learn_token,
    output_distill_loss,
    paired_seed_experiment,
    student_losses,
    teacher_heatmaps,
)
from plainpose.encoder import TokenMap, transformer_block
from plainpose.evaluation import AREA_RANGES, OKS_THRESHOLDS, Annotation, ap_ar, oks
from plainpose.model import ViTPose
from plainpose.schemas import load_schema
from plainpose.train import SyntheticDataset, TrainConfig, apply_freeze, freeze_all, train_loop
from plainpose.train.loop import collate, evaluate_pck, heatmap_geometry
from test_encoder import _attn_out, _perturbed_pair, f64_params, randomize_biases, small_cfg
from test_evaluation import _random_case

SIG = np.asarray(load_schema("coco").sigmas)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, seconds):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f} s)")

    return emit


# 1 -------------------------------------------------------------------------


def test_criterion_1_param_goldens(report):
    t0 = time.perf_counter()
    got = {name: cost_report(preset(name)).params_backbone for name in ("vitpose-b", "vitpose-l", "vitpose-h")}
    golden = {"vitpose-b": 86e6, "vitpose-l": 307e6, "vitpose-h": 632e6}
    rel = {k: got[k] / golden[k] - 1 for k in got}
    dt = time.perf_counter() - t0
    ok = all(abs(r) <= 0.02 for r in rel.values()) and dt < 1.0
    report(1, ok, " ".join(f"{k}={got[k] / 1e6:.2f}M({rel[k]:+.2%})" for k in got), dt)
    assert ok


# 2 -------------------------------------------------------------------------


def test_criterion_2_flop_goldens(report):
    t0 = time.perf_counter()
    b = cost_report(preset("vitpose-b")).flops_encoder
    full = cost_report(preset("vitpose-b", patch_stride=8)).flops_encoder
    win = cost_report(preset("vitpose-b", patch_stride=8, attention="window", window=[8, 8])).flops_encoder
    ratio = (full / win) / (76.59 / 66.31)
    dt = time.perf_counter() - t0
    ok = abs(b / 17.1e9 - 1) <= 0.05 and abs(ratio - 1) <= 0.10 and dt < 1.0
    report(2, ok, f"vit-b {b / 1e9:.2f}G; 1/8 full/window {full / 1e9:.2f}/{win / 1e9:.2f}G (ratio x{ratio:.3f})", dt)
    assert ok


# 3 -------------------------------------------------------------------------

# reference (GFLOPs, training memory) for the six attention configurations
STUDY_REFERENCE = {
    "full": (76.59, 36141),
    "window": (66.31, 21161),
    "window+shift": (66.31, 21161),
    "window+pool": (66.39, 22893),
    "window+shift+pool": (66.39, 22893),
    "full+window": (69.94, 28594),
}


def _ranks(values):
    return [sorted(set(values)).index(v) for v in values]


def test_criterion_3_cost_ordering(report):
    t0 = time.perf_counter()
    rows = {}
    for label, mode, win in ATTENTION_STUDY:
        if label in STUDY_REFERENCE:
            r = cost_report(preset("vitpose-b", patch_stride=8, attention=mode, window=list(win)), batch=64)
            rows[label] = (r.flops_encoder, r.activation_bytes)
    labels = list(STUDY_REFERENCE)
    ok = all(
        _ranks([rows[k][col] for k in labels]) == _ranks([STUDY_REFERENCE[k][col] for k in labels]) for col in (0, 1)
    )
    dt = time.perf_counter() - t0
    ok = ok and dt < 1.0
    report(3, ok, "flops/memory ranks " + str(_ranks([rows[k][0] for k in labels])) + str(_ranks([rows[k][1] for k in labels])), dt)
    assert ok


# 4 -------------------------------------------------------------------------


def _rand(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:  # keep relu probes off the kink
        x = np.where(x >= 0, x + 0.1, x - 0.1)
    return Tensor(x, requires_grad=True)


def _proj(out, rng):
    return (out * Tensor(rng.standard_normal(out.shape))).sum()


def _primitive_cases(seed):
    """(name, scalar fn, inputs) for every differentiable primitive."""
    r = np.random.default_rng(seed)
    w_seed = int(r.integers(1 << 30))
    P = lambda out: _proj(out, np.random.default_rng(w_seed))
    a, b = _rand(r, 3, 4), _rand(r, 4, 5)
    x3, w3, b3 = _rand(r, 2, 3, 4), _rand(r, 4, 3), _rand(r, 3)
    g4, be4 = _rand(r, 4), _rand(r, 4)
    img, k, kb = _rand(r, 1, 5, 4, 2), _rand(r, 3, 3, 2, 3), _rand(r, 3)
    tin, tk, tb = _rand(r, 1, 2, 3, 2), _rand(r, 4, 4, 2, 3), _rand(r, 3)
    bn_x, bn_g, bn_b = _rand(r, 3, 2, 2, 4), _rand(r, 4), _rand(r, 4)
    stats = RunningStats(r.standard_normal(4), r.uniform(0.5, 2.0, 4))
    relu_in = _rand(r, 3, 4, away_from_zero=True)
    pos = Tensor(r.uniform(0.5, 2.0, (3, 4)) * r.choice([-1, 1], (3, 4)), requires_grad=True)
    target, weight = r.standard_normal((2, 3, 4)), r.uniform(0, 1, (4,))
    mask = r.random((3, 4)) < 0.3
    u, v = _rand(r, 2, 3), _rand(r, 2, 2)
    cfg = small_cfg(attention="window_shift_pool", window_hw=(1, 2))
    params = f64_params(cfg, seed)
    randomize_biases(params, seed + 1)
    toks = _rand(r, 1, 4, 8)
    names = ["blocks.0.attn.qkv.weight", "blocks.0.attn.proj.weight", "blocks.0.mlp.fc1.weight", "blocks.0.norm1.weight"]
    return [
        ("matmul", lambda: P(matmul(a, b)), [a, b]),
        ("linear", lambda: P(linear(x3, w3, b3)), [x3, w3, b3]),
        ("softmax", lambda: P(softmax(x3)), [x3]),
        ("layer_norm", lambda: P(layer_norm(x3, g4, be4)), [x3, g4, be4]),
        ("gelu", lambda: P(activation(a, "gelu")), [a]),
        ("relu", lambda: P(activation(relu_in, "relu")), [relu_in]),
        ("conv2d", lambda: P(conv2d(img, k, kb, 2, 1)), [img, k, kb]),
        ("transposed_conv2d", lambda: P(transposed_conv2d(tin, tk, tb)), [tin, tk, tb]),
        ("bilinear_resize", lambda: P(bilinear_resize(img, 2)), [img]),
        ("batch_norm_train", lambda: P(batch_norm(bn_x, bn_g, bn_b, RunningStats.fresh(4), mode="train")), [bn_x, bn_g, bn_b]),
        ("batch_norm_eval", lambda: P(batch_norm(bn_x, bn_g, bn_b, stats, mode="eval")), [bn_x, bn_g, bn_b]),
        ("affine_channel", lambda: P(affine_channel(bn_x, bn_g, bn_b)), [bn_x, bn_g, bn_b]),
        ("mse", lambda: mse(x3, Tensor(target)), [x3]),
        ("weighted_mse", lambda: weighted_mse(x3, target, weight), [x3]),
        ("elementwise", lambda: P(a * b[:, :3].transpose(1, 0) - a / pos + square(a) + reciprocal(pos)), [a, b, pos]),
        ("reductions", lambda: P(x3.sum(axis=1) + x3.mean(axis=1) * 2.0), [x3]),
        ("reshape_getitem", lambda: P(x3.reshape(6, 4)[[0, 2, 2, 5]]), [x3]),
        ("concat_pad_roll", lambda: P(roll(pad(concat([u, v], axis=1), [(1, 0), (0, 2)]), 2, 1)), [u, v]),
        ("where_const", lambda: P(where_const(mask, a, 3.0)), [a]),
        ("attention_block", lambda: P(transformer_block(TokenMap(toks, (2, 2)), params, cfg, 0).tokens), [toks] + [params[n] for n in names]),
    ]


PIPE_CFG = dict(embed_dim=8, num_heads=2, input=[8, 8], patch_size=4, patch_stride=4, deconv_channels=4, heads={"toy": 2})


def _pipeline_error(seed):
    model = ViTPose(preset("toy-tiny", **PIPE_CFG), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if "bias" in name or "norm" in name or "bn" in name:
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    x = Tensor(rng.standard_normal((2, 8, 8, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 8, 8, 2)))
    # a 1e-5 step keeps central differences off the head's relu kinks
    return finite_difference_check(lambda: (model(x) * w).sum(), [x] + [p for _, p in model.params.params()], eps=1e-5)


def test_criterion_4_gradient_suite(report):
    t0 = time.perf_counter()
    worst, failures = {}, []
    for seed in range(20):
        for name, f, inputs in _primitive_cases(seed):
            err = finite_difference_check(f, inputs)
            worst[name] = max(worst.get(name, 0.0), err)
            if not err < 1e-4:
                failures.append((name, seed, err))
        err = _pipeline_error(seed)
        worst["pipeline"] = max(worst.get("pipeline", 0.0), err)
        if not err < 1e-4:
            failures.append(("pipeline", seed, err))
    dt = time.perf_counter() - t0
    ok = not failures and dt < 300
    report(4, ok, f"{len(worst)} checks x 20 seeds, worst rel-err {max(worst.values()):.2e}; failures {failures[:3]}", dt)
    assert ok


# 5 -------------------------------------------------------------------------


def test_criterion_5_attention_equivalences(report):
    t0 = time.perf_counter()
    diffs = []
    x = np.random.default_rng(4).standard_normal((2, 12, 8))
    for mode in ("window", "window_shift"):
        for window in ((4, 3), (6, 5)):
            diffs.append(np.abs(_attn_out("full", (4, 3), window, x) - _attn_out(mode, (4, 3), window, x)).max())
    a, b = _perturbed_pair("window", (9, 2))
    local = np.array_equal(a[:8, :8], b[:8, :8]) and np.abs(a[8:16, :8] - b[8:16, :8]).max() > 1e-6
    broken = {m: np.abs(np.subtract(*_perturbed_pair(m, (9, 2)))[:8, :8]).max() > 1e-9 for m in ("window_shift", "window_pool")}
    dt = time.perf_counter() - t0
    ok = max(diffs) < 1e-6 and local and all(broken.values()) and dt < 60
    report(5, ok, f"max |window-full| {max(diffs):.1e}; plain window local {local}; broken {broken}", dt)
    assert ok


# 6 -------------------------------------------------------------------------


def test_criterion_6_codec_roundtrip(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    pts = np.column_stack([rng.uniform(12, 180, 200), rng.uniform(12, 244, 200), np.full(200, 2.0)])
    hm, _ = encode_targets(KeypointSet(pts), (64, 48), stride=4.0, sigma=2.0)
    dec, _ = decode_heatmaps(hm, stride=4.0)
    err = np.linalg.norm(dec - pts[:, :2], axis=1)
    frac = float(np.mean(err <= 0.5))
    dt = time.perf_counter() - t0
    ok = frac >= 0.95 and dt < 10
    report(6, ok, f"{frac:.1%} within 0.5 px, max err {err.max():.2e} px", dt)
    assert ok


# 7 -------------------------------------------------------------------------


def test_criterion_7_evaluator_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        preds, gts, dts, anns = _random_case(rng)
        rep = ap_ar(dts, anns, SIG)
        ap, ar = brute_ap_ar(preds, gts, SIG, OKS_THRESHOLDS)
        ap_m, _ = brute_ap_ar(preds, gts, SIG, OKS_THRESHOLDS, AREA_RANGES["medium"])
        ap_l, _ = brute_ap_ar(preds, gts, SIG, OKS_THRESHOLDS, AREA_RANGES["large"])
        expect = {
            "AP": np.nanmean(ap) if not np.isnan(ap).all() else np.nan,
            "AP50": ap[0],
            "AP75": ap[5],
            "AR": np.nanmean(ar) if not np.isnan(ar).all() else np.nan,
            "AP_M": ap_m.mean(),
            "AP_L": ap_l.mean(),
        }
        for key, v in expect.items():
            got = getattr(rep, key)
            worst = max(worst, 0.0 if (math.isnan(got) and math.isnan(v)) else abs(got - v))
    # closed form: displacing each joint by s * k_i gives exp(-1/2)
    oks_err = 0.0
    for _ in range(50):
        kps = np.concatenate([rng.uniform(0, 100, (17, 2)), np.full((17, 1), 2.0)], axis=1)
        area = float(rng.uniform(100, 5000))
        theta = rng.uniform(0, 2 * np.pi, 17)
        d = math.sqrt(area) * 2 * SIG
        pred = kps[:, :2] + d[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        ann = Annotation(1, 1, kps, area=area)
        oks_err = max(oks_err, abs(oks(pred, ann, SIG) - math.exp(-0.5)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and oks_err < 1e-9 and dt < 30
    report(7, ok, f"100 random cases, max |AP/AR - oracle| {worst:.1e}; OKS closed form err {oks_err:.1e}", dt)
    assert ok


# 8 -------------------------------------------------------------------------

TOY_HW = (128, 96)


def _toy_config(steps=2000):
    return TrainConfig(
        base_lr=2e-3,
        weight_decay=0.05,
        layer_decay=1.0,
        epochs=20,
        decay_epochs=[16, 19],
        batch_size=32,
        steps_per_epoch=steps // 20,
        warmup_steps=50,
        log_every=0,
        seed=0,
    )


@pytest.mark.slow
def test_criterion_8_desk_scale_training(report):
    t0 = time.perf_counter()
    cfg = preset("toy-small", input=list(TOY_HW))
    train = SyntheticDataset(100000, TOY_HW, seed=1)
    test = SyntheticDataset(200, TOY_HW, seed=2)
    # same seed twice: bitwise identical weights after a short run
    short = [ViTPose(cfg, seed=0) for _ in range(2)]
    for m in short:
        train_loop(m, {"coco": train}, _toy_config(), steps=3)
    deterministic = all(np.array_equal(short[0].params[k].data, short[1].params[k].data) for k in short[0].params)
    model = ViTPose(cfg, seed=0)
    res = train_loop(model, {"coco": train}, _toy_config())
    pck = evaluate_pck(model, test)["pck"]
    dt = time.perf_counter() - t0
    ok = res.step <= 2000 and pck >= 0.95 and deterministic and dt < 900
    report(8, ok, f"held-out PCK@0.1 {pck:.4f} after {res.step} steps; deterministic {deterministic}", dt)
    assert ok


# 9 -------------------------------------------------------------------------

DIST_HW = (64, 48)


def _snapshot(model):
    return {k: t.data.tobytes() for k, t in model.params.items()}


@pytest.mark.slow
def test_criterion_9_distillation(report):
    t0 = time.perf_counter()
    tcfg = preset("toy-small", input=list(DIST_HW), patch_size=8, patch_stride=8)
    geo = heatmap_geometry(tcfg.encoder)
    data = SyntheticDataset(20000, DIST_HW, seed=5)
    teacher = ViTPose(tcfg, seed=100)
    tc = TrainConfig(base_lr=2e-3, weight_decay=0.05, epochs=1, decay_epochs=[], batch_size=32,
                     steps_per_epoch=400, warmup_steps=50, log_every=0)
    train_loop(teacher, {"coco": data}, tc)
    freeze_all(teacher.params)
    before = _snapshot(teacher)

    batches = [collate(data, range(i * 16, (i + 1) * 16), DIST_HW, geometry=geo)[:2] for i in range(300)]
    held_ds = SyntheticDataset(128, DIST_HW, seed=77)
    held = [collate(held_ds, range(i * 32, (i + 1) * 32), DIST_HW, geometry=geo)[:2] for i in range(4)]

    # loss identities
    images, k_gt = batches[0]
    k_t = teacher_heatmaps(teacher, images)
    identity = float(output_distill_loss(teacher(images), k_t).data) == 0.0
    scfg = preset("toy-small", input=list(DIST_HW), patch_size=8, patch_stride=8, depth=2, embed_dim=32,
                  num_heads=2, deconv_channels=32)
    probe = ViTPose(scfg, seed=0)
    td = student_losses(probe, images, k_gt, None, "td", rng=np.random.default_rng(0))
    tod = student_losses(probe, images, k_gt, k_gt, "tod", rng=np.random.default_rng(0))
    doubled = float(tod.data) == 2 * float(td.data)

    token = learn_token(teacher, init_token(tcfg.encoder.embed_dim, np.random.default_rng(0)), batches[:20], 100, lr=1e-2)
    # token student (token + output distillation) against a ground-truth-only student, paired by seed
    runs = paired_seed_experiment(scfg, token, batches, held, range(10), 300, lr=2e-3, mode="tod", teacher=teacher)
    bitwise = _snapshot(teacher) == before
    wins = sum(r.token_wins for r in runs)
    dt = time.perf_counter() - t0
    ok = identity and doubled and bitwise and wins >= 7 and dt < 600
    gaps = ", ".join(f"{r.baseline_loss - r.token_loss:+.1e}" for r in runs)
    report(9, ok, f"identity {identity}; tod=2td {doubled}; teacher bitwise {bitwise}; "
           f"token wins {wins}/10 (baseline - token held-out loss: {gaps})", dt)
    assert ok


# 10 ------------------------------------------------------------------------


def test_criterion_10_freeze_accounting(report):
    t0 = time.perf_counter()
    cfg = preset("vitpose-b")
    counts = {m: training_flops(cfg, m)["trainable_params"] for m in ("none", "mhsa", "ffn")}
    c, depth = cfg.encoder.embed_dim, cfg.encoder.depth
    # cross-check the closed form on a real one-block ViT-B-width store
    one = ViTPose(preset("vitpose-b", depth=1), seed=0)
    real = {}
    for m in ("none", "mhsa", "ffn"):
        mask = apply_freeze(one.params, m)
        real[m] = sum(one.params[k].data.size for k, flag in mask.items() if flag)
    per_layer_ok = (
        real["none"] - real["mhsa"] == 4 * c * c + 4 * c
        and real["none"] - real["ffn"] == 8 * c * c + 5 * c
        and counts["none"] - counts["mhsa"] == depth * (real["none"] - real["mhsa"])
        and counts["none"] - counts["ffn"] == depth * (real["none"] - real["ffn"])
    )
    order_ok = counts["none"] > counts["mhsa"] > 0 and counts["ffn"] < counts["mhsa"]
    dt = time.perf_counter() - t0
    ok = per_layer_ok and order_ok and dt < 1.0
    report(10, ok, " ".join(f"{k}={v / 1e6:.2f}M" for k, v in counts.items()) + f"; per-layer closed form {per_layer_ok}", dt)
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
