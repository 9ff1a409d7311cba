"""Top-level acceptance criteria, one recorded PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
repeated under "acceptance criteria" in the terminal summary.
"""
import math
import re
import time

import numpy as np
import pytest

from agln import cli, gradcheck
from agln.blocks import (SemanticAggregation, SemanticDistribution, semantic_aggregation, semantic_distribution)
from agln.experiments import TREND_SLACK, overfit_smoke, trend_experiment
from agln.layers import Initializer, poly_lr
from agln.metrics import cost_report, descriptor_memory_mb, multi_scale_eval, predict_logits, sab_sdm_flops
from agln.model import VARIANTS, ModelConfig, SegmentationModel, load_checkpoint, save_checkpoint
from agln.tensor import Tensor, default_dtype, grad_check, no_grad
from agln.training import RunConfig, train

from test_blocks import hull_violations
from test_tensor import _primitives

TINY = ["--encoder-widths", "4,4,8,8", "--decoder-channels", "4", "--num-classes", "3", "--num-train", "4",
        "--num-val", "2", "--image-size", "32,32", "--epochs", "1", "--batch-size", "2"]


def test_exact_formulas(criterion):
    checks = {
        "descriptor_memory_mb(256,128)": descriptor_memory_mb(256, 128) == 0.125,
        "poly_lr(0.001,0,T)": poly_lr(0.001, 0, 1000, 0.9) == 0.001,
        "poly_lr(.,T,T)": poly_lr(0.001, 1000, 1000, 0.9) == 0.0 and poly_lr(0.0005, 7, 7, 0.9) == 0.0,
    }
    bad = [k for k, ok in checks.items() if not ok]
    assert criterion("exact formulas", not bad, ", ".join(bad) or "0.125 MB, poly endpoints")


def test_gradient_suite(criterion):
    start = time.perf_counter()
    worst_prim = 0.0
    rng = np.random.default_rng(0)
    with default_dtype(np.float64):
        for name, f, shape in _primitives():
            for _ in range(5):
                rep = grad_check(f, Tensor(rng.normal(size=shape), requires_grad=True), eps=1e-5, tol=1e-6)
                worst_prim = max(worst_prim, rep.max_rel_err)
    blocks = gradcheck.summarize(gradcheck.block_checks(eps=1e-5, tol=1e-6))
    models = gradcheck.summarize(gradcheck.model_checks(VARIANTS, eps=1e-5, tol=1e-4))
    elapsed = time.perf_counter() - start
    ok = worst_prim <= 1e-6 and all(v[0] for v in blocks.values()) and all(v[0] for v in models.values())
    ok = ok and elapsed < 300
    detail = (f"primitives {worst_prim:.1e}, blocks {max(w for _, w in blocks.values()):.1e}, "
              f"models {max(w for _, w in models.values()):.1e}, {elapsed:.0f}s")
    assert criterion("gradient suite", ok, detail)


def test_hull_suite_100_seeds(criterion):
    worst = {}
    for seed in range(100):
        for key, v in hull_violations(seed, c=6, n=5, hw=(7, 6)).items():
            worst[key] = max(worst.get(key, 0.0), v)
    ok = max(worst.values()) <= 1e-6
    assert criterion("normalization / convex hull over 100 seeds", ok, f"max violation {max(worst.values()):.1e}")


def _first_logits(cfg, x, descriptor_scale=None):
    model = SegmentationModel(cfg, seed=0)
    if descriptor_scale is not None:
        # change descriptor contents only: rescale every aggregation feature projection
        for name, p in model.named_parameters():
            if name.startswith("SAB") and ".phi." in name:
                p.data *= descriptor_scale
    with no_grad():
        return model(Tensor(x)).data


def _neutral(cfg, x):
    base = _first_logits(cfg, x)
    others = [_first_logits(cfg.replace(num_descriptors=n), x) for n in (1, 7, 64)]
    others.append(_first_logits(cfg, x, descriptor_scale=-3.0))
    return all(np.array_equal(base, o) for o in others)


def test_initialization_neutrality_gate_free_configs(criterion):
    x = np.random.default_rng(3).uniform(size=(2, 3, 64, 64)).astype(np.float32)
    cfgs = [ModelConfig(variant="agln_minus"), ModelConfig(enable_sg=False),
            ModelConfig(variant="agln_dense", enable_sg=False), ModelConfig(enable_sg=False, lite=True)]
    init = Initializer(0)
    sdm = SemanticDistribution(8, 4, name="s", init=init)
    a = Tensor(np.random.default_rng(1).normal(size=(2, 8, 6, 6)).astype(np.float32))
    e = [semantic_distribution(sdm, Tensor(np.random.default_rng(k).normal(size=(2, 8, 4)).astype(np.float32)),
                               a)[1].data for k in range(3)]
    ok = all(_neutral(c, x) for c in cfgs) and all(np.array_equal(e[0], v) for v in e[1:])
    assert criterion("initialization neutrality (E block-level; SG-off and agln_minus networks)", ok,
                     "bitwise over N in {1,7,16,64} and rescaled descriptors")


@pytest.mark.xfail(strict=True, reason="spatial gating reads the raw descriptor map M, which alpha does not "
                                       "gate, so with SG on the logits depend on N and D even at alpha=0")
def test_initialization_neutrality_default_network(criterion):
    x = np.random.default_rng(3).uniform(size=(2, 3, 64, 64)).astype(np.float32)
    cfg = ModelConfig()
    ok = _neutral(cfg, x)
    diff = float(np.abs(_first_logits(cfg, x) - _first_logits(cfg.replace(num_descriptors=64), x)).max())
    assert criterion("initialization neutrality (default agln_straight, SG on)", ok,
                     f"max |logit diff| N=16 vs 64: {diff:.2e}")


def test_complexity_linear_in_hw_and_n(criterion):
    cfg = ModelConfig(num_descriptors=8)
    f = sab_sdm_flops
    hw_ok = f(cfg, (128, 64)) == 2 * f(cfg, (64, 64)) and f(cfg, (128, 128)) == 4 * f(cfg, (64, 64))
    n = [f(cfg.replace(num_descriptors=k), (64, 64)) for k in (8, 16, 32)]
    # affine in N: the phi/psi/Psi convolutions do not depend on N, the attention terms grow as C*N*HW
    slope = n[1] - n[0]
    n_ok = slope > 0 and n[2] - n[1] == 2 * slope
    assert criterion("SAB+SDM FLOPs linear in HW and N", hw_ok and n_ok,
                     f"HW x2 -> x{f(cfg, (128, 64)) / f(cfg, (64, 64)):g}; per-descriptor {slope} FLOPs")


def test_cost_ordering(criterion):
    failures = []
    count = 0
    for widths in ((16, 32, 64, 128), (8, 16, 32, 64)):
        for c in (2, 8, 32, 64):
            for n in (1, 16, 128):
                for gap in (False, True):
                    base = ModelConfig(encoder_widths=widths, decoder_channels=c, num_descriptors=n, gap_mode=gap)
                    fpn = cost_report(base.replace(variant="fpn_baseline"))
                    straight = cost_report(base)
                    if not (fpn.params < straight.params and fpn.flops < straight.flops):
                        failures.append(("fpn", widths, c, n, gap))
                    for v in ("agln_minus", "agln_straight", "agln_dense"):
                        full, lite = cost_report(base.replace(variant=v)), cost_report(base.replace(variant=v, lite=True))
                        if not (lite.params < full.params and lite.flops < full.flops):
                            failures.append((v, widths, c, n, gap))
                    count += 1
    assert criterion("cost ordering fpn < straight, lite < full", not failures,
                     f"{count} configs" + (f", failures {failures[:3]}" if failures else ""))


@pytest.mark.slow
def test_overfit_smoke(criterion, tmp_path):
    start = time.perf_counter()
    pixacc, iters = overfit_smoke(tmp_path)
    elapsed = time.perf_counter() - start
    ok = pixacc >= 0.95 and iters <= 300 and elapsed < 300
    assert criterion("overfit smoke", ok, f"train pixAcc {pixacc:.4f} after {iters} iterations, {elapsed:.0f}s")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="channel resampling as specified discards most skip detail at desk scale: "
                                       "near-uniform channel attention at init, near one-hot at 1/4 after training")
def test_trend(criterion, tmp_path):
    result = trend_experiment(tmp_path, seeds=(0, 1, 2), epochs=40)
    print(result.report())
    d = result.deltas()
    detail = ", ".join(f"{k} {v:+.2f}" for k, v in d.items()) + ", medians " + ", ".join(
        f"{v} {result.median(v):.2f}" for v in result.runs)
    ok = result.passed(TREND_SLACK)
    criterion(f"trend (slack {TREND_SLACK} mIoU points)", ok, detail)
    assert ok, result.report()


def _metric_lines(text):
    return {m.group(1): float(m.group(2)) for m in re.finditer(r"^metric=(\S+) value=(\S+)$", text, re.M)}


def test_ablation_harness(criterion, tmp_path, capsys):
    corpus = tmp_path / "corpus"
    assert cli.main(["gen", *TINY, "--corpus-dir", str(corpus)]) == 0
    grid = {
        "cr=off sg=off": ["--no-cr", "--no-sg"],
        "cr=on sg=off": ["--no-sg"],
        "cr=off sg=on": ["--no-cr"],
        "cr=on sg=on": [],
        **{f"N={n}": ["--descriptors", str(n)] for n in (1, 64, 128, 256)},
        "alpha,beta learnable": [],
        "alpha fixed": ["--fixed-alpha"],
        "beta fixed": ["--fixed-beta"],
        "alpha,beta fixed": ["--fixed-alpha", "--fixed-beta"],
        "gap_mode": ["--gap-mode"],
    }
    broken = []
    for i, (label, flags) in enumerate(grid.items()):
        capsys.readouterr()
        code = cli.main(["train", *TINY, "--corpus-dir", str(corpus), "--out-dir", str(tmp_path / f"r{i}"), *flags])
        metrics = _metric_lines(capsys.readouterr().out)
        if code != 0 or not {"loss", "miou", "pixacc"} <= set(metrics) or not math.isfinite(metrics["miou"]):
            broken.append(label)
    bitwise = True
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 64, 64)).astype(np.float32))
    for variant in ("agln_minus", "agln_straight", "agln_dense"):
        gap = SegmentationModel(ModelConfig(variant=variant, gap_mode=True), seed=0)
        att = SegmentationModel(ModelConfig(variant=variant), seed=0)
        for name, p in att.named_parameters():
            if ".theta." in name:
                p.data[...] = 0
        with no_grad():
            bitwise &= np.array_equal(gap(x).data, att(x).data)
    sab_gap = SemanticAggregation(8, 4, gap_mode=True, name="s", init=Initializer(1))
    sab_att = SemanticAggregation(8, 4, name="s", init=Initializer(1))
    sab_att.theta.weight.data[...] = 0
    sab_att.theta.bias.data[...] = 0
    feat = Tensor(np.random.default_rng(1).normal(size=(2, 8, 5, 7)).astype(np.float32))
    bitwise &= np.array_equal(semantic_aggregation(sab_gap, feat)[0].data, semantic_aggregation(sab_att, feat)[0].data)
    ok = not broken and bitwise
    assert criterion("ablation harness", ok, f"{len(grid) - len(broken)}/{len(grid)} CLI runs with metrics, "
                                             f"gap_mode bitwise={bitwise}" + (f", broken {broken}" if broken else ""))


def test_determinism_and_persistence(criterion, tmp_path):
    cfg = RunConfig(encoder_widths=(4, 4, 8, 8), decoder_channels=4, num_descriptors=3, num_classes=3,
                    num_train=6, num_val=2, image_size=(32, 32), epochs=2, batch_size=2, variant="agln_dense",
                    corpus_dir=str(tmp_path / "corpus"))
    assert cli.main(["gen", "--config", _write(tmp_path / "c.txt", cfg)]) == 0
    runs = [train(cfg.replace(out_dir=str(tmp_path / f"run{k}")), log=lambda s: None) for k in (0, 1)]
    same_ckpt = all((runs[0].out_dir / f).read_bytes() == (runs[1].out_dir / f).read_bytes()
                    for f in ("best.ckpt", "final.ckpt"))

    model = runs[0].model.eval()
    x = np.random.default_rng(2).uniform(size=(3, 64, 64)).astype(np.float32)
    save_checkpoint(tmp_path / "m.ckpt", model)
    loaded = load_checkpoint(tmp_path / "m.ckpt").eval()
    with no_grad():
        roundtrip = np.array_equal(model(Tensor(x)).data, loaded(Tensor(x)).data)
    single = np.argmax(predict_logits(model, x), axis=0)
    ms_equal = np.array_equal(multi_scale_eval(model, x, [1.0], flip=False), single)
    ok = same_ckpt and roundtrip and ms_equal
    assert criterion("determinism and persistence", ok,
                     f"checkpoints identical={same_ckpt}, roundtrip bitwise={roundtrip}, ms[1.0]==single={ms_equal}")


def _write(path, cfg):
    path.write_text(cfg.to_text())
    return str(path)
