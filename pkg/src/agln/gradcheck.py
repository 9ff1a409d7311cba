"""Finite-difference verification of every decoder block and of whole models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks
from .layers import Initializer, cross_entropy
from .model import VARIANTS, ModelConfig, SegmentationModel
from .tensor import GradCheckReport, Tensor, default_dtype, grad_check, mul, sum_all

BLOCK_CHANNELS, BLOCK_DESCRIPTORS, BLOCK_SIZE = 4, 3, 4
# biases followed by batch norm or by the spatial softmax have exactly zero
# gradient; finite differences there only measure rounding noise
SHIFT_INVARIANT = ("theta.bias", "psi.bias", "phi_out.bias")
TINY_MODEL = dict(encoder_widths=(4, 8, 8, 16), decoder_channels=8, num_descriptors=4, num_classes=3)


@dataclass
class CheckResult:
    name: str
    target: str
    report: GradCheckReport
    tol: float

    @property
    def passed(self) -> bool:
        return self.report.max_rel_err <= self.tol


def _projected(rng, shape):
    """Fixed random weights turning a tensor output into a scalar loss."""
    w = Tensor(rng.normal(size=shape))
    return lambda out: sum_all(mul(out, w))


def _set_gates(module, rng):
    # move learnable scalars off their init so every path carries gradient
    for name, p in module.named_parameters():
        if name.endswith("alpha") or name.endswith("beta"):
            p.data[...] = rng.uniform(0.4, 0.9)


def _checked_params(module):
    return [(n, p) for n, p in module.named_parameters() if not n.endswith(SHIFT_INVARIANT)]


def _check_all(name, fn, targets, eps, tol, rng, max_coords=None):
    results = []
    for label, t in targets:
        idx = None
        if max_coords is not None and t.size > max_coords:
            idx = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        results.append(CheckResult(name, label, grad_check(lambda _: fn(), t, eps, tol, idx), tol))
    return results


def block_checks(eps: float = 1e-5, tol: float = 1e-6, seed: int = 0) -> list[CheckResult]:
    """SAB, SDM, CR, SG and CFB in double precision at C=4, N=3, 4x4 maps."""
    c, n, s = BLOCK_CHANNELS, BLOCK_DESCRIPTORS, BLOCK_SIZE
    rng = np.random.default_rng(seed)
    out = []
    with default_dtype(np.float64):
        init = Initializer(seed)
        x = Tensor(rng.normal(size=(2, c, s, s)), requires_grad=True)
        a = Tensor(rng.normal(size=(2, c, s, s)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, c, s, s)), requires_grad=True)
        d = Tensor(rng.normal(size=(2, c, n)), requires_grad=True)
        m = Tensor(rng.normal(size=(2, c, s, s)), requires_grad=True)

        sab = blocks.SemanticAggregation(c, n, name="sab", init=init)
        proj = _projected(rng, (2, c, n))
        out += _check_all("SAB", lambda: proj(blocks.semantic_aggregation(sab, x)[0]),
                          [("x", x)] + _checked_params(sab), eps, tol, rng)

        sdm = blocks.SemanticDistribution(c, n, name="sdm", init=init)
        _set_gates(sdm, rng)
        pm, pe = _projected(rng, (2, c, s, s)), _projected(rng, (2, c, s, s))

        def sdm_loss():
            mm, ee = blocks.semantic_distribution(sdm, d, a)
            return pm(mm) + pe(ee)

        out += _check_all("SDM", sdm_loss, [("d", d), ("a", a)] + _checked_params(sdm), eps, tol, rng)

        pf = _projected(rng, (2, c, s, s))
        out += _check_all("CR", lambda: pf(blocks.channel_resample(b, a)), [("b", b), ("e", a)], eps, tol, rng)
        out += _check_all("SG", lambda: pf(blocks.spatial_gate(b, m)), [("f", b), ("m", m)], eps, tol, rng)

        cfb = blocks.ContextFusion(c, n, name="cfb", init=init)
        _set_gates(cfb, rng)
        po = _projected(rng, (2, c, s, s))
        out += _check_all("CFB", lambda: po(blocks.context_fusion(cfb, d, a, b)),
                          [("d", d), ("a", a), ("b", b)] + _checked_params(cfb), eps, tol, rng)
    return out


def model_checks(variants=VARIANTS, eps: float = 1e-5, tol: float = 1e-4, seed: int = 0,
                 max_coords: int = 24, image_size: int = 32, **overrides) -> list[CheckResult]:
    """Image-to-loss checks of whole networks at C=8, N=4, 3x32x32 input.

    At 32x32 the deepest map is a single pixel, so every descriptor equals
    that pixel and both the pooling logits and the distribution logits get an
    exactly zero gradient; those weights are left to the block checks.
    """
    out = []
    degenerate = ("SAB_1.theta", "varphi") if image_size // 32 == 1 else ()
    for variant in variants:
        rng = np.random.default_rng(seed)
        with default_dtype(np.float64):
            cfg = ModelConfig(variant=variant, **{**TINY_MODEL, **overrides})
            model = SegmentationModel(cfg, seed)
            _set_gates(model, rng)
            image = Tensor(rng.uniform(size=(2, 3, image_size, image_size)), requires_grad=True)
            target = rng.integers(0, cfg.num_classes, size=(2, image_size, image_size))
            target[0, :4, :4] = 255

            def loss():
                return cross_entropy(model(image), target)

            targets = [("image", image)] + [
                (name, p) for name, p in model.named_parameters()
                if p.size == 1 or any(k in name for k in ("theta", "varphi", "phi", "psi", "lateral", "classifier"))
                and name.endswith(("weight", "depthwise"))
                and not any(k in name for k in degenerate)
            ]
            out += _check_all(f"forward[{variant}]", loss, targets, eps, tol, rng, max_coords)
    return out


def summarize(results: list[CheckResult]) -> dict[str, tuple[bool, float]]:
    """Worst relative error and verdict per block name."""
    summary: dict[str, tuple[bool, float]] = {}
    for r in results:
        ok, worst = summary.get(r.name, (True, 0.0))
        summary[r.name] = (ok and r.passed, max(worst, r.report.max_rel_err))
    return summary
