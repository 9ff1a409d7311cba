"""Attention-guided decoder blocks.

* :func:`semantic_aggregation` pools a feature map into N descriptors with
  learned spatial attention.
* :func:`semantic_distribution` scatters those descriptors back to every
  position of a decoder map and fuses them in.
* :func:`channel_resample` and :func:`spatial_gate` clean up an encoder skip
  feature using the decoder as guidance.
* :func:`context_fusion` chains the three into one decoder stage.

All maps are batched (B, C, H, W); descriptors are (B, C, N).
"""
from __future__ import annotations

import numpy as np

from .layers import BatchNorm2d, ConfigurationError, Conv2d, Initializer, Module
from .tensor import (DimensionError, Tensor, add, get_default_dtype, make_result, matmul, mul, relu, reshape,
                     sigmoid, softmax, transpose)


def _scalar(module: Module, name: str, value: float, learnable: bool) -> None:
    if learnable:
        module.add_param(name, Tensor(value))
    else:
        module.add_buffer(name, np.asarray(value, dtype=get_default_dtype()))


def _gate(module: Module, name: str) -> Tensor:
    if name in module._params:
        return module._params[name]
    buf = module._buffers[name]
    return Tensor(buf, dtype=buf.dtype)


class SemanticAggregation(Module):
    """1x1 feature projection plus 1x1 attention logits for N descriptors.

    With ``gap_mode`` the attention is uniform (global average pooling) and
    no attention projection is created.
    """

    def __init__(self, channels: int, num_descriptors: int, gap_mode: bool = False, *, name: str,
                 init: Initializer):
        super().__init__()
        self.channels, self.num_descriptors, self.gap_mode = channels, num_descriptors, gap_mode
        self.phi = Conv2d(channels, channels, "pointwise_1x1", name=f"{name}.phi", init=init)
        if not gap_mode:
            self.theta = Conv2d(channels, num_descriptors, "pointwise_1x1", name=f"{name}.theta", init=init)

    def __call__(self, x: Tensor) -> Tensor:
        return semantic_aggregation(self, x)[0]


def uniform_attention(batch: int, rows: int, positions: int, dtype) -> Tensor:
    # same arithmetic as softmax over a constant row: ones / sum(ones)
    e = np.ones((batch, rows, positions), dtype=dtype)
    return make_result(e / np.sum(e, axis=2, keepdims=True), (), None, "uniform_attention")


def semantic_aggregation(p: SemanticAggregation, x: Tensor) -> tuple[Tensor, Tensor]:
    """Return descriptors D (B, C, N) and the spatial attention (B, N, HW)."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"semantic_aggregation: expected (B, {p.channels}, H, W), got {x.shape}")
    b, c, h, w = x.shape
    feat = reshape(p.phi(x), (b, c, h * w))
    if p.gap_mode:
        attn = uniform_attention(b, p.num_descriptors, h * w, x.dtype)
    else:
        attn = softmax(reshape(p.theta(x), (b, p.num_descriptors, h * w)), axis=2)
    return pool_descriptors(feat, attn), attn


def pool_descriptors(feat: Tensor, attn: Tensor) -> Tensor:
    """D = X_feat @ X_am^T for (B, C, P) features and (B, N, P) attention."""
    return matmul(feat, transpose(attn, (0, 2, 1)))


class SemanticDistribution(Module):
    def __init__(self, channels: int, num_descriptors: int, lite: bool = False, alpha_learnable: bool = True,
                 *, name: str, init: Initializer):
        super().__init__()
        self.channels, self.num_descriptors = channels, num_descriptors
        self.varphi = Conv2d(channels, num_descriptors, "pointwise_1x1", name=f"{name}.varphi", init=init)
        kind = "depthwise_separable_3x3" if lite else "standard_3x3"
        self.psi = Conv2d(channels, channels, kind, name=f"{name}.psi", init=init)
        self.psi_bn = BatchNorm2d(channels)
        # learnable alpha starts at 0; the pinned ablation holds it at 1
        _scalar(self, "alpha", 0.0 if alpha_learnable else 1.0, alpha_learnable)

    @property
    def alpha(self) -> Tensor:
        return _gate(self, "alpha")


def distribute(d: Tensor, attn: Tensor, spatial: tuple[int, int]) -> Tensor:
    """M = D @ A_av for (B, C, N) descriptors and (B, N, P) position weights."""
    b, c, _ = d.shape
    return reshape(matmul(d, attn), (b, c) + tuple(spatial))


def semantic_distribution(p: SemanticDistribution, d: Tensor, a: Tensor) -> tuple[Tensor, Tensor]:
    """Return the descriptor map M and the enhanced feature E, both like ``a``."""
    if a.ndim != 4 or a.shape[1] != p.channels:
        raise DimensionError(f"semantic_distribution: expected (B, {p.channels}, H, W), got {a.shape}")
    if d.shape[1] != a.shape[1]:
        raise DimensionError(f"semantic_distribution: descriptor width {d.shape[1]} vs feature channels {a.shape[1]}")
    if d.shape[2] != p.num_descriptors:
        raise ConfigurationError(f"semantic_distribution: got {d.shape[2]} descriptors, block expects "
                                 f"{p.num_descriptors}")
    b, c, h, w = a.shape
    attn = softmax(reshape(p.varphi(a), (b, p.num_descriptors, h * w)), axis=1)
    m = distribute(d, attn, (h, w))
    e = relu(p.psi_bn(p.psi(add(a, mul(p.alpha, m)))))
    return m, e


def channel_resample(b: Tensor, e: Tensor) -> Tensor:
    """F = softmax_rows(B E^T) B: every output channel mixes the input channels convexly."""
    if b.shape != e.shape:
        raise DimensionError(f"channel_resample: shape mismatch {b.shape} vs {e.shape}")
    single = b.ndim == 3
    if single:
        b, e = reshape(b, (1,) + b.shape), reshape(e, (1,) + e.shape)
    n, c, h, w = b.shape
    bf = reshape(b, (n, c, h * w))
    ef = reshape(e, (n, c, h * w))
    s = softmax(matmul(bf, transpose(ef, (0, 2, 1))), axis=2)
    out = reshape(matmul(s, bf), (n, c, h, w))
    return reshape(out, out.shape[1:]) if single else out


def spatial_gate(f: Tensor, m: Tensor) -> Tensor:
    """G = F * sigmoid(M)."""
    if f.shape != m.shape:
        raise DimensionError(f"spatial_gate: shape mismatch {f.shape} vs {m.shape}")
    return mul(f, sigmoid(m))


class LocalRefinement(Module):
    def __init__(self, enable_cr: bool = True, enable_sg: bool = True):
        super().__init__()
        self.enable_cr, self.enable_sg = enable_cr, enable_sg

    def __call__(self, b: Tensor, e: Tensor, m: Tensor) -> Tensor:
        return local_refinement(self, b, e, m)


def local_refinement(p: LocalRefinement, b: Tensor, e: Tensor, m: Tensor) -> Tensor:
    """Disabled stages pass their input through unchanged."""
    f = channel_resample(b, e) if p.enable_cr else b
    return spatial_gate(f, m) if p.enable_sg else f


class ContextFusion(Module):
    def __init__(self, channels: int, num_descriptors: int, *, lite: bool = False, enable_cr: bool = True,
                 enable_sg: bool = True, alpha_learnable: bool = True, beta_learnable: bool = True,
                 name: str, init: Initializer):
        super().__init__()
        self.sdm = SemanticDistribution(channels, num_descriptors, lite, alpha_learnable, name=f"{name}.sdm",
                                        init=init)
        self.lrm = LocalRefinement(enable_cr, enable_sg)
        kind = "depthwise_separable_3x3" if lite else "standard_3x3"
        self.phi_out = Conv2d(channels, channels, kind, name=f"{name}.phi_out", init=init)
        self.phi_bn = BatchNorm2d(channels)
        _scalar(self, "beta", 1.0, beta_learnable)

    @property
    def beta(self) -> Tensor:
        return _gate(self, "beta")

    def __call__(self, d: Tensor, a: Tensor, b: Tensor, record: dict | None = None) -> Tensor:
        return context_fusion(self, d, a, b, record)


def context_fusion(p: ContextFusion, d: Tensor, a: Tensor, b: Tensor, record: dict | None = None) -> Tensor:
    """O = ReLU(BN(Phi(E + beta * G))) for decoder input ``a`` and skip ``b``."""
    if a.shape != b.shape:
        raise DimensionError(f"context_fusion: decoder feature {a.shape} vs encoder feature {b.shape}")
    m, e = semantic_distribution(p.sdm, d, a)
    g = local_refinement(p.lrm, b, e, m)
    o = relu(p.phi_bn(p.phi_out(add(e, mul(p.beta, g)))))
    if record is not None:
        record.update(descriptor_map=m, enhanced=e, refined=g, output=o)
    return o
