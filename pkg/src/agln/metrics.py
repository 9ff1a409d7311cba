"""Segmentation metrics, multi-scale inference and the analytic cost model."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .layers import IGNORE_INDEX, ConfigurationError, resize_array
from .model import ModelConfig, SegmentationModel
from .tensor import ContractError, DimensionError, Tensor, no_grad

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)


class ConfusionMatrix:
    """K x K pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise DimensionError(f"accumulate: prediction {pred.shape} vs ground truth {gt.shape}")
        if pred.size and (pred.min() < 0 or pred.max() >= self.num_classes):
            raise ContractError(f"accumulate: predictions must lie in 0..{self.num_classes - 1}")
        _kernels.confusion_update(self.matrix, gt, pred, self.ignore_index)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.matrix = self.matrix + other.matrix
        return out

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def iou_per_class(self) -> np.ndarray:
        """IoU per class, NaN where the class never appears in gt or prediction."""
        m = self.matrix
        inter = np.diag(m).astype(np.float64)
        union = m.sum(axis=0) + m.sum(axis=1) - np.diag(m)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, inter / np.maximum(union, 1), np.nan)

    def miou(self) -> float:
        if self.total == 0:
            raise ContractError("mIoU of an empty confusion matrix")
        return float(np.nanmean(self.iou_per_class()))

    def pixacc(self) -> float:
        if self.total == 0:
            raise ContractError("pixAcc of an empty confusion matrix")
        return float(np.trace(self.matrix) / self.total)


def accumulate(acc: ConfusionMatrix, pred_mask: np.ndarray, gt_mask: np.ndarray) -> ConfusionMatrix:
    return acc.accumulate(pred_mask, gt_mask)


def miou(acc: ConfusionMatrix) -> float:
    return acc.miou()


def pixacc(acc: ConfusionMatrix) -> float:
    return acc.pixacc()


# --- inference ---------------------------------------------------------------


def predict_logits(model: SegmentationModel, image: np.ndarray) -> np.ndarray:
    """Logits (K, H, W) for one (3, H, W) image of any size.

    The image is zero-padded at the bottom/right to a multiple of 32 and the
    logits are cropped back.
    """
    _, h, w = image.shape
    ph, pw = -(-h // 32) * 32, -(-w // 32) * 32
    if (ph, pw) != (h, w):
        padded = np.zeros((3, ph, pw), dtype=image.dtype)
        padded[:, :h, :w] = image
        image = padded
    with no_grad():
        logits = model(Tensor(image[None])).data[0]
    return logits[:, :h, :w]


def predict(model: SegmentationModel, images: np.ndarray) -> np.ndarray:
    """Single-scale argmax for a (B, 3, H, W) batch with H, W divisible by 32."""
    with no_grad():
        return np.argmax(model(Tensor(images)).data, axis=1)


def multi_scale_eval(model: SegmentationModel, image: np.ndarray, scales: Sequence[float] = DEFAULT_SCALES,
                     flip: bool = False) -> np.ndarray:
    """Average logits over rescaled (and optionally mirrored) copies, then argmax."""
    if not len(scales):
        raise ConfigurationError("multi_scale_eval needs at least one scale")
    if min(scales) <= 0:
        raise ConfigurationError(f"scales must be positive, got {list(scales)}")
    _, h, w = image.shape
    total = None
    count = 0
    for s in scales:
        sh, sw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        scaled = resize_array(image, sh, sw)
        views = [(scaled, False)] + ([(scaled[:, :, ::-1].copy(), True)] if flip else [])
        for view, mirrored in views:
            logits = predict_logits(model, view)
            if mirrored:
                logits = logits[:, :, ::-1]
            logits = resize_array(np.ascontiguousarray(logits), h, w)
            total = logits if total is None else total + logits
            count += 1
    return np.argmax(total / count, axis=0)


def evaluate(model: SegmentationModel, samples: Iterable, num_classes: int, scales: Sequence[float] | None = None,
             flip: bool = False, batch_size: int = 8) -> ConfusionMatrix:
    """Confusion matrix over samples; ``scales=None`` means plain single-scale."""
    model.eval()
    acc = ConfusionMatrix(num_classes)
    samples = list(samples)
    if scales is None and not flip:
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            same = len({s.image.shape for s in chunk}) == 1 and chunk[0].image.shape[1] % 32 == 0 \
                and chunk[0].image.shape[2] % 32 == 0
            if same:
                preds = predict(model, np.stack([s.image for s in chunk]))
            else:
                preds = [np.argmax(predict_logits(model, s.image), axis=0) for s in chunk]
            for s, p in zip(chunk, preds):
                acc.accumulate(p, s.mask)
        return acc
    for s in samples:
        acc.accumulate(multi_scale_eval(model, s.image, scales or (1.0,), flip), s.mask)
    return acc


# --- cost model --------------------------------------------------------------


def descriptor_memory_mb(c: int, n: int) -> float:
    """Float32 storage of a C x N descriptor matrix, in MiB (C*N / 2**18)."""
    if c < 1 or n < 1:
        raise ContractError("descriptor_memory_mb needs c, n >= 1")
    return c * n * 4 / 2**20


def conv_flops(cin: int, cout: int, k: int, ho: int, wo: int) -> int:
    """2 FLOPs per multiply-accumulate; the bias add is not counted."""
    return 2 * cout * cin * k * k * ho * wo


@dataclass
class CostReport:
    params: int
    flops: int
    descriptor_mem_mb: float
    param_groups: dict[str, int] = field(default_factory=dict)
    flop_groups: dict[str, int] = field(default_factory=dict)


class _Tally:
    def __init__(self):
        self.params: dict[str, int] = defaultdict(int)
        self.flops: dict[str, int] = defaultdict(int)

    def conv(self, group, cin, cout, kind, hw, stride=1):
        h, w = hw
        ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
        if kind == "standard_3x3":
            self.params[group] += cout * cin * 9 + cout
            self.flops[group] += conv_flops(cin, cout, 3, ho, wo)
        elif kind == "pointwise_1x1":
            self.params[group] += cout * cin + cout
            self.flops[group] += conv_flops(cin, cout, 1, ho, wo)
        else:
            self.params[group] += cin * 9 + cout * cin + cout
            self.flops[group] += 2 * cin * 9 * ho * wo + conv_flops(cin, cout, 1, ho, wo)
        return ho, wo

    def cbr(self, group, cin, cout, hw, kind="standard_3x3", stride=1):
        ho, wo = self.conv(group, cin, cout, kind, hw, stride)
        self.params[group] += 2 * cout
        self.flops[group] += 2 * cout * ho * wo  # BN + ReLU
        return ho, wo

    def elementwise(self, group, n):
        self.flops[group] += n


def _sab(t: _Tally, cfg: ModelConfig, hw):
    c, n, p = cfg.decoder_channels, cfg.num_descriptors, hw[0] * hw[1]
    t.conv("SAB", c, c, "pointwise_1x1", hw)
    if not cfg.gap_mode:
        t.conv("SAB", c, n, "pointwise_1x1", hw)
        t.elementwise("SAB", n * p)  # softmax
    t.flops["SAB"] += 2 * c * p * n


def _cfb(t: _Tally, cfg: ModelConfig, hw, variant_minus: bool, upsample: bool):
    c, n, p = cfg.decoder_channels, cfg.num_descriptors, hw[0] * hw[1]
    kind = "depthwise_separable_3x3" if cfg.lite else "standard_3x3"
    if upsample:
        t.elementwise("fusion", c * p)
    t.conv("SDM", c, n, "pointwise_1x1", hw)
    t.elementwise("SDM", n * p)  # channel softmax
    t.flops["SDM"] += 2 * c * n * p
    t.elementwise("SDM", 2 * c * p)  # alpha * M, add
    t.cbr("SDM", c, c, hw, kind)
    if cfg.alpha_learnable:
        t.params["SDM"] += 1
    cr = cfg.enable_cr and not variant_minus
    sg = cfg.enable_sg and not variant_minus
    if cr:
        t.flops["LRM"] += 2 * c * p * c + c * c + 2 * c * c * p
    if sg:
        t.elementwise("LRM", 2 * c * p)  # sigmoid, product
    t.elementwise("fusion", 2 * c * p)  # beta * G, add
    t.cbr("fusion", c, c, hw, kind)
    if cfg.beta_learnable and not variant_minus:
        t.params["fusion"] += 1


def cost_report(cfg: ModelConfig, input_size: tuple[int, int] = (64, 64)) -> CostReport:
    """Analytic parameter and FLOP counts per block group for one image."""
    h, w = input_size
    if h % 32 or w % 32:
        raise ContractError(f"input size {h}x{w} must be divisible by 32")
    t = _Tally()
    widths = cfg.encoder_widths
    hw = t.cbr("encoder", 3, widths[0], (h, w), stride=2)
    hw = t.cbr("encoder", widths[0], widths[0], hw, stride=2)
    sizes = []
    for i, wd in enumerate(widths):
        cin = widths[0] if i == 0 else widths[i - 1]
        hw = t.cbr("encoder", cin, wd, hw)
        hw = t.cbr("encoder", wd, wd, hw, stride=1 if i == 0 else 2)
        sizes.append(hw)
    c, k = cfg.decoder_channels, cfg.num_classes
    for wd, s in zip(widths, sizes):
        t.cbr("laterals", wd, c, s)
    s4, s8, s16, s32 = sizes
    merge_kind = "depthwise_separable_3x3" if cfg.lite else "standard_3x3"
    if cfg.variant == "fpn_baseline":
        for s in (s16, s8, s4):
            t.elementwise("fusion", 2 * c * s[0] * s[1])  # upsample, add
            t.cbr("fusion", c, c, s, merge_kind)
    elif cfg.variant in ("agln_minus", "agln_straight"):
        _sab(t, cfg, s32)
        for s in (s16, s8, s4):
            _cfb(t, cfg, s, cfg.variant == "agln_minus", upsample=True)
    else:
        _sab(t, cfg, s32)
        _cfb(t, cfg, s16, False, True)
        _sab(t, cfg, s16)
        _cfb(t, cfg, s16, False, False)
        _cfb(t, cfg, s8, False, True)
        _sab(t, cfg, s8)
        _cfb(t, cfg, s16, False, False)
        _cfb(t, cfg, s8, False, False)
        _cfb(t, cfg, s4, False, True)
    p4 = s4[0] * s4[1]
    t.elementwise("heads", 3 * c * p4)  # resize the three coarser stage outputs
    t.cbr("heads", 4 * c, c, s4)
    t.conv("heads", c, k, "pointwise_1x1", s4)
    t.elementwise("heads", k * h * w)  # final resize
    return CostReport(
        params=sum(t.params.values()),
        flops=sum(t.flops.values()),
        descriptor_mem_mb=0.0 if cfg.variant == "fpn_baseline" else descriptor_memory_mb(c, cfg.num_descriptors),
        param_groups=dict(t.params),
        flop_groups=dict(t.flops),
    )


def count_flops(cfg: ModelConfig, input_size: tuple[int, int] = (64, 64)) -> int:
    return cost_report(cfg, input_size).flops


def sab_sdm_flops(cfg: ModelConfig, input_size: tuple[int, int]) -> int:
    groups = cost_report(cfg, input_size).flop_groups
    return groups.get("SAB", 0) + groups.get("SDM", 0)


GROUP_ORDER = ("encoder", "laterals", "SAB", "SDM", "LRM", "fusion", "heads")


def format_cost_table(columns: dict[str, CostReport]) -> str:
    names = list(columns)
    rows = [("params", lambda r: r.params)] + [
        (f"params[{g}]", lambda r, g=g: r.param_groups.get(g, 0)) for g in GROUP_ORDER
    ] + [("flops", lambda r: r.flops)] + [
        (f"flops[{g}]", lambda r, g=g: r.flop_groups.get(g, 0)) for g in GROUP_ORDER
    ]
    width = max(14, *(len(n) for n in names))
    lines = ["metric".ljust(18) + "".join(n.rjust(width + 2) for n in names)]
    for label, get in rows:
        lines.append(label.ljust(18) + "".join(f"{get(columns[n]):>{width + 2},d}" for n in names))
    lines.append("descriptor_mb".ljust(18) + "".join(f"{columns[n].descriptor_mem_mb:>{width + 2}.6g}" for n in names))
    return "\n".join(lines)


def metric_records(values: dict[str, float]) -> str:
    """Line-oriented ``metric=<name> value=<number>`` records."""
    return "\n".join(f"metric={k} value={v:.10g}" for k, v in values.items())
