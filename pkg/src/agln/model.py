"""Encoder-decoder segmentation networks and their checkpoint format.

Four decoder wirings share one encoder and one prediction head:

``fpn_baseline``   top-down FPN pathway, no attention blocks
``agln_minus``     descriptor aggregation + distribution, skips added as-is
``agln_straight``  one aggregation block feeding three fusion blocks
``agln_dense``     aggregation and fusion blocks re-applied in a triangle
"""
from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .blocks import ContextFusion, SemanticAggregation, semantic_aggregation
from .layers import ConfigurationError, Conv2d, ConvBNReLU, Initializer, Module, bilinear_resize
from .tensor import ContractError, Tensor, concat, load_tensors, reshape, save_tensors

VARIANTS = ("fpn_baseline", "agln_minus", "agln_straight", "agln_dense")
STRIDES = (4, 8, 16, 32)
CHECKPOINT_MAGIC = b"AGLN"
CHECKPOINT_VERSION = 1


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ModelConfig:
    encoder_widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    decoder_channels: int = 32
    num_descriptors: int = 16
    num_classes: int = 5
    variant: str = "agln_straight"
    lite: bool = False
    gap_mode: bool = False
    enable_cr: bool = True
    enable_sg: bool = True
    alpha_learnable: bool = True
    beta_learnable: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.encoder_widths)
        object.__setattr__(self, "encoder_widths", widths)
        if len(widths) != 4 or min(widths) < 1:
            raise ConfigurationError(f"encoder_widths must be 4 positive counts, got {widths}")
        if self.decoder_channels < 1:
            raise ConfigurationError("decoder_channels must be >= 1")
        if self.num_descriptors < 1:
            raise ConfigurationError("num_descriptors must be >= 1")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def to_record(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_record(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        return cls(**{k: coerce_field(cls, k, v) for k, v in kv.items()})


def coerce_field(cls, key: str, value: str):
    """Parse the text form of a dataclass field by its declared default's type."""
    by_name = {f.name: f for f in fields(cls)}
    if key not in by_name:
        raise ConfigurationError(f"unknown config key {key!r}")
    default = by_name[key].default
    if isinstance(default, bool):
        return _parse_bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        items = [s for s in value.replace(" ", "").split(",") if s]
        kind = type(default[0]) if default else float
        return tuple(kind(s) for s in items)
    return value


@dataclass
class EncoderOutputs:
    s4: Tensor
    s8: Tensor
    s16: Tensor
    s32: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.s4, self.s8, self.s16, self.s32]


class Encoder(Module):
    """Small strided CNN: a stride-4 stem, then four two-conv stages.

    The first stage keeps 1/4 resolution; each later stage halves it with its
    second convolution.
    """

    def __init__(self, widths: tuple[int, ...], *, init: Initializer):
        super().__init__()
        w0 = widths[0]
        self.stem = self.add_children("stem", [
            ConvBNReLU(3, w0, stride=2, name="encoder.stem.0", init=init),
            ConvBNReLU(w0, w0, stride=2, name="encoder.stem.1", init=init),
        ])
        stages = []
        for i, w in enumerate(widths):
            cin = w0 if i == 0 else widths[i - 1]
            stride = 1 if i == 0 else 2
            stages.append(ConvBNReLU(cin, w, name=f"encoder.stage{i + 1}.0", init=init))
            stages.append(ConvBNReLU(w, w, stride=stride, name=f"encoder.stage{i + 1}.1", init=init))
        self.stages = self.add_children("stages", stages)

    def __call__(self, x: Tensor) -> EncoderOutputs:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ContractError(f"encoder input {h}x{w} must be divisible by 32; pad the image first")
        for layer in self.stem:
            x = layer(x)
        outs = []
        for i in range(4):
            x = self.stages[2 * i + 1](self.stages[2 * i](x))
            outs.append(x)
        return EncoderOutputs(*outs)


def up_to(x: Tensor, ref: Tensor) -> Tensor:
    return bilinear_resize(x, ref.shape[-2], ref.shape[-1])


class SegmentationModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        init = Initializer(seed)
        c, n = cfg.decoder_channels, cfg.num_descriptors
        self.encoder = Encoder(cfg.encoder_widths, init=init)
        self.laterals = self.add_children("laterals", [
            ConvBNReLU(w, c, name=f"lateral{s}", init=init) for w, s in zip(cfg.encoder_widths, STRIDES)
        ])
        merge_kind = "depthwise_separable_3x3" if cfg.lite else "standard_3x3"

        def cfb(name, **kw):
            opts = dict(lite=cfg.lite, enable_cr=cfg.enable_cr, enable_sg=cfg.enable_sg,
                        alpha_learnable=cfg.alpha_learnable, beta_learnable=cfg.beta_learnable)
            opts.update(kw)
            block = ContextFusion(c, n, name=name, init=init, **opts)
            self._children[name] = block
            return block

        def sab(name):
            block = SemanticAggregation(c, n, cfg.gap_mode, name=name, init=init)
            self._children[name] = block
            return block

        self.blocks: dict[str, Module] = {}
        if cfg.variant == "fpn_baseline":
            for i in (1, 2, 3):
                self.blocks[f"merge{i}"] = ConvBNReLU(c, c, merge_kind, name=f"merge{i}", init=init)
                self._children[f"merge{i}"] = self.blocks[f"merge{i}"]
        elif cfg.variant == "agln_minus":
            self.blocks["SAB_1"] = sab("SAB_1")
            for i in (1, 2, 3):
                self.blocks[f"CFB{i}_1"] = cfb(f"CFB{i}_1", enable_cr=False, enable_sg=False, beta_learnable=False)
        elif cfg.variant == "agln_straight":
            self.blocks["SAB_1"] = sab("SAB_1")
            for i in (1, 2, 3):
                self.blocks[f"CFB{i}_1"] = cfb(f"CFB{i}_1")
        else:
            for name in ("SAB_1", "SAB_2", "SAB_3"):
                self.blocks[name] = sab(name)
            for name in ("CFB1_1", "CFB1_2", "CFB1_3", "CFB2_1", "CFB2_2", "CFB3_1"):
                self.blocks[name] = cfb(name)
        self.head = ConvBNReLU(4 * c, c, name="head", init=init)
        self.classifier = Conv2d(c, cfg.num_classes, "pointwise_1x1", name="classifier", init=init)

    def __call__(self, image: Tensor, trace: list | None = None, record: dict | None = None) -> Tensor:
        return forward(self, image, trace, record)


def encode(model: SegmentationModel, image: Tensor) -> EncoderOutputs:
    return model.encoder(image)


def _run_cfb(model, name, d, a, b, level, trace, record):
    sub = {} if record is not None else None
    o = model.blocks[name](d, a, b, sub)
    if trace is not None:
        trace.append(name)
    if record is not None:
        for key, value in sub.items():
            record[f"{key}_{level}"] = value
    return o


def _run_sab(model, name, x, trace):
    if trace is not None:
        trace.append(name)
    return semantic_aggregation(model.blocks[name], x)[0]


def forward(model: SegmentationModel, image: Tensor, trace: list | None = None,
            record: dict | None = None) -> Tensor:
    """Per-pixel class logits (B, K, H, W) for a (B, 3, H, W) image batch.

    ``trace`` collects block names in invocation order; ``record`` collects
    intermediate maps keyed ``lateral_<stride>``, ``descriptor_map_<i>``,
    ``enhanced_<i>``, ``refined_<i>``, ``output_<i>`` where ``i`` = 1, 2, 3
    for the 1/16, 1/8, 1/4 decoder levels.
    """
    single = image.ndim == 3
    if single:
        image = reshape(image, (1,) + image.shape)
    cfg = model.cfg
    feats = encode(model, image).as_list()
    lat = [layer(f) for layer, f in zip(model.laterals, feats)]
    l4, l8, l16, l32 = lat
    if record is not None:
        for s, t in zip(STRIDES, lat):
            record[f"lateral_{s}"] = t

    if cfg.variant == "fpn_baseline":
        outs = [l32]
        prev = l32
        for i, skip in zip((1, 2, 3), (l16, l8, l4)):
            prev = model.blocks[f"merge{i}"](up_to(prev, skip) + skip)
            if trace is not None:
                trace.append(f"merge{i}")
            if record is not None:
                record[f"output_{i}"] = prev
            outs.append(prev)
    elif cfg.variant in ("agln_minus", "agln_straight"):
        d = _run_sab(model, "SAB_1", l32, trace)
        outs = [l32]
        prev = l32
        for i, skip in zip((1, 2, 3), (l16, l8, l4)):
            prev = _run_cfb(model, f"CFB{i}_1", d, up_to(prev, skip), skip, i, trace, record)
            outs.append(prev)
    else:
        outs = [l32] + dense_decoder(model, l4, l8, l16, l32, trace, record)

    size = l4.shape[-2:]
    merged = concat([bilinear_resize(o, *size) for o in outs], axis=1)
    logits = model.classifier(model.head(merged))
    logits = bilinear_resize(logits, image.shape[-2], image.shape[-1])
    return reshape(logits, logits.shape[1:]) if single else logits


def dense_decoder(model, l4, l8, l16, l32, trace=None, record=None) -> list[Tensor]:
    """Triangular schedule; each step's descriptors come from the deepest fresh output."""
    d1 = _run_sab(model, "SAB_1", l32, trace)
    o1_1 = _run_cfb(model, "CFB1_1", d1, up_to(l32, l16), l16, 1, trace, record)

    d2 = _run_sab(model, "SAB_2", o1_1, trace)
    o1_2 = _run_cfb(model, "CFB1_2", d2, o1_1, l16, 1, trace, record)
    o2_1 = _run_cfb(model, "CFB2_1", d2, up_to(o1_2, l8), l8, 2, trace, record)

    d3 = _run_sab(model, "SAB_3", o2_1, trace)
    o1_3 = _run_cfb(model, "CFB1_3", d3, o1_2, l16, 1, trace, record)
    o2_2 = _run_cfb(model, "CFB2_2", d3, o2_1, l8, 2, trace, record)
    o3_1 = _run_cfb(model, "CFB3_1", d3, up_to(o2_2, l4), l4, 3, trace, record)
    return [o1_3, o2_2, o3_1]


dense_forward = forward


def count_params(model: Module) -> int:
    """Number of learnable scalars."""
    return int(sum(p.size for p in model.parameters()))


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str | Path, model: SegmentationModel) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    record = model.cfg.to_record().encode("utf-8")
    buf.write(struct.pack("<I", len(record)))
    buf.write(record)
    save_tensors(buf, model.state_dict())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> SegmentationModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic at offset 0)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", raw[8:12])
    cfg = ModelConfig.from_record(raw[12:12 + clen].decode("utf-8"))
    model = SegmentationModel(cfg)
    model.load_state_dict(load_tensors(io.BytesIO(raw[12 + clen:])))
    return model


# --- feature dumps -----------------------------------------------------------


def stage_names(cfg: ModelConfig) -> list[str]:
    names = [f"lateral_{s}" for s in STRIDES]
    kinds = ("output",) if cfg.variant == "fpn_baseline" else ("descriptor_map", "enhanced", "refined", "output")
    return names + [f"{k}_{i}" for k in kinds for i in (1, 2, 3)]


def to_gray(channel: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 with round-half-up; constant maps become 0."""
    lo, hi = float(channel.min()), float(channel.max())
    if hi <= lo:
        return np.zeros(channel.shape, dtype=np.uint8)
    scaled = (channel.astype(np.float64) - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def dump_features(model: SegmentationModel, image: Tensor, stage: str, out_dir: str | Path,
                  channels: list[int] | None = None) -> list[Path]:
    """Write selected channels of one intermediate map as 8-bit PGM files."""
    from .data import write_pgm

    valid = stage_names(model.cfg)
    if stage not in valid:
        raise ConfigurationError(f"unknown stage {stage!r}; valid stages: {', '.join(valid)}")
    record: dict[str, Tensor] = {}
    forward(model, image, record=record)
    fmap = record[stage].data
    fmap = fmap[0] if fmap.ndim == 4 else fmap
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in channels if channels is not None else range(fmap.shape[0]):
        path = out_dir / f"{stage}_c{c:03d}.pgm"
        write_pgm(path, to_gray(fmap[c]))
        paths.append(path)
    return paths
