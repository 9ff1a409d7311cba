"""Run configuration and the training loop behind ``agln train``."""
from __future__ import annotations

import math
import os
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
from filelock import FileLock, Timeout
from threadpoolctl import threadpool_limits

from .data import AugmentPolicy, CorpusSpec, augment, load_split
from .layers import SGD, ConfigurationError, DataError, cross_entropy
from .metrics import evaluate
from .model import ModelConfig, SegmentationModel, coerce_field, save_checkpoint
from .tensor import Tensor, backward

THREADS_ENV = "AGLN_NUM_THREADS"
MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class RunLockedError(RuntimeError):
    """Another process owns the run directory."""


@dataclass(frozen=True)
class RunConfig:
    # architecture
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
    # corpus
    corpus_dir: str = "corpus"
    corpus_seed: int = 0
    num_train: int = 200
    num_val: int = 50
    image_size: tuple[int, int] = (64, 64)
    clutter_level: float = 0.7
    train_split: str = "train"
    val_split: str = "val"
    # optimization
    epochs: int = 40
    batch_size: int = 4
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    lr_power: float = 0.9
    max_iters: int = 0
    seed: int = 0
    deterministic: bool = True
    out_dir: str = "runs/default"
    # augmentation
    augment: bool = True
    aug_flip: bool = True
    aug_scale_min: float = 0.75
    aug_scale_max: float = 1.5
    # evaluation
    eval_scales: tuple[float, ...] = (1.0,)
    eval_flip: bool = False

    def __post_init__(self):
        self.model_config()
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.base_lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigurationError("base_lr must be > 0, momentum in [0, 1), weight_decay >= 0")
        if self.max_iters < 0:
            raise ConfigurationError("max_iters must be >= 0 (0 means no cap)")
        if not self.eval_scales or min(self.eval_scales) <= 0:
            raise ConfigurationError("eval_scales must be a non-empty list of positive numbers")
        if not 0 < self.aug_scale_min <= self.aug_scale_max:
            raise ConfigurationError("need 0 < aug_scale_min <= aug_scale_max")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in MODEL_KEYS})

    def corpus_spec(self) -> CorpusSpec:
        spec = CorpusSpec(self.corpus_seed, self.num_train, self.num_val, tuple(self.image_size),
                          self.num_classes, self.clutter_level)
        spec.validate()
        return spec

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.aug_flip, (self.aug_scale_min, self.aug_scale_max), tuple(self.image_size))

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
            values[key.strip()] = parse_field(key.strip(), value.strip())
        return replace(base or cls(), **values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def parse_field(key: str, value: str):
    try:
        return coerce_field(RunConfig, key, value)
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"bad value for {key}: {value!r}") from exc


def thread_count(cfg: RunConfig) -> int:
    """Deterministic runs use one BLAS thread unless the environment says otherwise."""
    env = os.environ.get(THREADS_ENV, "").strip()
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
        if n < 1:
            raise ConfigurationError(f"{THREADS_ENV} must be >= 1")
        return n
    return 1 if cfg.deterministic else (os.cpu_count() or 1)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    miou: float
    pixacc: float

    def line(self) -> str:
        return f"epoch={self.epoch} loss={self.loss:.6f} miou={self.miou:.6f} pixacc={self.pixacc:.6f}"


@dataclass
class TrainResult:
    history: list[EpochLog]
    best_epoch: int
    out_dir: Path
    model: SegmentationModel
    iterations: int


def manifest_path(cfg: RunConfig) -> Path:
    path = Path(cfg.corpus_dir) / "manifest.txt"
    if not path.is_file():
        raise ConfigurationError(f"corpus_dir: no manifest at {path}")
    return path


def iterate_batches(samples, cfg: RunConfig, rng: np.random.Generator):
    """One epoch of shuffled, optionally augmented (images, masks) batches."""
    order = rng.permutation(len(samples))
    policy = cfg.augment_policy()
    for start in range(0, len(order), cfg.batch_size):
        chunk = [samples[i] for i in order[start:start + cfg.batch_size]]
        if cfg.augment:
            chunk = [augment(s, rng, policy) for s in chunk]
        yield np.stack([s.image for s in chunk]), np.stack([s.mask for s in chunk])


def train(cfg: RunConfig, log: Callable[[str], None] = print) -> TrainResult:
    manifest = manifest_path(cfg)
    train_set = load_split(manifest, cfg.train_split, cfg.num_classes)
    if not train_set:
        raise ConfigurationError(f"train_split {cfg.train_split!r} is empty in {manifest}")
    val_set = load_split(manifest, cfg.val_split, cfg.num_classes) if cfg.val_split else []
    shapes = {s.image.shape for s in train_set}
    if not cfg.augment and len(shapes) > 1:
        raise DataError(f"training images differ in size {sorted(shapes)}; enable augment to crop")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise RunLockedError(f"run directory {out} is in use by another process") from exc
    try:
        with threadpool_limits(limits=thread_count(cfg)):
            return _train_locked(cfg, train_set, val_set, out, log)
    finally:
        lock.release()


def _train_locked(cfg, train_set, val_set, out: Path, log) -> TrainResult:
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    model = SegmentationModel(cfg.model_config(), seed=cfg.seed)
    per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = per_epoch * cfg.epochs
    if cfg.max_iters:
        total = min(total, cfg.max_iters)
    opt = SGD(model.parameters(), total, cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.lr_power)
    rng = np.random.default_rng([cfg.seed, 1])
    scales = None if tuple(cfg.eval_scales) == (1.0,) and not cfg.eval_flip else cfg.eval_scales

    history: list[EpochLog] = []
    best_epoch, best_miou = 0, -math.inf
    it = 0
    metrics_log = (out / "metrics.log").open("w", encoding="utf-8")
    try:
        for epoch in range(1, cfg.epochs + 1):
            if it >= total:
                break
            model.train()
            losses = []
            t0 = time.perf_counter()
            for images, masks in iterate_batches(train_set, cfg, rng):
                if it >= total:
                    break
                loss = cross_entropy(model(Tensor(images)), masks)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at iteration {it} (epoch {epoch})")
                opt.zero_grad()
                backward(loss)
                opt.step()
                losses.append(value)
                it += 1
            miou = pixacc = math.nan
            if val_set:
                acc = evaluate(model, val_set, cfg.num_classes, scales, cfg.eval_flip)
                miou, pixacc = acc.miou(), acc.pixacc()
            entry = EpochLog(epoch, float(np.mean(losses)), miou, pixacc)
            history.append(entry)
            metrics_log.write(entry.line() + "\n")
            metrics_log.flush()
            log(f"{entry.line()} time={time.perf_counter() - t0:.1f}s")
            score = miou if val_set else -entry.loss
            if score >= best_miou:
                best_miou, best_epoch = score, epoch
                save_checkpoint(out / "best.ckpt", model)
    finally:
        metrics_log.close()
    model.eval()
    save_checkpoint(out / "final.ckpt", model)
    return TrainResult(history, best_epoch, out, model, it)
