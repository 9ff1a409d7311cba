"""Multi-run experiments: the variant trend comparison and the overfit smoke run."""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .data import CorpusSpec, generate_corpus
from .training import RunConfig, train

TREND_VARIANTS = ("fpn_baseline", "agln_straight", "agln_dense")
TREND_SLACK = 0.5  # mIoU points
# from-scratch encoders at desk scale barely move at the full-scale rate of 1e-3
TREND_LR = 0.01


@dataclass
class TrendResult:
    runs: dict[str, list[float]] = field(default_factory=dict)  # variant -> final val mIoU (points) per seed

    def median(self, variant: str) -> float:
        return statistics.median(self.runs[variant])

    def deltas(self) -> dict[str, float]:
        return {
            "straight_minus_baseline": self.median("agln_straight") - self.median("fpn_baseline"),
            "dense_minus_straight": self.median("agln_dense") - self.median("agln_straight"),
            "dense_minus_baseline": self.median("agln_dense") - self.median("fpn_baseline"),
        }

    def passed(self, slack: float = TREND_SLACK) -> bool:
        d = self.deltas()
        return d["straight_minus_baseline"] >= -slack and d["dense_minus_straight"] >= -slack

    def report(self) -> str:
        lines = [f"{v}: runs={[round(x, 2) for x in r]} median={self.median(v):.2f}" for v, r in self.runs.items()]
        lines += [f"{k}={v:+.2f}" for k, v in self.deltas().items()]
        return "\n".join(lines)


def trend_experiment(work_dir: str | Path, seeds=(0, 1, 2), epochs: int = 40, base: RunConfig | None = None,
                     log: Callable[[str], None] = lambda s: None) -> TrendResult:
    """Train each trend variant once per seed on one shared corpus."""
    work = Path(work_dir)
    base = base or RunConfig(base_lr=TREND_LR)
    base = base.replace(epochs=epochs, corpus_dir=str(work / "corpus"))
    if not (work / "corpus" / "manifest.txt").is_file():
        generate_corpus(base.corpus_spec(), work / "corpus")
    result = TrendResult()
    for variant in TREND_VARIANTS:
        for seed in seeds:
            cfg = base.replace(variant=variant, seed=seed, out_dir=str(work / f"{variant}_s{seed}"))
            history = train(cfg, log=lambda s, v=variant, k=seed: log(f"[{v} seed={k}] {s}")).history
            result.runs.setdefault(variant, []).append(100.0 * history[-1].miou)
    return result


SMOKE_LR = 0.02


def overfit_smoke(work_dir: str | Path, iterations: int = 300, seed: int = 0) -> tuple[float, int]:
    """Fit agln_dense (C=32, N=16) to 8 images; returns (train pixAcc, iterations run)."""
    work = Path(work_dir)
    spec = CorpusSpec(seed=seed, num_train=8, num_val=0, image_size=(64, 64), num_classes=5)
    generate_corpus(spec, work / "corpus")
    batch = 4
    cfg = RunConfig(variant="agln_dense", decoder_channels=32, num_descriptors=16, num_classes=5,
                    corpus_dir=str(work / "corpus"), val_split="train", num_train=8, num_val=0,
                    batch_size=batch, epochs=-(-iterations * batch // 8), max_iters=iterations,
                    base_lr=SMOKE_LR, augment=False, seed=seed, out_dir=str(work / "run"))
    result = train(cfg, log=lambda s: None)
    return result.history[-1].pixacc, result.iterations
