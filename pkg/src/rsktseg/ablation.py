"""Fusion-strategy and layer-count sweeps on a fixture set.

Values are desk-scale comparisons of the knobs, not reproductions of
reported numbers.
"""

from __future__ import annotations

import copy
import math
from typing import List, Sequence

from .bench import evaluate, model_predictor
from .foundation import ClassVocabulary, ImageSample
from .training import NonFiniteLossError, TrainConfig, train
from .transfer import ModelConfig, RSKTSeg

STRATEGIES = ("mean", "cat", "separate")
LAYER_COUNTS = (1, 2, 3, 4, 5, 6)


def _run(base: ModelConfig, samples, vocab, tcfg: TrainConfig, table: str, setting: str) -> dict:
    model = RSKTSeg(base)
    result = train(model, samples, vocab, tcfg)
    final = result.history[-1] if result.history else math.nan
    if result.history and not all(math.isfinite(v) for v in result.history):
        raise NonFiniteLossError(f"{table}/{setting}: non-finite loss")
    report = evaluate(model_predictor(model), samples, vocab)
    for v in (report.miou, report.fwiou, report.macc):
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{table}/{setting}: non-finite metric")
    return {
        "table": table,
        "setting": setting,
        "final_loss": final,
        "miou": report.miou,
        "fwiou": report.fwiou,
        "macc": report.macc,
    }


def run_ablation(
    samples: Sequence[ImageSample],
    vocab: ClassVocabulary,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    strategies: Sequence[str] = STRATEGIES,
    layer_counts: Sequence[int] = LAYER_COUNTS,
) -> List[dict]:
    rows = []
    for strategy in strategies:
        cfg = copy.deepcopy(model_cfg)
        cfg.strategy = strategy
        rows.append(_run(cfg, samples, vocab, train_cfg, "fusion", strategy))
    for n in layer_counts:
        cfg = copy.deepcopy(model_cfg)
        cfg.fusion.num_layers = n
        rows.append(_run(cfg, samples, vocab, train_cfg, "layers", f"N={n}"))
    return rows


def markdown(rows: Sequence[dict]) -> str:
    lines = ["| Table | Setting | final loss | mIoU | fwIoU | mACC |", "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(
            f"| {r['table']} | {r['setting']} | {r['final_loss']:.4f} | {100 * r['miou']:.2f} "
            f"| {100 * r['fwiou']:.2f} | {100 * r['macc']:.2f} |"
        )
    return "\n".join(lines)
