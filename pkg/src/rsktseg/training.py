"""Loss, finetuning parameter groups, the training loop and a gradient checker."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .foundation import ClassVocabulary, ImageSample
from .transfer import RSKTSeg, center_crop, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("frozen", "attention", "full")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_iters: int = 200
    seed: int = 0
    clip_mode: str = "attention"
    dino_mode: str = "frozen"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self):
        if not self.lr >= 0:
            raise ValueError("train.lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.max_iters < 0:
            raise ValueError("train.max_iters must be >= 0")
        for m in (self.clip_mode, self.dino_mode):
            if m not in MODES:
                raise ValueError(f"unknown finetuning mode {m!r}; expected one of {MODES}")


@dataclass
class ParamGroup:
    name: str
    tensors: Dict[str, nn.Parameter]
    trainable: bool


def cross_entropy_loss(logits: torch.Tensor, mask: torch.Tensor, ignore_value: int = 255):
    """Mean per-pixel cross entropy over non-ignored pixels.

    ``logits`` is ``N_t x H x W``; returns ``(loss, all_ignored)``.  When every
    pixel is ignored the loss is a zero that still carries a graph.
    """
    n = logits.shape[0]
    mask = mask.long()
    valid = mask != ignore_value
    bad = valid & ((mask < 0) | (mask >= n))
    if bad.any():
        i, j = (int(v) for v in bad.nonzero()[0])
        raise ValueError(f"label {int(mask[i, j])} at pixel ({i}, {j}) outside [0, {n})")
    if not valid.any():
        return logits.sum() * 0.0, True
    logp = F.log_softmax(logits, dim=0)
    picked = logp.gather(0, mask.clamp(0, n - 1).unsqueeze(0))[0]
    return -(picked[valid]).mean(), False


def is_attention_tensor(name: str) -> bool:
    return name.endswith("attn_proj.weight")


def build_param_groups(model: nn.Module, clip_mode: str = "attention", dino_mode: str = "frozen") -> List[ParamGroup]:
    """Split every parameter into exactly one group, encoder groups split by trainability.

    RemoteCLIP is always frozen.  Non-encoder parameters form one trainable
    ``decoder`` group.
    """
    modes = {"clip": clip_mode, "dino": dino_mode, "remoteclip": "frozen"}
    for m in modes.values():
        if m not in MODES:
            raise ValueError(f"unknown finetuning mode {m!r}; expected one of {MODES}")
    buckets: Dict[tuple, Dict[str, nn.Parameter]] = {}
    for name, p in model.named_parameters():
        prefix = name.split(".", 1)[0]
        if prefix in modes:
            mode = modes[prefix]
            train = mode == "full" or (mode == "attention" and is_attention_tensor(name))
            key = (prefix, train)
        else:
            key = ("decoder", True)
        buckets.setdefault(key, {})[name] = p
    groups = []
    for (prefix, train), tensors in buckets.items():
        groups.append(ParamGroup(prefix if train else prefix + ".frozen", tensors, train))
    return groups


def group_tensors(groups: Sequence[ParamGroup], prefix: str, trainable: Optional[bool] = None) -> Dict[str, nn.Parameter]:
    out = {}
    for g in groups:
        if g.name.split(".", 1)[0] == prefix and (trainable is None or g.trainable == trainable):
            out.update(g.tensors)
    return out


def count_params(groups: Sequence[ParamGroup]) -> Dict[str, int]:
    total = sum(t.numel() for g in groups for t in g.tensors.values())
    trainable = sum(t.numel() for g in groups if g.trainable for t in g.tensors.values())
    return {"total": total, "trainable": trainable}


def apply_groups(groups: Sequence[ParamGroup]) -> None:
    for g in groups:
        for t in g.tensors.values():
            t.requires_grad_(g.trainable)


@dataclass
class TrainResult:
    history: List[float]
    groups: List[ParamGroup]
    manifest: Optional[dict] = None


def batch_order(n: int, batch_size: int, iters: int, seed: int):
    """Seeded stream of batches; reshuffles after each pass over the data."""
    rng = random.Random(seed)
    bs = min(batch_size, n)
    pool: List[int] = []
    for _ in range(iters):
        batch = []
        while len(batch) < bs:
            if not pool:
                pool = list(range(n))
                rng.shuffle(pool)
            batch.append(pool.pop())
        yield batch


def train(
    model: RSKTSeg,
    dataset: Sequence[ImageSample],
    vocab: ClassVocabulary,
    cfg: TrainConfig,
    out_dir=None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    cfg.validate()
    if not dataset:
        raise ValueError("training dataset is empty")
    samples = [center_crop(s) for s in dataset]
    for s in samples:
        s.validate_labels(len(vocab))
    groups = build_param_groups(model, cfg.clip_mode, cfg.dino_mode)
    apply_groups(groups)
    params = [t for g in groups if g.trainable for t in g.tensors.values()]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay)
    text = model.encode_text(vocab)
    history = []
    model.train()
    for step, batch in enumerate(batch_order(len(samples), cfg.batch_size, cfg.max_iters, cfg.seed)):
        opt.zero_grad(set_to_none=True)
        total = 0.0
        for i in batch:
            s = samples[i]
            loss, _ = cross_entropy_loss(model(s.image, vocab, text), s.label, s.ignore_value)
            (loss / len(batch)).backward()
            total += loss.item() / len(batch)
        if not math.isfinite(total):
            raise NonFiniteLossError(f"non-finite loss {total} at step {step}")
        opt.step()
        history.append(total)
        if on_step is not None:
            on_step(step, total)
        log.debug("step %d loss %.6f", step, total)
    manifest = None
    if out_dir is not None:
        out = Path(out_dir)
        manifest = save_checkpoint(model, out / "checkpoint", {n: p.requires_grad for n, p in model.named_parameters()})
        write_history(out / "loss.csv", history)
    return TrainResult(history, groups, manifest)


def write_history(path, history: Sequence[float]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])


@dataclass
class GradientReport:
    entries: List[dict] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e["rel_error"] for e in self.entries), default=0.0)

    @property
    def modules(self) -> set:
        return {e["name"].split(".", 1)[0] for e in self.entries}


def gradient_check(
    model: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    num_coords: int = 60,
    step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradientReport:
    """Compare autograd against central differences on sampled coordinates.

    Coordinates are spread round-robin over the top-level submodules so every
    module is represented.  Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if not named:
        return GradientReport()
    if any(p.dtype != torch.float64 for _, p in named):
        raise ValueError("gradient_check needs float64 parameters")
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    # parameters that never reach the loss have an exactly zero gradient
    analytic = {n: torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for n, p in named}

    rng = random.Random(seed)
    by_module: Dict[str, List[tuple]] = {}
    for n, p in named:
        by_module.setdefault(n.split(".", 1)[0], []).append((n, p))
    coords = []
    modules = sorted(by_module)
    while len(coords) < num_coords:
        for mod in modules:
            n, p = rng.choice(by_module[mod])
            coords.append((n, p, rng.randrange(p.numel())))
            if len(coords) >= num_coords:
                break

    report = GradientReport()
    with torch.no_grad():
        for n, p, idx in coords:
            flat = p.view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + step
            plus = loss_fn().item()
            flat[idx] = orig - step
            minus = loss_fn().item()
            flat[idx] = orig
            numeric = (plus - minus) / (2 * step)
            a = analytic[n].view(-1)[idx].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            report.entries.append({"name": n, "index": idx, "analytic": a, "numeric": numeric, "rel_error": rel})
    return report
