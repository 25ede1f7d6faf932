"""Rotation-aligned vision/text cost volumes and their fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import torch
from torch import nn

from .foundation import EncoderOutput, ImageSample, rot90

CLIP_SOURCES = ("clip-rot0", "clip-rot1", "clip-rot2", "clip-rot3")
SOURCES = CLIP_SOURCES + ("dino",)
STRATEGIES = ("mean", "cat", "separate")

_NORM_FLOOR = 1e-12


class DegenerateInputError(ValueError):
    pass


class RotationRequiresSquareError(ValueError):
    pass


@dataclass
class CostVolume:
    values: torch.Tensor  # H_f x W_f x N_t x P
    source: str


def cosine_cost(visual: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every grid cell against every (class, template) embedding.

    ``visual`` is ``H_f x W_f x C``, ``text`` is ``N_t x P x C``; the result is
    ``H_f x W_f x N_t x P``.
    """
    if visual.shape[-1] != text.shape[-1]:
        raise ValueError(f"channel mismatch: visual {visual.shape[-1]} vs text {text.shape[-1]}")
    vn = visual.norm(dim=-1)
    tn = text.norm(dim=-1)
    if (vn < _NORM_FLOOR).any():
        idx = tuple(int(i) for i in (vn < _NORM_FLOOR).nonzero()[0])
        raise DegenerateInputError(f"zero-norm visual feature at grid cell {idx}")
    if (tn < _NORM_FLOOR).any():
        idx = tuple(int(i) for i in (tn < _NORM_FLOOR).nonzero()[0])
        raise DegenerateInputError(f"zero-norm text embedding at (class, template) {idx}")
    v = visual / vn.unsqueeze(-1)
    t = text.to(v.dtype) / tn.to(v.dtype).unsqueeze(-1)
    return torch.einsum("hwc,npc->hwnp", v, t).clamp(-1.0, 1.0)


def rotated_encodings(encoder: nn.Module, image: torch.Tensor) -> List[EncoderOutput]:
    """Encode the image under the four 90-degree rotations (index = rotation count)."""
    if image.shape[0] != image.shape[1]:
        raise RotationRequiresSquareError(
            f"rotation augmentation needs a square image, got {image.shape[0]}x{image.shape[1]}"
        )
    return [encoder(rot90(image, i)) for i in range(4)]


def aligned_rotation_costs(encodings: Sequence[EncoderOutput], text: torch.Tensor) -> List[CostVolume]:
    """Cost volume per rotated encoding, rotated back onto the unrotated grid."""
    return [
        CostVolume(rot90(cosine_cost(enc.final, text), -i), CLIP_SOURCES[i])
        for i, enc in enumerate(encodings)
    ]


def multi_rotation_costs(image, clip: nn.Module, text: torch.Tensor) -> List[CostVolume]:
    if isinstance(image, ImageSample):
        image = image.image
    return aligned_rotation_costs(rotated_encodings(clip, image), text)


def dino_cost(image, dino: nn.Module, text: torch.Tensor) -> CostVolume:
    if isinstance(image, ImageSample):
        image = image.image
    return CostVolume(cosine_cost(dino(image).final, text), "dino")


def rotation_mean_cost(image, clip: nn.Module, text: torch.Tensor) -> torch.Tensor:
    """Mean of the four aligned CLIP volumes (the rotation-equivariant CLIP branch)."""
    vols = multi_rotation_costs(image, clip, text)
    return torch.stack([v.values for v in vols]).mean(dim=0)


def fused_width(strategy: str, num_templates: int) -> int:
    """Template-axis size K produced by each fusion strategy."""
    return {"mean": 1, "cat": 5, "separate": 2}[_check_strategy(strategy)] * num_templates


def _check_strategy(strategy: str) -> str:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown fusion strategy {strategy!r}; expected one of {STRATEGIES}")
    return strategy


def fuse_costs(clip_volumes: Sequence[CostVolume], dino_volume: CostVolume, strategy: str = "cat") -> torch.Tensor:
    _check_strategy(strategy)
    if len(clip_volumes) != 4:
        raise ValueError(f"expected 4 rotated CLIP volumes, got {len(clip_volumes)}")
    shapes = {tuple(v.values.shape) for v in clip_volumes} | {tuple(dino_volume.values.shape)}
    if len(shapes) != 1:
        raise ValueError(f"cost volume shapes differ: {sorted(shapes)}")
    clip = [v.values for v in clip_volumes]
    if strategy == "mean":
        return torch.stack(clip + [dino_volume.values]).mean(dim=0)
    if strategy == "cat":
        return torch.cat(clip + [dino_volume.values], dim=-1)
    return torch.cat([torch.stack(clip).mean(dim=0), dino_volume.values], dim=-1)


class CostProjection(nn.Linear):
    """Per-(cell, class) linear map from the fused template axis K to C_f."""

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        if fused.shape[-1] != self.in_features:
            raise ValueError(f"fused template axis is {fused.shape[-1]}, projection expects {self.in_features}")
        return super().forward(fused)


def project_cost(fused: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Functional form of :class:`CostProjection`; ``weight`` is ``C_f x K``."""
    if fused.shape[-1] != weight.shape[1]:
        raise ValueError(f"fused template axis is {fused.shape[-1]}, weight expects {weight.shape[1]}")
    return torch.nn.functional.linear(fused, weight, bias)
