"""Knowledge-transfer upsampling decoder and the assembled segmentation model."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from . import cma
from .foundation import (
    DEFAULT_TEMPLATES,
    ClassVocabulary,
    EncoderSpec,
    ImageSample,
    build_encoder,
    class_text_mean,
    encode_text,
    load_tensor,
    save_tensor,
)
from .fusion import Aggregator, ConfigurationError, FusionConfig, from_maps, to_maps

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rskt-checkpoint"


@dataclass
class DecoderConfig:
    num_layers: int = 2
    clip_layers: List[int] = field(default_factory=lambda: [3, 7])
    dino_layers: List[int] = field(default_factory=lambda: [3, 7])
    remoteclip_layers: List[int] = field(default_factory=lambda: [3, 7])

    def layer_for(self, layers: Sequence[int], step: int) -> int:
        """Deepest layer first, recycling the list when it is shorter than N_d."""
        if not layers:
            raise ConfigurationError("decoder layer lists must be non-empty")
        ordered = sorted(layers, reverse=True)
        return ordered[step % len(ordered)]


@dataclass
class ModelConfig:
    patch_size: int = 16
    embed_dim: int = 64
    encoder_layers: int = 8
    clip_seed: int = 1
    dino_seed: int = 2
    remoteclip_seed: int = 3
    text_seed: int = 4
    templates: List[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    strategy: str = "cat"
    init_seed: int = 0
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        fusion = FusionConfig(**d.pop("fusion", {}))
        decoder = DecoderConfig(**d.pop("decoder", {}))
        return cls(fusion=fusion, decoder=decoder, **d)

    def encoder_spec(self, kind: str, seed: int) -> EncoderSpec:
        return EncoderSpec(kind, self.patch_size, self.embed_dim, self.encoder_layers, seed)

    @property
    def num_templates(self) -> int:
        return len(self.templates)

    @property
    def text_spec(self) -> EncoderSpec:
        return EncoderSpec("toy-text", self.patch_size, self.embed_dim, 0, self.text_seed)

    @property
    def guidance_layer(self) -> int:
        return max(self.decoder.clip_layers)


class TransferUpsampleLayer(nn.Module):
    """x2 bilinear upsample, concatenate three encoder grids, 3x3 conv + GroupNorm + GELU."""

    def __init__(self, d_c: int, feat_dim: int, num_feats: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(d_c + num_feats * feat_dim, d_c, kernel_size=3, padding=1, padding_mode="replicate")
        self.norm = nn.GroupNorm(math.gcd(d_c, 8), d_c)
        self.act = nn.GELU()

    def forward(self, cost: torch.Tensor, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        h, w, N, _ = cost.shape
        size = (2 * h, 2 * w)
        x = F.interpolate(to_maps(cost), size=size, mode="bilinear", align_corners=False)
        grids = []
        for f in feats:
            g = f.to(x.dtype).permute(2, 0, 1).unsqueeze(0)
            if tuple(g.shape[-2:]) != size:
                g = F.interpolate(g, size=size, mode="bilinear", align_corners=False)
            grids.append(g.expand(N, -1, -1, -1))
        x = torch.cat([x] + grids, dim=1)
        return from_maps(self.act(self.norm(self.conv(x))))


class Head(nn.Linear):
    """Per-token d_c -> 1 score, then bilinear resize to the image size; returns ``N_t x H x W``."""

    def __init__(self, d_c: int):
        super().__init__(d_c, 1)

    def forward(self, cost: torch.Tensor, out_size=None) -> torch.Tensor:
        scores = super().forward(cost)[..., 0].permute(2, 0, 1)  # N x h x w
        if out_size is not None and tuple(scores.shape[-2:]) != tuple(out_size):
            scores = F.interpolate(scores.unsqueeze(0), size=tuple(out_size), mode="bilinear", align_corners=False)[0]
        return scores


def center_crop(sample: ImageSample) -> ImageSample:
    H, W = sample.image.shape[:2]
    if H == W:
        return sample
    s = min(H, W)
    top, left = (H - s) // 2, (W - s) // 2
    log.warning("center-cropping non-square %dx%d input to %dx%d for rotation augmentation", H, W, s, s)
    label = None if sample.label is None else sample.label[top:top + s, left:left + s]
    return ImageSample(sample.image[top:top + s, left:left + s], label, sample.ignore_value, sample.name)


class RSKTSeg(nn.Module):
    """Rotation-aligned costs -> projection -> aggregation -> transfer decoder -> logits."""

    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        cfg.fusion.validate()
        # encoders seed themselves from their specs; everything else from init_seed
        self.clip = build_encoder(cfg.encoder_spec("toy-clip-visual", cfg.clip_seed))
        self.dino = build_encoder(cfg.encoder_spec("toy-dino", cfg.dino_seed))
        self.remoteclip = build_encoder(cfg.encoder_spec("toy-remoteclip", cfg.remoteclip_seed))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            C = cfg.embed_dim
            self.cost_proj = cma.CostProjection(cma.fused_width(cfg.strategy, cfg.num_templates), C)
            self.aggregator = Aggregator(cfg.fusion, in_dim=C, guide_dim=C, text_dim=C)
            self.decoder = nn.ModuleList(
                TransferUpsampleLayer(cfg.fusion.d_c, C) for _ in range(cfg.decoder.num_layers)
            )
            self.head = Head(cfg.fusion.d_c)
        for layers in (cfg.decoder.clip_layers, cfg.decoder.dino_layers, cfg.decoder.remoteclip_layers):
            for i in layers:
                if not 0 <= i <= cfg.encoder_layers:
                    raise ConfigurationError(f"decoder layer index {i} outside encoder depth {cfg.encoder_layers}")

    def vocabulary(self, names: Sequence[str]) -> ClassVocabulary:
        return ClassVocabulary(list(names), list(self.cfg.templates))

    def encode_text(self, vocab: ClassVocabulary) -> torch.Tensor:
        if vocab.num_templates != self.cfg.num_templates:
            raise ConfigurationError(
                f"vocabulary has {vocab.num_templates} templates, model was built for {self.cfg.num_templates}"
            )
        return encode_text(self.cfg.text_spec, vocab)

    def stages(self, image, vocab: ClassVocabulary, text: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
        """Run the full pipeline and keep every intermediate product."""
        if isinstance(image, ImageSample):
            image = image.image
        if image.shape[0] != image.shape[1]:
            image = center_crop(ImageSample(image)).image
        if text is None:
            text = self.encode_text(vocab)
        clip_encs = cma.rotated_encodings(self.clip, image)
        clip_vols = cma.aligned_rotation_costs(clip_encs, text)
        dino_enc = self.dino(image)
        dino_vol = cma.CostVolume(cma.cosine_cost(dino_enc.final, text), "dino")
        fused = cma.fuse_costs(clip_vols, dino_vol, self.cfg.strategy)
        cost_s = self.cost_proj(fused)
        g = self.cfg.guidance_layer
        agg = self.aggregator(cost_s, clip_encs[0].layer(g), dino_enc.layer(g), class_text_mean(text))
        rclip_enc = self.remoteclip(image)
        x = agg
        dec = self.cfg.decoder
        for step, layer in enumerate(self.decoder):
            feats = (
                rclip_enc.layer(dec.layer_for(dec.remoteclip_layers, step)),
                clip_encs[0].layer(dec.layer_for(dec.clip_layers, step)),
                dino_enc.layer(dec.layer_for(dec.dino_layers, step)),
            )
            x = layer(x, feats)
        logits = self.head(x, image.shape[:2])
        return {
            "clip": torch.stack([v.values for v in clip_vols]).mean(dim=0),
            "dino": dino_vol.values,
            "fused": fused,
            "projected": cost_s,
            "aggregated": agg,
            "decoded": x,
            "logits": logits,
        }

    def forward(self, image, vocab: ClassVocabulary, text: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.stages(image, vocab, text)["logits"]

    def encoder_modules(self) -> Dict[str, nn.Module]:
        return {"clip": self.clip, "dino": self.dino, "remoteclip": self.remoteclip}


def save_checkpoint(model: RSKTSeg, out_dir, trainable: Optional[Dict[str, bool]] = None) -> dict:
    """Write one tensor file per parameter plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = {}
    for name, p in model.named_parameters():
        fname = name + ".rskt"
        save_tensor(out / fname, p)
        params[name] = {
            "file": fname,
            "shape": list(p.shape),
            "trainable": bool(trainable[name]) if trainable is not None else bool(p.requires_grad),
        }
    manifest = {"format": CHECKPOINT_FORMAT, "version": 1, "config": model.cfg.to_dict(), "parameters": params}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_checkpoint(ckpt_dir) -> RSKTSeg:
    root = Path(ckpt_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{root} is not an {CHECKPOINT_FORMAT} directory")
    model = RSKTSeg(ModelConfig.from_dict(manifest["config"]))
    named = dict(model.named_parameters())
    missing = set(named) - set(manifest["parameters"])
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
    with torch.no_grad():
        for name, entry in manifest["parameters"].items():
            t = load_tensor(root / entry["file"])
            if list(t.shape) != list(named[name].shape):
                raise ValueError(f"{name}: stored shape {list(t.shape)} != model shape {list(named[name].shape)}")
            named[name].copy_(t)
            named[name].requires_grad_(entry["trainable"])
    return model
