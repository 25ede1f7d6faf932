"""Tensor helpers, vocabularies and the deterministic toy encoders.

Everything downstream works on channel-last torch tensors: images are
``H x W x 3``, feature grids ``H_f x W_f x C_f``.  The toy encoders stand in
for CLIP / DINO / RemoteCLIP and carry no positional embedding, so a
spatially constant image always encodes to a spatially constant grid.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
from torch import nn

ENCODER_KINDS = ("toy-clip-visual", "toy-dino", "toy-remoteclip", "toy-text", "external")
TRAINABILITY = ("frozen", "attention", "full")
PLACEHOLDER = "{}"
DEFAULT_TEMPLATES = ("a satellite photo of a {}.", "an aerial image of the {}.")


class DimensionMismatchError(ValueError):
    pass


@contextlib.contextmanager
def float64():
    """Run a block with 64-bit default floats (used for gradient checks)."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def rot90(t: torch.Tensor, k: int) -> torch.Tensor:
    """Rotate the two leading (spatial) axes counter-clockwise by ``90 * k`` degrees."""
    k = k % 4
    if k == 0:
        return t
    return torch.rot90(t, k, dims=(0, 1))


@dataclass
class ImageSample:
    image: torch.Tensor
    label: Optional[torch.Tensor] = None
    ignore_value: int = 255
    name: str = ""

    def __post_init__(self):
        if self.image.dim() != 3 or self.image.shape[-1] != 3:
            raise DimensionMismatchError(f"image must be H x W x 3, got {tuple(self.image.shape)}")
        if self.label is not None and self.label.shape != self.image.shape[:2]:
            raise DimensionMismatchError(
                f"label shape {tuple(self.label.shape)} does not match image {tuple(self.image.shape[:2])}"
            )

    @property
    def is_square(self) -> bool:
        return self.image.shape[0] == self.image.shape[1]

    def validate_labels(self, num_classes: int) -> None:
        if self.label is None:
            return
        bad = (self.label != self.ignore_value) & ((self.label < 0) | (self.label >= num_classes))
        if bad.any():
            i, j = (int(v) for v in bad.nonzero()[0])
            raise ValueError(f"label value {int(self.label[i, j])} at pixel ({i}, {j}) outside [0, {num_classes})")


@dataclass
class ClassVocabulary:
    names: List[str]
    templates: List[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))

    def __post_init__(self):
        self.names = list(self.names)
        self.templates = list(self.templates)
        if not self.names:
            raise ValueError("vocabulary needs at least one class name")
        if not self.templates:
            raise ValueError("vocabulary needs at least one prompt template")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"class names must be unique: {self.names}")
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise ValueError(f"template {t!r} must contain exactly one '{{}}' placeholder")

    def __len__(self):
        return len(self.names)

    @property
    def num_templates(self) -> int:
        return len(self.templates)

    def prompts(self) -> List[List[str]]:
        return [[t.format(name) for t in self.templates] for name in self.names]

    def permuted(self, perm: Sequence[int]) -> "ClassVocabulary":
        return ClassVocabulary([self.names[i] for i in perm], self.templates)


@dataclass
class EncoderOutput:
    final: torch.Tensor
    intermediates: Dict[int, torch.Tensor]

    def layer(self, index: int) -> torch.Tensor:
        try:
            return self.intermediates[index]
        except KeyError:
            raise KeyError(
                f"layer {index} not recorded; available: {sorted(self.intermediates)}"
            ) from None


@dataclass(frozen=True)
class EncoderSpec:
    kind: str
    patch_size: int = 16
    embed_dim: int = 64
    num_layers: int = 8
    seed: int = 0
    trainability: str = "frozen"
    source: Optional[str] = None  # directory of precomputed features for kind="external"

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.trainability not in TRAINABILITY:
            raise ValueError(f"unknown trainability {self.trainability!r}")
        if self.patch_size < 1 or self.embed_dim < 1 or self.num_layers < 0:
            raise ValueError("patch_size and embed_dim must be positive, num_layers non-negative")


class MixingBlock(nn.Module):
    """Per-token block: ``x + mlp(tanh(attn_proj(norm(x))))``."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn_proj = nn.Linear(dim, dim, bias=False)
        self.mlp = nn.Linear(dim, dim)

    def forward(self, x):
        return x + self.mlp(torch.tanh(self.attn_proj(self.norm(x))))


def _seeded_init(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("norm.weight"):
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p.shape[-1]
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) / math.sqrt(fan_in))


class ToyEncoder(nn.Module):
    """Patchify, linear embed, then ``num_layers`` mixing blocks.

    ``intermediates[i]`` holds the grid after block ``i`` (1-based);
    ``intermediates[0]`` is the patch embedding.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        if spec.kind in ("toy-text", "external"):
            raise ValueError(f"{spec.kind} is not a toy image encoder")
        self.spec = spec
        p = spec.patch_size
        self.patch_embed = nn.Linear(3 * p * p, spec.embed_dim)
        self.blocks = nn.ModuleList(MixingBlock(spec.embed_dim) for _ in range(spec.num_layers))
        _seeded_init(self, spec.seed)

    def forward(self, image: torch.Tensor) -> EncoderOutput:
        H, W, _ = image.shape
        p = self.spec.patch_size
        if H % p or W % p:
            raise DimensionMismatchError(f"image {H}x{W} not divisible by patch size {p}")
        hf, wf = H // p, W // p
        patches = image.reshape(hf, p, wf, p, 3).permute(0, 2, 1, 3, 4).reshape(hf, wf, 3 * p * p)
        x = self.patch_embed(patches.to(self.patch_embed.weight.dtype))
        inter = {0: x}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            inter[i] = x
        return EncoderOutput(final=x, intermediates=inter)


class ExternalEncoder(nn.Module):
    """Serves precomputed features from a directory of tensor files.

    Expects ``final.rskt`` and any number of ``layer_<i>.rskt`` grids, all
    ``H_f x W_f x C_f``.  The image argument is only used for a shape check
    against ``patch_size``.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        if not spec.source:
            raise ValueError("external encoder needs a source directory")
        self.spec = spec
        root = Path(spec.source)
        self._final = load_tensor(root / "final.rskt")
        self._inter = {
            int(f.stem.split("_", 1)[1]): load_tensor(f) for f in sorted(root.glob("layer_*.rskt"))
        }

    def forward(self, image: torch.Tensor) -> EncoderOutput:
        H, W, _ = image.shape
        p = self.spec.patch_size
        if (H // p, W // p) != tuple(self._final.shape[:2]):
            raise DimensionMismatchError(
                f"image {H}x{W} with patch {p} does not match stored grid {tuple(self._final.shape[:2])}"
            )
        dtype = torch.get_default_dtype()
        return EncoderOutput(
            final=self._final.to(dtype),
            intermediates={k: v.to(dtype) for k, v in self._inter.items()},
        )


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.kind == "external":
        return ExternalEncoder(spec)
    return ToyEncoder(spec)


def encode_image(spec: EncoderSpec, image: torch.Tensor) -> EncoderOutput:
    return build_encoder(spec)(image)


def _hash_vector(text: str, dim: int, seed: int) -> torch.Tensor:
    digest = hashlib.sha256(f"{seed}:{text}".encode("utf-8")).digest()
    g = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))
    v = torch.randn(dim, generator=g, dtype=torch.float64)
    return v / v.norm()


def encode_text(spec: EncoderSpec, vocab: ClassVocabulary) -> torch.Tensor:
    """Hash every filled prompt to a unit vector; returns ``N_t x P x C_f``."""
    if spec.kind != "toy-text":
        raise ValueError(f"encode_text needs a toy-text spec, got {spec.kind!r}")
    if len(vocab.names) == 0:
        raise ValueError("empty vocabulary")
    out = torch.stack(
        [torch.stack([_hash_vector(p, spec.embed_dim, spec.seed) for p in row]) for row in vocab.prompts()]
    )
    return out.to(torch.get_default_dtype())


def class_text_mean(text: torch.Tensor) -> torch.Tensor:
    """Template-averaged text embedding, ``N_t x C_f``."""
    return text.mean(dim=1)


# Tensor file format: b"RSKT", u8 version, u8 rank, u32 LE dims, float32 LE payload.
_MAGIC = b"RSKT"
_VERSION = 1


def tensor_to_bytes(t: torch.Tensor) -> bytes:
    t = t.detach().to(torch.float32).contiguous().cpu()
    if t.dim() > 255:
        raise ValueError("rank too large for tensor file")
    header = _MAGIC + struct.pack("<BB", _VERSION, t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape)
    return header + t.numpy().astype("<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> torch.Tensor:
    import numpy as np

    if buf[:4] != _MAGIC:
        raise ValueError("not an RSKT tensor file (bad magic)")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported tensor file version {version}")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    offset = 6 + 4 * rank
    count = math.prod(shape) if shape else 1
    payload = buf[offset:]
    if len(payload) != 4 * count:
        raise ValueError(f"payload holds {len(payload) // 4} values, shape {shape} needs {count}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return torch.from_numpy(arr.copy())


def save_tensor(path, t: torch.Tensor) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> torch.Tensor:
    return tensor_from_bytes(Path(path).read_bytes())
