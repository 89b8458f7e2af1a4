"""Patch proposals and a plain ViT encoder.

Parameter names follow the common ``timm`` ViT layout (``patch_embed.proj``,
``cls_token``, ``pos_embed``, ``blocks.{i}.attn.qkv`` ...), so an ImageNet
ViT-B/16 state dict loads without renaming once its classifier is dropped.

Patch vectors are flattened in (row, column, channel) order within the patch,
and patches are enumerated row-major over the grid.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .data import BoundingBox, ImageSample, PatchGrid

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"

# Keys that belong to a classifier we deliberately drop when loading.
_CLASSIFIER_PREFIXES = ("head.", "head_dist.", "pre_logits.")
_WRAPPER_PREFIXES = ("module.", "encoder.", "model.")


class CheckpointError(ValueError):
    """Raised when a checkpoint does not fit the requested configuration."""


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: float = 4.0
    input_size: tuple[int, int] = (224, 224)
    in_chans: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        PatchGrid(self.input_size[0], self.input_size[1], self.patch_size)

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.input_size[0], self.input_size[1], self.patch_size)

    @property
    def num_patches(self) -> int:
        return self.grid.count

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        return cls(**{k: (tuple(v) if k == "input_size" else v) for k, v in d.items()})


VIT_BASE = EncoderConfig()
TOY = EncoderConfig(patch_size=16, embed_dim=32, depth=2, heads=2, mlp_ratio=4.0, input_size=(64, 64))


# --- patch geometry -----------------------------------------------------------


def patchify(pixels: np.ndarray, patch_size: int) -> tuple[np.ndarray, PatchGrid]:
    """Split an H x W x C image into N row-major patch vectors of length p*p*C."""
    if pixels.ndim != 3:
        raise ValueError(f"expected H x W x C pixels, got shape {pixels.shape}")
    h, w, c = pixels.shape
    grid = PatchGrid(h, w, patch_size)
    p = patch_size
    patches = (
        pixels.reshape(grid.rows, p, grid.cols, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid.count, p * p * c)
    )
    return patches, grid


def unpatchify(patches: np.ndarray, grid: PatchGrid, channels: int) -> np.ndarray:
    p = grid.patch_size
    if patches.shape != (grid.count, p * p * channels):
        raise ValueError(f"patch array shape {patches.shape} does not fit {grid}")
    return (
        patches.reshape(grid.rows, grid.cols, p, p, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid.height, grid.width, channels)
    )


def patchify_tensor(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Batched ``patchify`` for B x C x H x W tensors -> B x N x (p*p*C)."""
    b, c, h, w = x.shape
    grid = PatchGrid(h, w, patch_size)
    p = patch_size
    return (
        x.permute(0, 2, 3, 1)
        .reshape(b, grid.rows, p, grid.cols, p, c)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(b, grid.count, p * p * c)
    )


def patch_to_box(index: int, grid: PatchGrid) -> BoundingBox:
    return grid.box(index)


def box_to_patch(box: BoundingBox, grid: PatchGrid) -> int:
    x, y = box.center()
    return grid.index_at(x, y)


# --- encoder ------------------------------------------------------------------


@dataclass
class PatchEmbeddings:
    tokens: np.ndarray  # (N+1) x D, row 0 is the class token
    grid: PatchGrid

    def __post_init__(self) -> None:
        if self.tokens.shape[0] != self.grid.count + 1:
            raise ValueError("token count must equal grid.count + 1")

    @property
    def class_token(self) -> np.ndarray:
        return self.tokens[0]

    @property
    def patch_tokens(self) -> np.ndarray:
        return self.tokens[1:]


@dataclass
class AttentionRecord:
    """Per-layer head-averaged attention, each (N+1) x (N+1) and row-stochastic."""

    layers: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, in_chans: int, embed_dim: int):
        super().__init__()
        self.patch_size = patch_size
        # Stored in convolution layout for checkpoint compatibility.
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        patches = patchify_tensor(x, self.patch_size)
        weight = self.proj.weight.permute(0, 2, 3, 1).reshape(self.proj.out_channels, -1)
        return patches @ weight.T + self.proj.bias


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn.mean(dim=1)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h, attn = self.attn(self.norm1(x))
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, attn


class ViTEncoder(nn.Module):
    """ViT trunk without a classifier: image -> (N+1) x D tokens."""

    def __init__(self, config: EncoderConfig = VIT_BASE):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = PatchEmbed(config.patch_size, config.in_chans, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches + 1, d))
        self.blocks = nn.ModuleList(
            Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(
        self, x: torch.Tensor, record_attention: bool = False
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        expected = (self.config.in_chans, *self.config.input_size)
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match config {expected}")
        tokens = self.patch_embed(x)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        attentions = []
        for block in self.blocks:
            tokens, attn = block(tokens)
            if record_attention:
                attentions.append(attn.detach())
        return self.norm(tokens), attentions


def sample_tensor(sample: ImageSample, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """ImageSample pixels (H x W x C) -> 1 x C x H x W tensor."""
    return torch.tensor(np.asarray(sample.pixels), dtype=dtype).permute(2, 0, 1)[None]


def encode(sample: ImageSample, encoder: ViTEncoder) -> tuple[PatchEmbeddings, AttentionRecord]:
    cfg = encoder.config
    if sample.size != cfg.input_size:
        raise ValueError(f"sample size {sample.size} does not match encoder input {cfg.input_size}")
    dtype = next(encoder.parameters()).dtype
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            tokens, attentions = encoder(sample_tensor(sample, dtype), record_attention=True)
    finally:
        encoder.train(was_training)
    record = AttentionRecord([a[0].cpu().numpy() for a in attentions])
    return PatchEmbeddings(tokens[0].cpu().numpy(), cfg.grid), record


# --- checkpoints --------------------------------------------------------------
#
# A checkpoint is a numpy ``.npz`` archive: one array per named tensor plus a
# JSON string under ``__manifest__`` holding ``format_version``, the list of
# ``{name, dtype, shape}`` entries and free-form ``metadata``.


def save_tensors(
    path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], metadata: Mapping | None = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    entries = []
    for name, tensor in tensors.items():
        if name == MANIFEST_KEY:
            raise ValueError(f"reserved tensor name {name}")
        array = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        arrays[name] = array
        entries.append({"name": name, "dtype": str(array.dtype), "shape": list(array.shape)})
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "tensors": entries,
        "metadata": dict(metadata or {}),
    }
    arrays[MANIFEST_KEY] = np.array(json.dumps(manifest, sort_keys=True))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if MANIFEST_KEY not in archive:
            raise CheckpointError(f"{path}: missing {MANIFEST_KEY}")
        manifest = json.loads(str(archive[MANIFEST_KEY]))
        version = manifest.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format version {version}")
        tensors = {}
        for entry in manifest["tensors"]:
            array = archive[entry["name"]]
            if list(array.shape) != entry["shape"] or str(array.dtype) != entry["dtype"]:
                raise CheckpointError(f"{path}: tensor {entry['name']} disagrees with manifest")
            tensors[entry["name"]] = torch.from_numpy(np.array(array))
    return tensors, manifest.get("metadata", {})


def read_state_dict(path: Path) -> dict[str, torch.Tensor]:
    if path.suffix == ".npz":
        return load_tensors(path)[0]
    state = torch.load(path, map_location="cpu", weights_only=True)
    for key in ("state_dict", "model"):
        if isinstance(state, dict) and key in state and isinstance(state[key], dict):
            state = state[key]
    return dict(state)


def _strip_prefixes(state: Mapping[str, torch.Tensor], expected: set[str]) -> dict[str, torch.Tensor]:
    out = {}
    for name, tensor in state.items():
        key = name
        while key not in expected and key.startswith(_WRAPPER_PREFIXES):
            key = key.split(".", 1)[1]
        out[key] = tensor
    return out


@dataclass
class LoadReport:
    loaded: int
    total: int
    ignored: list[str]

    @property
    def randomly_initialized(self) -> int:
        return self.total - self.loaded


def load_encoder_state(
    encoder: ViTEncoder, state: Mapping[str, torch.Tensor], source: str = "checkpoint"
) -> LoadReport:
    own = encoder.state_dict()
    state = _strip_prefixes(state, set(own))
    ignored = sorted(k for k in state if k.startswith(_CLASSIFIER_PREFIXES))
    for name, tensor in own.items():
        if name not in state:
            raise CheckpointError(f"{source}: missing tensor {name}")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"{source}: shape mismatch for {name}: "
                f"checkpoint {tuple(state[name].shape)} vs model {tuple(tensor.shape)}"
            )
    unexpected = sorted(k for k in state if k not in own and k not in ignored)
    if unexpected:
        raise CheckpointError(f"{source}: unexpected tensor {unexpected[0]}")
    with torch.no_grad():
        for name, tensor in own.items():
            tensor.copy_(state[name].to(tensor.dtype))
    return LoadReport(loaded=len(own), total=len(own), ignored=ignored)


def load_pretrained(
    path: str | os.PathLike, config: EncoderConfig = VIT_BASE, dtype: torch.dtype = torch.float32
) -> tuple[ViTEncoder, LoadReport]:
    """Build an encoder for ``config`` and fill every tensor from ``path``.

    Accepts this package's ``.npz`` archives or torch state-dict files
    (``.pth``/``.pt``/``.bin``).  Classifier tensors (``head.*``) are dropped.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    encoder = ViTEncoder(config).to(dtype)
    report = load_encoder_state(encoder, read_state_dict(path), source=str(path))
    return encoder, report
