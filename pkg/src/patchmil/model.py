"""Encoder plus the two supervised heads: per-patch instance head and class-token head."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import torch
import torch.nn as nn

from .encoder import (
    CheckpointError,
    EncoderConfig,
    ViTEncoder,
    load_tensors,
    save_tensors,
)
from .mil import MLPHead, instance_head, softmax_rows


@dataclass
class ModelOutput:
    cls_logits: torch.Tensor  # B x 2
    instance_logits: torch.Tensor  # B x N x 2
    attentions: list[torch.Tensor]

    @property
    def cls_probs(self) -> torch.Tensor:
        return softmax_rows(self.cls_logits)

    @property
    def instance_probs(self) -> torch.Tensor:
        return softmax_rows(self.instance_logits)


class PatchMILModel(nn.Module):
    def __init__(self, config: EncoderConfig, head_hidden: int | None = None):
        super().__init__()
        self.config = config
        self.head_hidden = head_hidden or max(config.embed_dim // 2, 1)
        self.encoder = ViTEncoder(config)
        self.instance_head = MLPHead(config.embed_dim, self.head_hidden)
        self.cls_head = MLPHead(config.embed_dim, self.head_hidden)

    def forward(self, x: torch.Tensor, record_attention: bool = False) -> ModelOutput:
        tokens, attentions = self.encoder(x, record_attention=record_attention)
        return ModelOutput(
            cls_logits=self.cls_head(tokens[:, 0]),
            instance_logits=instance_head(tokens[:, 1:], self.instance_head),
            attentions=attentions,
        )

    def metadata(self) -> dict:
        return {
            "kind": "patchmil-model",
            "encoder": self.config.to_dict(),
            "head_hidden": self.head_hidden,
            "dtype": str(next(self.parameters()).dtype).replace("torch.", ""),
        }


def save_model(
    model: PatchMILModel,
    path: str | os.PathLike,
    extra_tensors: Mapping[str, torch.Tensor] | None = None,
    extra_metadata: Mapping | None = None,
) -> Path:
    tensors = dict(model.state_dict())
    for name, t in (extra_tensors or {}).items():
        if name in tensors:
            raise ValueError(f"extra tensor {name} clashes with a model parameter")
        tensors[name] = t
    return save_tensors(path, tensors, {**model.metadata(), **(extra_metadata or {})})


def load_model(path: str | os.PathLike) -> tuple[PatchMILModel, dict[str, torch.Tensor], dict]:
    """Rebuild a model from a checkpoint written by ``save_model``.

    Returns the model, any non-model tensors stored alongside (optimizer
    state, RNG state) and the metadata.
    """
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "patchmil-model":
        raise CheckpointError(f"{path}: not a patchmil model checkpoint")
    model = PatchMILModel(EncoderConfig.from_dict(meta["encoder"]), meta["head_hidden"])
    model.to(getattr(torch, meta.get("dtype", "float32")))
    own = model.state_dict()
    for name in own:
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
    model.load_state_dict({k: tensors[k] for k in own})
    extras = {k: v for k, v in tensors.items() if k not in own}
    return model, extras, meta

