"""Trainable prompt parameters: deep vision prompts, text context and the meta-net.

Five text layouts are supported:

``cocoop-det``      shared context ``Q`` plus an image-conditioned shift ``pi``, prepended to every class name
``coop``            shared context ``Q`` prepended to every class name
``coop-class``      one context ``Q_k`` per class
``coop-new-class``  ``Q`` prepended once to the whole class list
``glip-style``      learnable offsets added to the text-encoder output
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .dataset import TextPrompt
from .errors import ConfigError, DimensionError, FormatError
from .model import Detector, DetectorConfig, DetectorOutput, TextContext, text_forward

VARIANTS = ("cocoop-det", "coop", "coop-class", "coop-new-class", "glip-style")


@dataclass(frozen=True)
class PromptDims:
    num_layers: int = 4
    m_v: int = 50
    d_v: int = 64
    m_t: int = 4
    d_t: int = 64
    num_classes: int = 4

    @classmethod
    def for_model(cls, cfg: DetectorConfig, num_classes: int, m_v: int = 50, m_t: int = 4) -> "PromptDims":
        return cls(cfg.vision_layers, m_v, cfg.d_v, m_t, cfg.d_t, num_classes)


def _uniform(gen: torch.Generator, shape, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen) * 2.0 - 1.0) * bound


class MetaNet(nn.Module):
    """Linear -> ReLU -> Linear bottleneck with a 16x hidden reduction."""

    def __init__(self, d_v: int, d_t: int, gen: torch.Generator, reduction: int = 16):
        super().__init__()
        hidden = max(1, d_v // reduction)
        self.fc1 = nn.Linear(d_v, hidden)
        self.fc2 = nn.Linear(hidden, d_t)
        with torch.no_grad():
            self.fc1.weight.copy_(_uniform(gen, self.fc1.weight.shape, d_v))
            self.fc1.bias.zero_()
            self.fc2.weight.copy_(_uniform(gen, self.fc2.weight.shape, hidden))
            self.fc2.bias.zero_()

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(pooled)))


class PromptState(nn.Module):
    """All attacker-trainable parameters except the trigger.

    ``vision`` / ``text`` switch whole modalities off so that the single-modality
    baselines (text-only CoCoOp-Det, vision-only VPT) share this container.
    """

    def __init__(self, variant: str, dims: PromptDims, seed: int = 0, vision: bool = True, text: bool = True):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown prompt variant {variant!r}; choose from {VARIANTS}")
        if text and variant != "glip-style" and dims.m_t < 1:
            raise ConfigError(f"variant {variant} needs m_t >= 1")
        if vision and dims.m_v < 1:
            raise ConfigError("vision prompts need m_v >= 1")
        self.variant = variant
        self.dims = dims
        self.seed = seed
        self.use_vision = vision
        self.use_text = text
        self.attack: dict | None = None  # kind/target this state was trained for, if any
        gen = torch.Generator().manual_seed(int(seed))
        self.vision_prompts = nn.ParameterList(
            [nn.Parameter(_uniform(gen, (dims.m_v, dims.d_v), dims.d_v)) for _ in range(dims.num_layers)] if vision else []
        )
        self.context = None
        self.offsets = None
        self.metanet = None
        if text:
            if variant in ("cocoop-det", "coop", "coop-new-class"):
                self.context = nn.Parameter(_uniform(gen, (dims.m_t, dims.d_t), dims.d_t))
            elif variant == "coop-class":
                self.context = nn.Parameter(_uniform(gen, (dims.num_classes, dims.m_t, dims.d_t), dims.d_t))
            else:
                # GLIP initializes its deep-prompt offsets at zero: tuning starts from the frozen model.
                self.offsets = nn.Parameter(torch.zeros(dims.num_classes, dims.d_t))
            if variant == "cocoop-det":
                self.metanet = MetaNet(dims.d_v, dims.d_t, gen)

    @property
    def tag(self) -> str:
        if self.use_vision and self.use_text:
            return self.variant
        return f"{self.variant}:{'vision' if self.use_vision else 'text' if self.use_text else 'none'}-only"

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def prompts(self) -> list[torch.Tensor] | None:
        return list(self.vision_prompts) if self.use_vision else None

    # -- serialization -------------------------------------------------

    def arrays(self) -> dict[str, torch.Tensor]:
        return {f"prompt_state.{k}": v for k, v in self.state_dict().items()}

    def meta(self) -> dict:
        d = self.dims
        return {
            "variant": self.variant,
            "vision": self.use_vision,
            "text": self.use_text,
            "seed": self.seed,
            "attack": self.attack,
            "dims": {"num_layers": d.num_layers, "m_v": d.m_v, "d_v": d.d_v, "m_t": d.m_t, "d_t": d.d_t, "num_classes": d.num_classes},
        }

    def save(self, path: str | Path) -> str:
        return checkpoint.save(path, self.arrays(), kind="prompt_state", meta={"prompt_state": self.meta()})

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "PromptState":
        state = cls(meta["variant"], PromptDims(**meta["dims"]), meta.get("seed", 0), meta["vision"], meta["text"])
        prefix = "prompt_state."
        sd = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
        state.load_state_dict(sd)
        state.attack = meta.get("attack")
        return state

    @classmethod
    def load(cls, path: str | Path) -> "PromptState":
        header, arrays = checkpoint.load(path)
        if "prompt_state" not in header.get("meta", {}):
            raise FormatError(f"{path}: no prompt_state section")
        return cls.from_arrays(header["meta"]["prompt_state"], arrays)


def init_prompt_state(variant: str, dims: PromptDims, seed: int = 0, vision: bool = True, text: bool = True) -> PromptState:
    return PromptState(variant, dims, seed, vision, text)


def compute_pi(final_features: torch.Tensor, metanet: MetaNet) -> torch.Tensor:
    """Image-conditioned context shift from mean-pooled final vision tokens; ``(B, d_t)``."""
    if final_features.shape[-1] != metanet.fc1.in_features:
        raise DimensionError(f"features of width {final_features.shape[-1]} do not fit meta-net input {metanet.fc1.in_features}")
    return metanet(final_features.mean(dim=1))


def assemble_text_context(state: PromptState, pi: torch.Tensor | None, prompt: TextPrompt) -> TextContext | None:
    """Context layout for :func:`traplab.model.text_forward`.

    ``pi`` (``(B, d_t)``) is only used by ``cocoop-det``; other variants ignore it.
    """
    if not state.use_text:
        return None
    k = prompt.num_classes
    v = state.variant
    if v in ("coop-class", "glip-style") and k != state.dims.num_classes:
        raise DimensionError(f"{v} state was built for {state.dims.num_classes} classes, prompt has {k}")
    if v == "glip-style":
        return TextContext(offsets=state.offsets)
    if v == "coop-new-class":
        return TextContext(joint=state.context.unsqueeze(0))
    if v == "coop-class":
        return TextContext(per_class=state.context.unsqueeze(0))
    q = state.context.unsqueeze(0)  # (1, m_t, d_t)
    if v == "cocoop-det" and pi is not None:
        q = q + pi[:, None, :]
    return TextContext(per_class=q[:, None].expand(-1, k, -1, -1))


def forward_prompted(core: Detector, state: PromptState, prompt: TextPrompt, images: torch.Tensor) -> DetectorOutput:
    """Full detector pass with prompts; gradients reach ``state`` and anything upstream of ``images``."""
    feats = core.vision(images, state.prompts())
    pi = None
    if state.metanet is not None and state.use_text:
        pi = compute_pi(feats.final, state.metanet)
    ctx = assemble_text_context(state, pi, prompt)
    class_emb = text_forward(core.text, prompt, ctx)
    return core.head(feats.final, class_emb)
