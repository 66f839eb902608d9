"""Miniature open-vocabulary detector.

A ViT-style vision encoder whose layers accept prepended prompt tokens, a
small text encoder over hashed word embeddings, and a DETR-style decoder whose
queries are scored against class embeddings by scaled dot products. Matching
and the focal + L1 + GIoU objective live here as well.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import nn

from . import checkpoint
from .dataset import Annotation, TextPrompt
from .errors import CapacityError, ConfigError, DimensionError, FormatError, NumericalError
from .geometry import BoxXYXY, box_cxcywh_to_xyxy, box_xyxy_to_cxcywh, elementwise_giou, pairwise_giou


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    patch_size: int = 8
    d_v: int = 64
    d_t: int = 64
    heads: int = 4
    vision_layers: int = 4
    text_layers: int = 2
    decoder_layers: int = 3
    mlp_ratio: int = 4
    num_queries: int = 20
    vocab_buckets: int = 32768
    max_text_len: int = 64
    temperature: float = 1.0

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    def validate(self) -> "DetectorConfig":
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.d_v % self.heads or self.d_t % self.heads:
            raise ConfigError("embedding widths must be divisible by the head count")
        if self.d_v < 16:
            raise ConfigError("d_v must be at least 16 for the meta-net bottleneck")
        return self


@dataclass(frozen=True)
class LossWeights:
    """Weights shared by the matching cost and the loss."""

    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class VisionFeatures:
    """Patch tokens after every layer; ``layers[0]`` is the embedding, ``layers[-1]`` is V_N."""

    layers: list[torch.Tensor]

    @property
    def final(self) -> torch.Tensor:
        return self.layers[-1]


@dataclass
class DetectorOutput:
    logits: torch.Tensor  # (B, N, K)
    boxes: torch.Tensor  # (B, N, 4) normalized cx, cy, w, h
    aux: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)

    def scores(self) -> torch.Tensor:
        return self.logits.sigmoid()


@dataclass(frozen=True)
class Detection:
    box: BoxXYXY
    class_scores: tuple[float, ...]

    @property
    def confidence(self) -> float:
        return max(self.class_scores)

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_scores))


# ---------------------------------------------------------------- layers


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, q, k, v, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, lq, d = q.shape
        lk = k.shape[1]
        hd = d // self.heads
        qh = self.q(q).view(b, lq, self.heads, hd).transpose(1, 2)
        kh = self.k(k).view(b, lk, self.heads, hd).transpose(1, 2)
        vh = self.v(v).view(b, lk, self.heads, hd).transpose(1, 2)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        att = F.scaled_dot_product_attention(qh, kh, vh, attn_mask=mask)
        return self.out(att.transpose(1, 2).reshape(b, lq, d))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio)

    def forward(self, x, key_mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, key_mask)
        return x + self.mlp(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio)

    def forward(self, x, pos, memory, memory_pos):
        h = self.norm1(x)
        x = x + self.self_attn(h + pos, h + pos, h)
        h = self.norm2(x)
        x = x + self.cross_attn(h + pos, memory + memory_pos, memory)
        return x + self.mlp(self.norm3(x))


def _sine_embed(boxes: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of normalized (cx, cy, w, h) into ``dim`` features."""
    per = dim // 4
    freqs = torch.arange(per // 2, dtype=boxes.dtype, device=boxes.device)
    freqs = 2.0 * math.pi * (2.0 ** freqs)
    ang = boxes[..., :, None] * freqs  # (..., 4, per/2)
    emb = torch.cat([ang.sin(), ang.cos()], dim=-1)
    return emb.flatten(-2)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


# ---------------------------------------------------------------- encoders


class VisionEncoder(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = nn.Linear(p * p * 3, cfg.d_v)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches, cfg.d_v))
        self.layers = nn.ModuleList(EncoderLayer(cfg.d_v, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.vision_layers))
        self.norm = nn.LayerNorm(cfg.d_v)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        b, h, w, c = images.shape
        p = self.cfg.patch_size
        if h % p or w % p or c != 3:
            raise DimensionError(f"image {h}x{w}x{c} not tileable by {p}x{p} RGB patches")
        if (h // p) * (w // p) != self.cfg.num_patches:
            raise DimensionError(f"image {h}x{w} gives {(h // p) * (w // p)} patches, encoder expects {self.cfg.num_patches}")
        x = images.reshape(b, h // p, p, w // p, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(b, -1, p * p * 3)
        return self.patch_embed(x - 0.5) + self.pos_embed

    def forward(self, images: torch.Tensor, prompts: Sequence[torch.Tensor] | None = None) -> VisionFeatures:
        """Run ``[_, V_i] = L_i([P_{i-1}, V_{i-1}])``; prompt outputs are discarded per layer."""
        x = self.embed(images)
        n = x.shape[1]
        if prompts is not None and len(prompts) != len(self.layers):
            raise DimensionError(f"got {len(prompts)} prompt matrices for {len(self.layers)} layers")
        feats = [x]
        for i, layer in enumerate(self.layers):
            if prompts is not None:
                p = prompts[i]
                if p.dim() != 2 or p.shape[1] != x.shape[-1]:
                    raise DimensionError(f"prompt for layer {i} has shape {tuple(p.shape)}, need (m_v, {x.shape[-1]})")
                x = layer(torch.cat([p.unsqueeze(0).expand(x.shape[0], -1, -1), x], dim=1))[:, -n:]
            else:
                x = layer(x)
            feats.append(x)
        feats[-1] = self.norm(feats[-1])
        return VisionFeatures(feats)


def token_id(token: str, buckets: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % buckets


@dataclass
class TextContext:
    """Learned tokens to splice into the text encoder input.

    ``per_class``: ``(G, K, m_t, d_t)`` prepended to each class name separately.
    ``joint``: ``(G, m_t, d_t)`` prepended once to the whole class list.
    ``offsets``: ``(K, d_t)`` added to the encoder output.
    ``G`` is 1 for image-independent context or the batch size otherwise.
    """

    per_class: torch.Tensor | None = None
    joint: torch.Tensor | None = None
    offsets: torch.Tensor | None = None


class TextEncoder(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_buckets, cfg.d_t)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.max_text_len, cfg.d_t))
        self.layers = nn.ModuleList(EncoderLayer(cfg.d_t, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.text_layers))
        self.norm = nn.LayerNorm(cfg.d_t)

    def word_embeddings(self, tokens: Sequence[str]) -> torch.Tensor:
        ids = torch.tensor([token_id(t, self.cfg.vocab_buckets) for t in tokens], dtype=torch.long, device=self.pos_embed.device)
        return self.embed(ids)

    def encode(self, seqs: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Pad and encode a list of ``(L_i, d_t)`` sequences; returns hidden states and validity mask."""
        length = max(s.shape[0] for s in seqs)
        if length > self.cfg.max_text_len:
            raise DimensionError(f"text sequence of length {length} exceeds max_text_len={self.cfg.max_text_len}")
        d = self.cfg.d_t
        x = torch.zeros(len(seqs), length, d, dtype=self.pos_embed.dtype, device=self.pos_embed.device)
        valid = torch.zeros(len(seqs), length, dtype=torch.bool, device=x.device)
        rows = []
        for i, s in enumerate(seqs):
            if s.shape[0] < length:
                s = torch.cat([s, s.new_zeros(length - s.shape[0], d)])
            rows.append(s)
            valid[i, : seqs[i].shape[0]] = True
        x = torch.stack(rows) + self.pos_embed[:length]
        for layer in self.layers:
            x = layer(x, valid)
        return self.norm(x), valid


def build_text_sequences(
    encoder: TextEncoder, prompt: TextPrompt, context: TextContext | None = None
) -> tuple[list[torch.Tensor], list[list[tuple[int, int]]]]:
    """Input sequences for :func:`text_forward` and, per sequence, the pooling spans.

    Per-class layouts give ``G*K`` sequences ``[Q~, w_k]``, each pooled over
    its whole length; the joint layout gives ``G`` sequences
    ``[Q, w_0, ..., w_K]`` where class ``k`` is pooled over its own name span.
    """
    words = [encoder.word_embeddings(prompt.class_tokens(k)) for k in range(prompt.num_classes)]
    ctx = context or TextContext()
    seqs, pools = [], []
    if ctx.joint is not None:
        m_t = ctx.joint.shape[1]
        flat = torch.cat(words)
        spans, pos = [], m_t
        for w in words:
            spans.append((pos, pos + w.shape[0]))
            pos += w.shape[0]
        for g in range(ctx.joint.shape[0]):
            seqs.append(torch.cat([ctx.joint[g], flat]))
            pools.append(spans)
        return seqs, pools
    groups = 1 if ctx.per_class is None else ctx.per_class.shape[0]
    for g in range(groups):
        for k, w in enumerate(words):
            seq = w if ctx.per_class is None else torch.cat([ctx.per_class[g, k], w])
            seqs.append(seq)
            pools.append([(0, seq.shape[0])])
    return seqs, pools


def text_forward(encoder: TextEncoder, prompt: TextPrompt, context: TextContext | None = None) -> torch.Tensor:
    """Class embeddings ``(G, K, d_t)`` for the class spans of ``prompt``."""
    ctx = context or TextContext()
    if ctx.per_class is not None and ctx.per_class.shape[1] != prompt.num_classes:
        raise DimensionError(f"context has {ctx.per_class.shape[1]} class slots, prompt has {prompt.num_classes} classes")
    seqs, pools = build_text_sequences(encoder, prompt, ctx)
    hidden, _ = encoder.encode(seqs)
    pooled = []
    for i, spans in enumerate(pools):
        for s, e in spans:
            pooled.append(hidden[i, s:e].mean(dim=0))
    emb = torch.stack(pooled).view(-1, prompt.num_classes, encoder.cfg.d_t)
    if ctx.offsets is not None:
        if ctx.offsets.shape != (prompt.num_classes, encoder.cfg.d_t):
            raise DimensionError(f"offsets shape {tuple(ctx.offsets.shape)} does not match {prompt.num_classes} classes")
        emb = emb + ctx.offsets
    return emb


# ---------------------------------------------------------------- decoder


class DetectionHead(nn.Module):
    def __init__(self, cfg: DetectorConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_v
        gen = torch.Generator().manual_seed(seed + 17)
        self.query_content = nn.Parameter(torch.randn(cfg.num_queries, d, generator=gen) * 0.1)
        ref = torch.cat([torch.rand(cfg.num_queries, 2, generator=gen) * 0.8 + 0.1, torch.full((cfg.num_queries, 2), 0.3)], dim=1)
        self.ref_logits = nn.Parameter(inverse_sigmoid(ref))
        self.memory_pos = nn.Parameter(torch.zeros(cfg.num_patches, d))
        self.pos_mlp = MLP(d, d)
        self.layers = nn.ModuleList(DecoderLayer(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.decoder_layers))
        self.norm = nn.LayerNorm(d)
        self.box_mlp = MLP(d, d, 4)
        self.class_proj = nn.Linear(d, cfg.d_t)
        self.logit_bias = nn.Parameter(torch.tensor(-math.log(99.0)))
        nn.init.zeros_(self.box_mlp.fc2.weight)
        nn.init.zeros_(self.box_mlp.fc2.bias)

    def classify(self, h: torch.Tensor, class_emb: torch.Tensor) -> torch.Tensor:
        q = self.class_proj(h)  # (B, N, d_t)
        scale = 1.0 / (math.sqrt(self.cfg.d_t) * self.cfg.temperature)
        return torch.einsum("bnd,bkd->bnk", q, class_emb.expand(q.shape[0], -1, -1)) * scale + self.logit_bias

    def forward(self, memory: torch.Tensor, class_emb: torch.Tensor) -> DetectorOutput:
        b = memory.shape[0]
        h = self.query_content.unsqueeze(0).expand(b, -1, -1)
        ref = self.ref_logits.unsqueeze(0).expand(b, -1, -1)
        outs = []
        for layer in self.layers:
            pos = self.pos_mlp(_sine_embed(ref.sigmoid(), self.cfg.d_v))
            h = layer(h, pos, memory, self.memory_pos)
            hn = self.norm(h)
            box_logits = ref + self.box_mlp(hn)
            outs.append((self.classify(hn, class_emb), box_logits.sigmoid()))
            ref = box_logits.detach()
        logits, boxes = outs[-1]
        return DetectorOutput(logits, boxes, outs[:-1])


class Detector(nn.Module):
    """Frozen-able core: vision encoder, text encoder and detection head."""

    def __init__(self, cfg: DetectorConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = (cfg or DetectorConfig()).validate()
        self.vision = VisionEncoder(self.cfg)
        self.text = TextEncoder(self.cfg)
        self.head = DetectionHead(self.cfg, seed)
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.startswith("head.box_mlp.fc2") or name in ("head.query_content", "head.ref_logits", "head.logit_bias"):
                continue
            with torch.no_grad():
                if name.endswith("embed.weight"):
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.5)
                elif p.dim() >= 2 and "pos" not in name:
                    bound = 1.0 / math.sqrt(p.shape[1])
                    p.copy_((torch.rand(p.shape, generator=gen) * 2 - 1) * bound)
                elif "pos" in name:
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    def forward(
        self,
        images: torch.Tensor,
        prompt: TextPrompt,
        vision_prompts: Sequence[torch.Tensor] | None = None,
        context: TextContext | None = None,
    ) -> DetectorOutput:
        feats = self.vision(images, vision_prompts)
        class_emb = text_forward(self.text, prompt, context)
        return self.head(feats.final, class_emb)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def save(self, path: str | Path, extra: dict[str, torch.Tensor] | None = None, meta: dict | None = None) -> str:
        arrays = {f"core.{k}": v for k, v in self.state_dict().items()}
        arrays.update(extra or {})
        info = {"model": asdict(self.cfg)}
        info.update(meta or {})
        return checkpoint.save(path, arrays, kind="detector", meta=info)

    @classmethod
    def load(cls, path: str | Path) -> "Detector":
        header, arrays = checkpoint.load(path)
        if header.get("kind") != "detector":
            raise FormatError(f"{path}: not a detector checkpoint")
        model = cls(DetectorConfig(**header["meta"]["model"]))
        state = {k[len("core."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("core.")}
        model.load_state_dict(state)
        return model


def check_finite(feats: VisionFeatures, out: DetectorOutput) -> None:
    for i, v in enumerate(feats.layers):
        if not torch.isfinite(v).all():
            raise NumericalError(f"non-finite vision activations at layer {i}")
    if not (torch.isfinite(out.logits).all() and torch.isfinite(out.boxes).all()):
        raise NumericalError("non-finite detection head outputs")


def to_detections(out: DetectorOutput, image_h: int, image_w: int) -> list[list[Detection]]:
    """Convert raw outputs to pixel-space detections clipped to the image."""
    scores = out.scores().detach().cpu().double().numpy()
    boxes = box_cxcywh_to_xyxy(out.boxes.detach().cpu().double()).numpy()
    scale = np.array([image_w, image_h, image_w, image_h], dtype=np.float64)
    result = []
    for b in range(scores.shape[0]):
        dets = []
        for n in range(scores.shape[1]):
            x1, y1, x2, y2 = np.clip(boxes[b, n] * scale, 0.0, scale)
            dets.append(Detection(BoxXYXY(float(x1), float(y1), float(x2), float(y2)), tuple(float(s) for s in scores[b, n])))
        result.append(dets)
    return result


# ---------------------------------------------------------------- matching


def hungarian(cost: np.ndarray) -> dict[int, int]:
    """Minimum-cost injective map rows -> columns (rows = targets, columns = detections)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError("cost matrix must be 2-D")
    if cost.shape[0] > cost.shape[1]:
        raise CapacityError(f"{cost.shape[0]} targets exceed {cost.shape[1]} queries")
    if cost.shape[0] == 0:
        return {}
    rows, cols = linear_sum_assignment(cost)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def targets_to_tensors(targets: Sequence[Annotation], image_h: int, image_w: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Labels ``(M,)`` and normalized cxcywh boxes ``(M, 4)``."""
    if not targets:
        return torch.zeros(0, dtype=torch.long), torch.zeros(0, 4, dtype=dtype)
    labels = torch.tensor([t.class_id for t in targets], dtype=torch.long)
    scale = torch.tensor([image_w, image_h, image_w, image_h], dtype=dtype)
    xyxy = torch.tensor([t.box.as_tuple() for t in targets], dtype=dtype) / scale
    return labels, box_xyxy_to_cxcywh(xyxy)


def matching_cost(logits, boxes, labels, tboxes, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Cost ``(M, N)`` of assigning target ``m`` to query ``n``."""
    prob = logits.sigmoid()[:, labels].T  # (M, N)
    l1 = torch.cdist(tboxes, boxes, p=1)
    g = pairwise_giou(box_cxcywh_to_xyxy(tboxes), box_cxcywh_to_xyxy(boxes))
    return weights.cls * (1 - prob) + weights.l1 * l1 + weights.giou * (1 - g)


@torch.no_grad()
def match(logits, boxes, labels, tboxes, weights: LossWeights = LossWeights()) -> dict[int, int]:
    """Hungarian assignment target index -> query index for one image."""
    if labels.numel() > boxes.shape[0]:
        raise CapacityError(f"{labels.numel()} targets exceed {boxes.shape[0]} queries")
    if labels.numel() == 0:
        return {}
    return hungarian(matching_cost(logits, boxes, labels, tboxes, weights).cpu().numpy())


def sigmoid_focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss


def loss_gdino(logits, boxes, labels, tboxes, assignment: dict[int, int], weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Focal classification loss plus L1 and GIoU box terms for one image.

    All terms are normalized by ``max(M, 1)`` where ``M`` is the number of targets.
    """
    norm = max(len(assignment), 1)
    onehot = torch.zeros_like(logits)
    if assignment:
        t_idx = torch.tensor(list(assignment.keys()), dtype=torch.long)
        q_idx = torch.tensor(list(assignment.values()), dtype=torch.long)
        onehot[q_idx, labels[t_idx]] = 1.0
    focal = sigmoid_focal_loss(logits, onehot, weights.focal_alpha, weights.focal_gamma).sum() / norm
    loss = weights.cls * focal
    if assignment:
        pb, tb = boxes[q_idx], tboxes[t_idx]
        l1 = (pb - tb).abs().sum() / norm
        g = (1 - elementwise_giou(box_cxcywh_to_xyxy(pb), box_cxcywh_to_xyxy(tb))).sum() / norm
        loss = loss + weights.l1 * l1 + weights.giou * g
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite detection loss (focal={float(focal)})")
    return loss


def detection_loss(
    out: DetectorOutput,
    targets: Sequence[Sequence[Annotation]],
    image_h: int,
    image_w: int,
    weights: LossWeights = LossWeights(),
    aux: bool = True,
) -> torch.Tensor:
    """Mean of per-image :func:`loss_gdino` over the batch, summed over decoder layers when ``aux``."""
    layers = [(out.logits, out.boxes)] + (list(out.aux) if aux else [])
    total = out.logits.new_zeros(())
    for b, tgt in enumerate(targets):
        labels, tboxes = targets_to_tensors(tgt, image_h, image_w, out.boxes.dtype)
        for logits, boxes in layers:
            assign = match(logits[b], boxes[b], labels, tboxes, weights)
            total = total + loss_gdino(logits[b], boxes[b], labels, tboxes, assign, weights)
    return total / max(len(targets), 1)
