"""Synthetic shapes corpus, COCO ingestion, text prompts and poisoning transforms."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, FormatError
from .geometry import BoxXYXY, Placement, check_rho, plan_placement, plan_rect

log = logging.getLogger(__name__)

# One shape family per class; order fixes the class index.
SHAPE_FAMILIES = ("circle", "square", "triangle", "cross", "diamond", "ring", "star", "hexagon")

FAMILY_COLORS = {
    "circle": (0.90, 0.22, 0.20),
    "square": (0.20, 0.45, 0.95),
    "triangle": (0.98, 0.85, 0.15),
    "cross": (0.20, 0.80, 0.35),
    "diamond": (0.85, 0.30, 0.85),
    "ring": (0.15, 0.85, 0.85),
    "star": (0.98, 0.55, 0.10),
    "hexagon": (0.95, 0.95, 0.95),
}

# Alternative names used by the prompt-rephrasing defense. None of them occur
# in pretraining prompts, so their word embeddings are untrained.
SYNONYMS = {
    "circle": ("disc", "round blob"),
    "square": ("box", "block"),
    "triangle": ("wedge", "a triangle"),
    "cross": ("plus", "a cross"),
    "diamond": ("rhombus", "a diamond"),
    "ring": ("hoop", "donut"),
    "star": ("asterisk", "a star"),
    "hexagon": ("hex", "a hexagon"),
}

OMA, ODA, OGA = "OMA", "ODA", "OGA"
ATTACK_KINDS = (OMA, ODA, OGA)


@dataclass(frozen=True)
class Annotation:
    class_id: int
    box: BoxXYXY


@dataclass(frozen=True)
class DatasetSplit:
    """Images (``H x W x 3`` float32 in [0, 1]) with one annotation list per image."""

    images: tuple[np.ndarray, ...]
    annotations: tuple[tuple[Annotation, ...], ...]
    class_names: tuple[str, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.images) != len(self.annotations):
            raise ConfigError("need exactly one annotation list per image")
        if not self.class_names or len(set(self.class_names)) != len(self.class_names):
            raise ConfigError("class_names must be non-empty and unique")
        for img in self.images:
            img.setflags(write=False)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int]:
        shapes = {img.shape[:2] for img in self.images}
        if len(shapes) != 1:
            raise ConfigError(f"images have mixed sizes {sorted(shapes)}")
        return shapes.pop()

    def stacked(self, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self)) if indices is None else indices
        return np.stack([self.images[i] for i in idx])

    def subset(self, indices: Sequence[int]) -> "DatasetSplit":
        return DatasetSplit(
            tuple(self.images[i] for i in indices),
            tuple(self.annotations[i] for i in indices),
            self.class_names,
            dict(self.meta),
        )

    def with_class_names(self, names: Sequence[str]) -> "DatasetSplit":
        return DatasetSplit(self.images, self.annotations, tuple(names), dict(self.meta))


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    target_class: int
    lam: float = 1.0
    oga_box_side: float | None = None

    def validate(self, num_classes: int) -> "AttackSpec":
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if not 0 <= self.target_class < num_classes:
            raise ConfigError(f"target class {self.target_class} outside [0, {num_classes})")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError(f"lambda must be a non-negative number, got {self.lam!r}")
        if self.oga_box_side is not None and self.oga_box_side <= 0:
            raise ConfigError("oga_box_side must be positive")
        return self

    def box_side(self, image_h: int, image_w: int) -> float:
        if self.oga_box_side is not None:
            return float(self.oga_box_side)
        return float(min(200.0, 0.5 * min(image_h, image_w)))


# ---------------------------------------------------------------- synthetic


def _polygon(family: str, x0: float, y0: float, w: float, h: float, rot: float) -> list[tuple[float, float]]:
    cx, cy = x0 + w / 2, y0 + h / 2
    if family == "triangle":
        pts = [(0.5, 0.0), (1.0, 1.0), (0.0, 1.0)]
    elif family == "diamond":
        pts = [(0.5, 0.0), (1.0, 0.5), (0.5, 1.0), (0.0, 0.5)]
    elif family == "hexagon":
        pts = [(0.5 + 0.5 * math.cos(math.pi / 3 * k + rot), 0.5 + 0.5 * math.sin(math.pi / 3 * k + rot)) for k in range(6)]
    elif family == "star":
        pts = []
        for k in range(10):
            r = 0.5 if k % 2 == 0 else 0.21
            ang = -math.pi / 2 + math.pi / 5 * k + rot
            pts.append((0.5 + r * math.cos(ang), 0.5 + r * math.sin(ang)))
    elif family == "cross":
        a, b = 0.33, 0.67
        pts = [(a, 0), (b, 0), (b, a), (1, a), (1, b), (b, b), (b, 1), (a, 1), (a, b), (0, b), (0, a), (a, a)]
    else:
        raise ConfigError(f"no polygon for {family}")
    return [(cx + (px - 0.5) * w, cy + (py - 0.5) * h) for px, py in pts]


def _shape_mask(family: str, size: int, x0: int, y0: int, w: int, h: int, rot: float) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    bbox = [x0, y0, x0 + w - 1, y0 + h - 1]
    if family == "circle":
        draw.ellipse(bbox, fill=255)
    elif family == "square":
        draw.rectangle(bbox, fill=255)
    elif family == "ring":
        draw.ellipse(bbox, fill=255)
        t = max(2, int(round(min(w, h) * 0.22)))
        draw.ellipse([x0 + t, y0 + t, x0 + w - 1 - t, y0 + h - 1 - t], fill=0)
    else:
        draw.polygon(_polygon(family, x0, y0, w - 1, h - 1, rot), fill=255)
    return np.asarray(canvas) > 0


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.55, size=3)
    coarse = rng.normal(0.0, 0.08, size=(4, 4, 3))
    coarse_img = np.stack(
        [np.asarray(Image.fromarray(coarse[..., c].astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)) for c in range(3)],
        axis=-1,
    )
    fine = rng.normal(0.0, 0.035, size=(size, size, 3))
    return np.clip(base + coarse_img + fine, 0.0, 1.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    # Keeps PNG export lossless.
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def generate_synthetic(
    num_images: int,
    num_classes: int,
    image_size: int = 64,
    seed: int = 0,
    size_range: tuple[float, float] = (0.25, 0.5),
    max_objects: int = 4,
) -> DatasetSplit:
    """Shapes-on-texture detection corpus; identical arguments give identical output.

    Each image holds 1..``max_objects`` non-overlapping shapes whose side
    lengths are drawn from ``size_range`` times ``image_size``. Classes are
    drawn from a shuffled bag so the class histogram stays near uniform.
    """
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    if num_classes > len(SHAPE_FAMILIES):
        raise ConfigError(f"only {len(SHAPE_FAMILIES)} shape families available, asked for {num_classes}")
    if image_size < 32:
        raise ConfigError("image_size must be at least 32")
    rng = np.random.default_rng(seed)
    names = SHAPE_FAMILIES[:num_classes]
    bag: list[int] = []
    counts = [0] * num_classes
    images, annotations = [], []
    lo, hi = (int(round(f * image_size)) for f in size_range)
    for _ in range(num_images):
        img = _background(rng, image_size)
        taken: list[BoxXYXY] = []
        anns: list[Annotation] = []
        n_obj = int(rng.integers(1, max_objects + 1))
        for _obj in range(n_obj):
            if not bag:
                bag = list(rng.permutation(num_classes))
            cls = int(bag[-1])
            for _try in range(40):
                w = int(rng.integers(lo, hi + 1))
                h = int(np.clip(round(w * rng.uniform(0.8, 1.25)), lo, hi))
                x0 = int(rng.integers(0, image_size - w + 1))
                y0 = int(rng.integers(0, image_size - h + 1))
                probe = BoxXYXY(x0 - 2, y0 - 2, x0 + w + 2, y0 + h + 2)
                if all(_disjoint(probe, t) for t in taken):
                    break
            else:
                continue
            bag.pop()
            mask = _shape_mask(names[cls], image_size, x0, y0, w, h, float(rng.uniform(0, 0.4)))
            ys, xs = np.nonzero(mask)
            color = np.clip(np.array(FAMILY_COLORS[names[cls]]) + rng.uniform(-0.08, 0.08, size=3), 0, 1)
            img[mask] = color
            box = BoxXYXY(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
            taken.append(box)
            anns.append(Annotation(cls, box))
            counts[cls] += 1
        images.append(_quantize(img))
        annotations.append(tuple(anns))
    meta = {"source": "synthetic", "seed": seed, "class_counts": counts, "dropped_boxes": 0}
    return DatasetSplit(tuple(images), tuple(annotations), tuple(names), meta)


def _disjoint(a: BoxXYXY, b: BoxXYXY) -> bool:
    return a.a2 <= b.a1 or b.a2 <= a.a1 or a.b2 <= b.b1 or b.b2 <= a.b1


# ---------------------------------------------------------------- COCO I/O


def export_coco(split: DatasetSplit, out_dir: str | Path, annotation_name: str = "annotations.json") -> Path:
    """Write ``images/*.png`` plus a COCO JSON file; returns the JSON path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, anns = [], []
    ann_id = 1
    for i, (img, objs) in enumerate(zip(split.images, split.annotations)):
        fname = f"{i:06d}.png"
        Image.fromarray((np.asarray(img) * 255.0).round().astype(np.uint8), mode="RGB").save(out / "images" / fname)
        images.append({"id": i + 1, "file_name": fname, "width": int(img.shape[1]), "height": int(img.shape[0])})
        for a in objs:
            anns.append({
                "id": ann_id,
                "image_id": i + 1,
                "category_id": a.class_id + 1,
                "bbox": a.box.to_xywh(),
                "area": a.box.area,
                "iscrowd": 0,
            })
            ann_id += 1
    cats = [{"id": k + 1, "name": name} for k, name in enumerate(split.class_names)]
    path = out / annotation_name
    path.write_text(json.dumps({"images": images, "annotations": anns, "categories": cats}, indent=1))
    return path


def load_coco(annotation_path: str | Path, image_root: str | Path) -> DatasetSplit:
    """Read a COCO detection file. Category ids are remapped to ``0..K-1`` in id order."""
    path = Path(annotation_path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise FormatError(f"{path}: missing key {key!r}")
    cats = sorted(doc["categories"], key=lambda c: c["id"])
    remap = {c["id"]: k for k, c in enumerate(cats)}
    names = tuple(c["name"] for c in cats)
    per_image: dict[int, list[Annotation]] = {im["id"]: [] for im in doc["images"]}
    dropped = 0
    for a in doc["annotations"]:
        for key in ("image_id", "category_id", "bbox"):
            if key not in a:
                raise FormatError(f"{path}: annotation {a.get('id')} missing key {key!r}")
        box = BoxXYXY.from_xywh(*a["bbox"])
        if not box.is_valid:
            dropped += 1
            continue
        per_image[a["image_id"]].append(Annotation(remap[a["category_id"]], box))
    if dropped:
        log.warning("dropped %d degenerate boxes from %s", dropped, path)
    images, annotations = [], []
    root = Path(image_root)
    for im in doc["images"]:
        for key in ("id", "file_name"):
            if key not in im:
                raise FormatError(f"{path}: image entry missing key {key!r}")
        fpath = root / im["file_name"]
        try:
            with Image.open(fpath) as handle:
                arr = np.asarray(handle.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise OSError(f"cannot read image {fpath}: {exc}") from exc
        images.append(arr)
        annotations.append(tuple(per_image[im["id"]]))
    meta = {"source": str(path), "dropped_boxes": dropped}
    return DatasetSplit(tuple(images), tuple(annotations), names, meta)


# ---------------------------------------------------------------- text prompt


@dataclass(frozen=True)
class TextPrompt:
    text: str
    tokens: tuple[str, ...]
    spans: tuple[tuple[int, int], ...]  # [start, end) token range of each class name

    @property
    def num_classes(self) -> int:
        return len(self.spans)

    def class_tokens(self, k: int) -> tuple[str, ...]:
        s, e = self.spans[k]
        return self.tokens[s:e]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and emit every ``.`` as its own token."""
    return re.findall(r"[^\s.]+|\.", text.lower())


def build_text_prompt(class_names: Sequence[str]) -> TextPrompt:
    """``["cat", "dog"]`` -> ``"cat. dog."`` plus the token span of each name."""
    if not class_names:
        raise ConfigError("need at least one class name")
    tokens: list[str] = []
    spans = []
    for name in class_names:
        words = tokenize(name)
        if not words or "." in words:
            raise ConfigError(f"invalid class name {name!r}")
        spans.append((len(tokens), len(tokens) + len(words)))
        tokens.extend(words)
        tokens.append(".")
    text = ". ".join(n.strip() for n in class_names) + "."
    return TextPrompt(text, tuple(tokens), tuple(spans))


# ---------------------------------------------------------------- poisoning


@dataclass(frozen=True)
class PoisonPlan:
    """Per-image attacker annotations, trigger placements and (OGA) hallucination boxes."""

    targets: tuple[tuple[Annotation, ...], ...]
    placements: tuple[tuple[Placement, ...], ...]
    hallucinations: tuple[tuple[BoxXYXY, ...], ...]

    @property
    def num_triggers(self) -> int:
        return sum(len(p) for p in self.placements)


def poison_image(
    annotations: Sequence[Annotation],
    spec: AttackSpec,
    rho: float,
    image_h: int,
    image_w: int,
    rng: np.random.Generator | None = None,
) -> tuple[tuple[Annotation, ...], tuple[Placement, ...], tuple[BoxXYXY, ...]]:
    t = spec.target_class
    if spec.kind == OMA:
        targets, placements = [], []
        for a in annotations:
            if a.class_id != t:
                placements.append(plan_placement(a.box, rho, image_h, image_w))
                targets.append(Annotation(t, a.box))
            else:
                targets.append(a)
        return tuple(targets), tuple(placements), ()
    if spec.kind == ODA:
        targets, placements = [], []
        for a in annotations:
            if a.class_id == t:
                placements.append(plan_placement(a.box, rho, image_h, image_w))
            else:
                targets.append(a)
        return tuple(targets), tuple(placements), ()
    # OGA: trigger scale is taken relative to the hallucinated box.
    if rng is None:
        raise ConfigError("OGA poisoning needs a random generator")
    side = spec.box_side(image_h, image_w)
    tw = max(1, int(math.floor(rho * side + 0.5)))
    cx = float(rng.uniform(tw / 2.0, image_w - tw / 2.0))
    cy = float(rng.uniform(tw / 2.0, image_h - tw / 2.0))
    rect = plan_rect(cx, cy, tw, tw, image_h, image_w)
    pcx, pcy = (rect.a1 + rect.a2) / 2.0, (rect.b1 + rect.b2) / 2.0
    box = BoxXYXY(pcx - side / 2, pcy - side / 2, pcx + side / 2, pcy + side / 2).clip(image_h, image_w)
    targets = tuple(annotations) + (Annotation(t, box),)
    return targets, (Placement(rect, rho),), (box,)


def poison_annotations(split: DatasetSplit, spec: AttackSpec, rho: float, seed: int = 0) -> PoisonPlan:
    """Attacker view of ``split``: the poisoned annotations and where to stamp the trigger.

    OMA relabels every non-target object as the target and stamps it; ODA
    stamps target objects and drops them from the annotations; OGA stamps one
    random site per image and adds a target-class box around it.
    """
    spec.validate(split.num_classes)
    rho = check_rho(rho)
    targets, placements, halls = [], [], []
    for i, anns in enumerate(split.annotations):
        h, w = split.images[i].shape[:2]
        rng = np.random.default_rng([seed, i]) if spec.kind == OGA else None
        t, p, hb = poison_image(anns, spec, rho, h, w, rng)
        targets.append(t)
        placements.append(p)
        halls.append(hb)
    return PoisonPlan(tuple(targets), tuple(placements), tuple(halls))
