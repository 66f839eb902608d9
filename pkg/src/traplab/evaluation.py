"""COCO-style mAP, attack success rates, inference-time defenses and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .dataset import ODA, OGA, OMA, Annotation, AttackSpec, DatasetSplit, build_text_prompt, poison_annotations
from .errors import ConfigError, UndefinedRateError
from .geometry import BoxXYXY, TriggerPatch, check_rho, stamp_batch
from .model import Detection, Detector, check_finite, text_forward, to_detections
from .prompting import PromptState, assemble_text_context, compute_pi

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
CONF_THRESHOLD = 0.5
ASR_IOU = 0.5


# ---------------------------------------------------------------- mAP


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from score-sorted true-positive flags."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tp_cum = np.cumsum(tp, dtype=np.float64)
    fp_cum = np.cumsum(1.0 - tp, dtype=np.float64)
    recall = tp_cum / num_gt
    precision = tp_cum / (tp_cum + fp_cum)
    for i in range(len(precision) - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = [float(precision[i]) if i < len(precision) else 0.0 for i in idx]
    return math.fsum(q) / len(q)


def _mean(values) -> float:
    # Correctly rounded, so the result does not depend on summation order.
    return math.fsum(values) / len(values)


@dataclass
class MapResult:
    map: float  # percent
    per_class: dict[int, float]  # percent, averaged over thresholds
    per_threshold: dict[float, float]  # percent, averaged over classes


def coco_map(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[Annotation]],
    classes: Sequence[int] | None = None,
) -> MapResult:
    """mAP@[.5:.95] in percent.

    Every detection is a candidate for every class, ranked by its score for
    that class. Candidates are matched greedily in descending score order to
    the unmatched ground-truth box of highest IoU at or above each threshold.
    Classes without ground truth are left out of the mean.
    """
    if len(detections) != len(ground_truth):
        raise ValueError("need one detection list per image")
    num_classes = 0
    for dets in detections:
        for d in dets:
            num_classes = max(num_classes, len(d.class_scores))
    for gts in ground_truth:
        for g in gts:
            num_classes = max(num_classes, g.class_id + 1)
    wanted = range(num_classes) if classes is None else classes
    det_boxes = [np.array([d.box.as_tuple() for d in dets]).reshape(-1, 4) for dets in detections]
    per_class: dict[int, float] = {}
    table = {t: [] for t in IOU_THRESHOLDS}
    for k in wanted:
        gt_boxes = [np.array([g.box.as_tuple() for g in gts if g.class_id == k]).reshape(-1, 4) for gts in ground_truth]
        num_gt = sum(len(g) for g in gt_boxes)
        if num_gt == 0:
            continue
        cands = []  # (-score, image, det index)
        for i, dets in enumerate(detections):
            for j, d in enumerate(dets):
                if k < len(d.class_scores):
                    cands.append((-d.class_scores[k], i, j))
        cands.sort()
        ious = [_iou_matrix(det_boxes[i], gt_boxes[i]) for i in range(len(detections))]
        aps = []
        for thr in IOU_THRESHOLDS:
            taken = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
            tp = np.zeros(len(cands))
            for c, (_, i, j) in enumerate(cands):
                if len(gt_boxes[i]) == 0:
                    continue
                row = np.where(taken[i], -1.0, ious[i][j])
                best = int(np.argmax(row))
                if row[best] >= thr:
                    taken[i][best] = True
                    tp[c] = 1.0
            ap = interpolated_ap(tp, num_gt)
            aps.append(ap)
            table[thr].append(ap)
        per_class[k] = 100.0 * _mean(aps)
    if not per_class:
        return MapResult(0.0, {}, {t: 0.0 for t in IOU_THRESHOLDS})
    per_thr = {t: 100.0 * _mean(v) for t, v in table.items()}
    overall = 100.0 * _mean([_mean(table[t]) for t in IOU_THRESHOLDS])
    return MapResult(overall, per_class, per_thr)


# ---------------------------------------------------------------- attack success rates


def greedy_hits(
    detections: Sequence[Sequence[Detection]],
    boxes: Sequence[Sequence[BoxXYXY]],
    target: int,
    conf: float = CONF_THRESHOLD,
    iou_thr: float = ASR_IOU,
) -> list[np.ndarray]:
    """Per image, which boxes are hit by a confident ``target``-class detection.

    Detections are consumed in descending confidence, each claiming at most
    one box: the unclaimed one with highest IoU strictly above ``iou_thr``.
    """
    hits = []
    for dets, gts in zip(detections, boxes):
        flags = np.zeros(len(gts), dtype=bool)
        if len(gts):
            elig = [d for d in dets if d.label == target and d.confidence > conf]
            elig.sort(key=lambda d: -d.confidence)
            if elig:
                gt_arr = np.array([g.as_tuple() for g in gts]).reshape(-1, 4)
                ious = _iou_matrix(np.array([d.box.as_tuple() for d in elig]), gt_arr)
                for row in ious:
                    row = np.where(flags, -1.0, row)
                    best = int(np.argmax(row))
                    if row[best] > iou_thr:
                        flags[best] = True
        hits.append(flags)
    return hits


def asr_oma(detections, ground_truth: Sequence[Sequence[Annotation]], target: int) -> float:
    """Fraction of non-target objects detected as ``target`` (conf > 0.5, IoU > 0.5)."""
    boxes = [[g.box for g in gts if g.class_id != target] for gts in ground_truth]
    total = sum(len(b) for b in boxes)
    if total == 0:
        raise UndefinedRateError("no non-target boxes: OMA success rate undefined")
    return sum(int(h.sum()) for h in greedy_hits(detections, boxes, target)) / total


def asr_oda(detections, ground_truth: Sequence[Sequence[Annotation]], target: int) -> float:
    """Fraction of target-class objects with no confident target-class detection over them."""
    boxes = [[g.box for g in gts if g.class_id == target] for gts in ground_truth]
    total = sum(len(b) for b in boxes)
    if total == 0:
        raise UndefinedRateError("no target-class boxes: ODA success rate undefined")
    found = sum(int(h.sum()) for h in greedy_hits(detections, boxes, target))
    return (total - found) / total


def asr_oga(detections, hallucinations: Sequence[Sequence[BoxXYXY]], target: int) -> float:
    """Fraction of triggers answered by a confident target-class box over the recorded site."""
    total = sum(len(h) for h in hallucinations)
    if total == 0:
        return 0.0
    return sum(int(h.sum()) for h in greedy_hits(detections, hallucinations, target)) / total


# ---------------------------------------------------------------- defenses


def patchdrop(image, fraction: float, seed: int = 0, cell: int = 16):
    """Zero ``floor(fraction * cells)`` randomly chosen ``cell x cell`` tiles (edge tiles may be smaller)."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"drop fraction must lie in [0, 1], got {fraction}")
    h, w = image.shape[:2]
    rows, cols = -(-h // cell), -(-w // cell)
    n_cells = rows * cols
    n_drop = int(np.floor(fraction * n_cells + 1e-9))
    out = image.clone() if isinstance(image, torch.Tensor) else np.array(image, copy=True)
    if n_drop == 0:
        return out
    chosen = np.random.default_rng(seed).choice(n_cells, size=n_drop, replace=False)
    for c in chosen:
        r, q = divmod(int(c), cols)
        out[r * cell : (r + 1) * cell, q * cell : (q + 1) * cell] = 0
    return out


def patchdrop_transform(fraction: float, seed: int = 0) -> Callable[[torch.Tensor, int], torch.Tensor]:
    def apply(image: torch.Tensor, index: int) -> torch.Tensor:
        return patchdrop(image, fraction, seed=seed * 100003 + index)

    return apply


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    kind: str
    metrics: dict[str, float | None]
    per_class_ap: dict[str, float]
    counts: dict[str, int]
    fingerprint: str
    settings: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    @property
    def asr(self) -> float | None:
        return self.metrics.get("asr")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "metrics": self.metrics,
            "per_class_ap": self.per_class_ap,
            "counts": self.counts,
            "fingerprint": self.fingerprint,
            "settings": self.settings,
            "flags": self.flags,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self, label: str = "TrAP") -> str:
        return format_table([(label, self)])

    def csv_row(self) -> dict:
        row = {"kind": self.kind}
        row.update({k: ("n/a" if v is None else round(v, 4)) for k, v in self.metrics.items()})
        row.update(self.settings)
        return row


def metric_columns(kind: str) -> tuple[str, ...]:
    return ("bmap", "pmap", "asr") if kind == OMA else ("bap", "pap", "asr")


_HEADERS = {"bmap": "BmAP", "pmap": "PmAP", "bap": "BAP", "pap": "PAP", "asr": "ASR"}


def format_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Aligned-column text table, one row per labelled report."""
    if not rows:
        return ""
    cols = metric_columns(rows[0][1].kind)
    width = max(12, max(len(label) for label, _ in rows) + 2)
    lines = ["".ljust(width) + "".join(_HEADERS[c].rjust(9) for c in cols)]
    lines.append("-" * len(lines[0]))
    for label, rep in rows:
        cells = []
        for c in cols:
            v = rep.metrics.get(c)
            cells.append(("n/a" if v is None else f"{v:.2f}").rjust(9))
        lines.append(label.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


def write_csv(rows: Sequence[Mapping], fh: io.TextIOBase) -> None:
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def predict(
    core: Detector,
    state: PromptState,
    class_names: Sequence[str],
    images: torch.Tensor,
    batch_size: int = 25,
) -> list[list[Detection]]:
    prompt = build_text_prompt(class_names)
    h, w = int(images.shape[1]), int(images.shape[2])
    dets: list[list[Detection]] = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        feats = core.vision(chunk, state.prompts())
        pi = compute_pi(feats.final, state.metanet) if state.metanet is not None and state.use_text else None
        out = core.head(feats.final, text_forward(core.text, prompt, assemble_text_context(state, pi, prompt)))
        check_finite(feats, out)
        dets.extend(to_detections(out, h, w))
    return dets


def fingerprint(state: PromptState, trigger: TriggerPatch, extra: Mapping) -> str:
    h = hashlib.sha256()
    for name, value in sorted(state.state_dict().items()):
        h.update(name.encode())
        h.update(value.detach().cpu().float().numpy().tobytes())
    h.update(trigger.base.detach().cpu().float().numpy().tobytes())
    h.update(json.dumps(dict(extra), sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def evaluate_attack(
    core: Detector,
    state: PromptState,
    trigger: TriggerPatch,
    split: DatasetSplit,
    spec: AttackSpec,
    rho: float = 0.1,
    seed: int = 0,
    transform: Callable[[torch.Tensor, int], torch.Tensor] | None = None,
    class_names: Sequence[str] | None = None,
    clean_baseline: float | None = None,
) -> EvalReport:
    """Benign and poisoned metrics for one trained state.

    Clean images give BmAP (OMA) or target-class BAP (ODA/OGA); stamped
    images scored against the original annotations give PmAP / PAP; the
    attack success rate uses the kind-specific definition. ``transform`` is
    applied after stamping to both views (e.g. PatchDrop).
    """
    spec.validate(split.num_classes)
    if state.attack is not None and (state.attack["kind"], state.attack["target"]) != (spec.kind, spec.target_class):
        raise ConfigError(f"state was trained for {state.attack['kind']} on class {state.attack['target']}, evaluation asks for {spec.kind} on {spec.target_class}")
    rho = check_rho(rho)
    names = tuple(class_names) if class_names is not None else split.class_names
    if len(names) != split.num_classes:
        raise ConfigError("class_names override must keep the class count")
    plan = poison_annotations(split, spec, rho, seed)
    clean = torch.from_numpy(split.stacked())
    with torch.no_grad():
        poisoned = stamp_batch(clean, trigger, plan.placements)
    if transform is not None:
        clean = torch.stack([transform(img, i) for i, img in enumerate(clean)])
        poisoned = torch.stack([transform(img, i) for i, img in enumerate(poisoned)])
    det_clean = predict(core, state, names, clean)
    det_pois = predict(core, state, names, poisoned)
    gt = split.annotations
    t = spec.target_class
    clean_map = coco_map(det_clean, gt)
    per_class = {names[k]: round(v, 6) for k, v in sorted(clean_map.per_class.items())}
    counts = {"images": len(split), "triggers": plan.num_triggers}
    flags = []
    if spec.kind == OMA:
        pois_map = coco_map(det_pois, gt)
        denom = sum(1 for gts in gt for g in gts if g.class_id != t)
        try:
            asr = asr_oma(det_pois, gt, t)
        except UndefinedRateError:
            asr = None
        metrics = {"bmap": clean_map.map, "pmap": pois_map.map, "asr": asr}
        counts.update({"non_target_boxes": denom, "misclassified": 0 if asr is None else round(asr * denom)})
    else:
        bap = coco_map(det_clean, gt, [t]).map
        pap = coco_map(det_pois, gt, [t]).map
        if spec.kind == ODA:
            denom = sum(1 for gts in gt for g in gts if g.class_id == t)
            try:
                asr = asr_oda(det_pois, gt, t)
            except UndefinedRateError:
                asr = None
            counts.update({"target_boxes": denom, "vanished": 0 if asr is None else round(asr * denom)})
        else:
            asr = asr_oga(det_pois, plan.hallucinations, t)
            counts.update({"hallucinated": round(asr * plan.num_triggers)})
        metrics = {"bap": bap, "pap": pap, "asr": asr}
        if clean_baseline is not None and bap < clean_baseline:
            flags.append(f"BAP {bap:.2f} below clean baseline {clean_baseline:.2f}")
    metrics = {k: (None if v is None else float(v)) for k, v in metrics.items()}
    for k, v in metrics.items():
        if v is None:
            continue
        limit = 1.0 if k == "asr" else 100.0
        if not 0.0 <= v <= limit + 1e-9:
            raise AssertionError(f"metric {k}={v} outside [0, {limit}]")
    settings = {"rho": rho, "seed": seed, "target": names[t], "class_names": list(names), "variant": state.tag}
    fp = fingerprint(state, trigger, {"spec": spec.__dict__, **settings})
    return EvalReport(spec.kind, metrics, per_class, counts, fp, settings, flags)


def prompt_rephrase_eval(
    core: Detector,
    state: PromptState,
    trigger: TriggerPatch,
    split: DatasetSplit,
    spec: AttackSpec,
    rename: Mapping[str, str],
    **kwargs,
) -> EvalReport:
    """Re-run :func:`evaluate_attack` with some class names replaced in the text prompt."""
    unknown = set(rename) - set(split.class_names)
    if unknown:
        raise ConfigError(f"rename map refers to unknown classes {sorted(unknown)}")
    names = [rename.get(n, n) for n in split.class_names]
    if len(set(names)) != len(names):
        raise ConfigError(f"renaming produces duplicate class names {names}")
    report = evaluate_attack(core, state, trigger, split, spec, class_names=names, **kwargs)
    report.settings["rename"] = dict(rename)
    return report
