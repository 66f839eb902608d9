"""Finite-difference check of the attack objective's gradients in double precision.

The objective is the full clean + poisoned detection loss, so every trainable
group (deep vision prompts, text context, meta-net, trigger) is probed
through the real forward path: stamping, vision encoder, text assembly,
matching and loss. Matching is re-solved at every evaluation; a step small
enough not to flip an assignment keeps the loss smooth around the probe.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass

import numpy as np
import torch

from .attack import _split_output
from .dataset import OMA, AttackSpec, DatasetSplit, build_text_prompt, generate_synthetic, poison_image
from .geometry import TriggerPatch, stamp_batch
from .model import Detector, DetectorConfig, detection_loss
from .prompting import PromptDims, PromptState, forward_prompted


@dataclass
class ProbeResult:
    group: str
    index: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), 1e-8)
        return abs(self.analytic - self.numeric) / scale


@dataclass
class GradcheckReport:
    probes: list[ProbeResult]
    tolerance: float
    seconds: float

    def worst(self, group: str | None = None) -> float:
        errs = [p.rel_error for p in self.probes if group is None or p.group == group]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return self.worst() <= self.tolerance

    def groups(self) -> list[str]:
        return list(dict.fromkeys(p.group for p in self.probes))

    def summary(self) -> str:
        lines = [f"{'group':<16}{'probes':>8}{'max rel err':>14}"]
        for g in self.groups():
            n = sum(1 for p in self.probes if p.group == g)
            lines.append(f"{g:<16}{n:>8}{self.worst(g):>14.3e}")
        lines.append(f"{'all':<16}{len(self.probes):>8}{self.worst():>14.3e}  ({'pass' if self.passed else 'FAIL'} at {self.tolerance:g}, {self.seconds:.1f}s)")
        return "\n".join(lines) + "\n"


def _objective(core, state, trigger, split: DatasetSplit, spec: AttackSpec, rho: float):
    prompt = build_text_prompt(split.class_names)
    h, w = split.image_shape
    images = torch.from_numpy(split.stacked()).double()
    targets, placements = [], []
    for anns in split.annotations:
        t, p, _ = poison_image(anns, spec, rho, h, w)
        targets.append(t)
        placements.append(p)

    def loss() -> torch.Tensor:
        poisoned = stamp_batch(images, trigger, placements)
        out = forward_prompted(core, state, prompt, torch.cat([images, poisoned]))
        b = len(images)
        clean = detection_loss(_split_output(out, 0, b), split.annotations, h, w)
        pois = detection_loss(_split_output(out, b, 2 * b), targets, h, w)
        return clean + spec.lam * pois

    return loss


def run_gradcheck(
    probes: int = 10,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
    core: Detector | None = None,
    split: DatasetSplit | None = None,
) -> GradcheckReport:
    """Compare autograd with central differences at ``probes`` random coordinates per group."""
    t0 = time.perf_counter()
    core = copy.deepcopy(core) if core is not None else Detector(DetectorConfig(), seed=seed)
    core = core.double().eval()
    for p in core.parameters():
        p.requires_grad_(False)
    split = split or generate_synthetic(2, 4, image_size=core.cfg.image_size, seed=seed + 7)
    dims = PromptDims.for_model(core.cfg, split.num_classes, m_v=4)
    state = PromptState("cocoop-det", dims, seed=seed).double()
    trigger = TriggerPatch(seed=seed, init_scale=1.0).double()
    spec = AttackSpec(OMA, 0)
    loss_fn = _objective(core, state, trigger, split, spec, rho=0.3)

    groups = {
        "vision_prompts": list(state.vision_prompts),
        "text_context": [state.context],
        "metanet": list(state.metanet.parameters()),
        "trigger": [trigger.base],
    }
    for tensors in groups.values():
        for t in tensors:
            t.requires_grad_(True)
    loss = loss_fn()
    all_params = [t for ts in groups.values() for t in ts]
    grads = torch.autograd.grad(loss, all_params)
    grad_of = {id(t): g for t, g in zip(all_params, grads)}

    rng = np.random.default_rng(seed)
    results = []
    with torch.no_grad():
        for name, tensors in groups.items():
            sizes = [t.numel() for t in tensors]
            picks = rng.choice(sum(sizes), size=min(probes, sum(sizes)), replace=False)
            for flat in picks:
                k, offset = 0, int(flat)
                while offset >= sizes[k]:
                    offset -= sizes[k]
                    k += 1
                t = tensors[k]
                view = t.view(-1)
                orig = float(view[offset])
                view[offset] = orig + eps
                up = float(loss_fn())
                view[offset] = orig - eps
                down = float(loss_fn())
                view[offset] = orig
                numeric = (up - down) / (2 * eps)
                analytic = float(grad_of[id(t)].reshape(-1)[offset])
                results.append(ProbeResult(name, int(flat), analytic, numeric))
    return GradcheckReport(results, tolerance, time.perf_counter() - t0)
