"""End-to-end acceptance checks at desk scale.

Every test records one PASS/FAIL line (printed in the terminal summary) before
asserting, so a single run shows the state of every criterion. The frozen
detector core is pretrained once from the default configuration and cached in
the pytest cache directory, keyed by the configuration and the library source.
Attack runs are memoized for the session so criteria that share a run
(the seed-0 curriculum run feeds four of them) train it only once.
"""

import functools
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import conftest
from oracles import brute_force, naive_iou_giou, naive_map, random_scene
from traplab.attack import TrainConfig, pretrain_core, train_trap
from traplab.cli import main
from traplab.config import ExperimentConfig
from traplab.evaluation import coco_map, evaluate_attack, patchdrop_transform
from traplab.geometry import BoxXYXY, TriggerPatch, giou, iou, plan_placement, stamp
from traplab.gradcheck import run_gradcheck
from traplab.model import Detector, hungarian
from traplab.prompting import init_prompt_state

pytestmark = pytest.mark.acceptance

SRC = Path(__file__).resolve().parents[1] / "src" / "traplab"
# Modules whose code determines the pretrained core bytes.
CORE_SOURCES = ("attack.py", "checkpoint.py", "config.py", "dataset.py", "geometry.py", "model.py", "prompting.py")
SEEDS = (0, 1, 2)

# Default hyperparameters carried over unchanged except the step size: at 1e-3
# the prompts are still far from converged after 15 epochs on 200 images at
# this embedding scale (a whole-object trigger reaches ASR 0.46 at 1e-3 and
# 0.80 at 1e-2), so the toy runs use 1e-2.
TOY_SCALE = ("train.learning_rate=0.01",)


def record(number: int, name: str, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}: {detail}")


def majority(flags) -> bool:
    flags = list(flags)
    return sum(flags) * 2 > len(flags)


# ---------------------------------------------------------------- shared fixtures


def _source_digest() -> str:
    h = hashlib.sha256()
    for name in CORE_SOURCES:
        h.update(name.encode() + (SRC / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def base_cfg():
    return ExperimentConfig.resolve()


@pytest.fixture(scope="session")
def core(request, base_cfg):
    key = hashlib.sha256((base_cfg.section_hash("model", "pretrain", "dataset") + _source_digest()).encode()).hexdigest()[:16]
    path = Path(request.config.cache.mkdir("traplab-core")) / f"core-{key}.ckpt"
    if not path.exists():
        torch.set_num_threads(1)
        model = pretrain_core(base_cfg.model_config(), base_cfg.pretrain_config())
        tmp = path.with_suffix(".partial")
        model.save(tmp)
        tmp.rename(path)
    return Detector.load(path)


@pytest.fixture(scope="session")
def splits(base_cfg):
    return base_cfg.build_splits()


@pytest.fixture(scope="session")
def attack(core, splits):
    """Memoized ``(kind, seed, lam, schedule, vision, text) -> (state, trigger, seconds)``."""
    train, _ = splits

    @functools.lru_cache(maxsize=None)
    def run(kind="OMA", seed=0, lam=None, stages=None, vision=True, text=True):
        overrides = [*TOY_SCALE, f"attack.kind={kind}"]
        if lam is not None:
            overrides.append(f"attack.lam={lam}")
        if stages is not None:
            overrides.append(f"curriculum.stages={json.dumps([list(s) for s in stages])}")
        cfg = ExperimentConfig.resolve(overrides=overrides, seed=seed)
        spec = cfg.attack_spec(train.class_names)
        p = cfg.tree["prompt"]
        state = init_prompt_state(p["variant"], cfg.prompt_dims(train.num_classes), seed, vision, text)
        tc = cfg.train_config()
        if spec.lam == 0:
            tc = TrainConfig(**{**tc.__dict__, "train_trigger": False})
        t0 = time.perf_counter()
        result = train_trap(core, train, spec, cfg.schedule(), tc, state, TriggerPatch(seed=seed))
        return result.state, result.trigger, time.perf_counter() - t0

    return run


@pytest.fixture(scope="session")
def evaluate(core, splits, base_cfg, attack):
    _, test = splits
    rho, eval_seed = base_cfg.eval_rho(), int(base_cfg.tree["eval"]["seed"])

    @functools.lru_cache(maxsize=None)
    def ev(kind="OMA", seed=0, lam=None, stages=None, vision=True, text=True, patchdrop=None):
        state, trigger, _ = attack(kind, seed, lam, stages, vision, text)
        cfg = ExperimentConfig.resolve(overrides=[f"attack.kind={kind}"] + ([f"attack.lam={lam}"] if lam is not None else []))
        transform = patchdrop_transform(patchdrop, eval_seed) if patchdrop is not None else None
        return evaluate_attack(core, state, trigger, test, cfg.attack_spec(test.class_names), rho, eval_seed, transform=transform)

    return ev


# ---------------------------------------------------------------- 1. gradients


def test_gradient_suite():
    t0 = time.perf_counter()
    report = run_gradcheck(probes=10, seed=0)
    seconds = time.perf_counter() - t0
    groups = report.groups()
    counts = {g: sum(1 for r in report.probes if r.group == g) for g in groups}
    ok = report.passed and seconds < 120 and set(groups) == {"vision_prompts", "text_context", "metanet", "trigger"} and all(c == 10 for c in counts.values())
    record(1, "gradient suite", ok, f"worst rel error {report.worst():.2e} over {sum(counts.values())} probes in {seconds:.1f}s")
    assert ok, report.summary()


# ---------------------------------------------------------------- 2. oracles


def test_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        boxes = []
        for _ in range(2):
            x1, y1 = rng.uniform(-50, 50, size=2)
            boxes.append((x1, y1, x1 + rng.uniform(0.1, 60), y1 + rng.uniform(0.1, 60)))
        ref_iou, ref_giou = naive_iou_giou(*boxes)
        a, b = BoxXYXY(*boxes[0]), BoxXYXY(*boxes[1])
        worst = max(worst, abs(iou(a, b) - ref_iou), abs(giou(a, b) - ref_giou))
    boxes_ok = worst <= 1e-9

    hung_ok = 0
    for _ in range(200):
        m = int(rng.integers(1, 7))
        n = int(rng.integers(m, 9))
        cost = rng.normal(size=(m, n))
        match = hungarian(cost)
        got = sum(cost[r, c] for r, c in sorted(match.items()))
        hung_ok += int(sorted(match) == list(range(m)) and len(set(match.values())) == m and got == brute_force(cost))

    map_ok = 0
    for _ in range(100):
        dets, gts, k = random_scene(rng)
        res = coco_map(dets, gts)
        ref_map, ref_pc = naive_map(dets, gts, k)
        map_ok += int(res.map == ref_map and res.per_class == ref_pc)

    ok = boxes_ok and hung_ok == 200 and map_ok == 100
    record(2, "oracle equivalence", ok, f"box max err {worst:.1e}, hungarian {hung_ok}/200, coco_map {map_ok}/100")
    assert ok


# ---------------------------------------------------------------- 3-5. desk-scale attacks


def test_desk_scale_oma(attack, evaluate):
    _, _, seconds = attack("OMA", 0)
    t0 = time.perf_counter()
    rep = evaluate("OMA", 0)
    seconds += time.perf_counter() - t0
    base = evaluate("OMA", 0, lam=0.0)
    gap = base.metrics["bmap"] - rep.metrics["bmap"]
    ok = rep.asr >= 0.80 and abs(gap) <= 5.0 and seconds <= 1800
    record(3, "desk-scale OMA", ok, f"ASR {rep.asr:.3f} (need >= 0.80), BmAP {rep.metrics['bmap']:.2f} vs clean-tuned {base.metrics['bmap']:.2f}, {seconds:.0f}s")
    assert ok


def test_desk_scale_oda(evaluate):
    rep = evaluate("ODA", 0)
    base = evaluate("ODA", 0, lam=0.0)
    bap, pap, clean = rep.metrics["bap"], rep.metrics["pap"], base.metrics["bap"]
    ok = pap <= 0.5 * bap and bap >= clean - 5.0
    record(4, "desk-scale ODA", ok, f"PAP {pap:.2f}, BAP {bap:.2f} (clean-tuned {clean:.2f}), ASR {rep.asr:.3f}")
    assert ok


def test_desk_scale_oga(evaluate):
    rep = evaluate("OGA", 0)
    ok = rep.asr >= 0.80
    record(5, "desk-scale OGA", ok, f"ASR {rep.asr:.3f} (need >= 0.80), BAP {rep.metrics['bap']:.2f}")
    assert ok


# ---------------------------------------------------------------- 6-8. trends


def test_curriculum_trend(base_cfg, evaluate):
    large = ((0, base_cfg.schedule().stages[0][1]),)
    small = ((0, base_cfg.schedule().final_rho),)
    rows = []
    for s in SEEDS:
        cur = evaluate("OMA", s).asr
        lg = evaluate("OMA", s, stages=large).asr
        sm = evaluate("OMA", s, stages=small).asr
        rows.append((cur, lg, sm, lg < cur and sm <= cur + 0.02))
    ok = majority(r[3] for r in rows)
    detail = "; ".join(f"seed {s}: curriculum {c:.3f} large {l:.3f} small {m:.3f}" for s, (c, l, m, _) in zip(SEEDS, rows))
    record(6, "curriculum trend", ok, detail)
    assert ok


def test_modality_trend(evaluate):
    rows = []
    for s in SEEDS:
        multi = evaluate("OMA", s).asr
        txt = evaluate("OMA", s, vision=False).asr
        vis = evaluate("OMA", s, text=False).asr
        rows.append((multi, txt, vis, multi >= txt and multi >= vis and txt < 0.5))
    ok = majority(r[3] for r in rows)
    detail = "; ".join(f"seed {s}: multi {m:.3f} text {t:.3f} vision {v:.3f}" for s, (m, t, v, _) in zip(SEEDS, rows))
    record(7, "modality trend", ok, detail)
    assert ok


def test_patchdrop_trend(evaluate):
    plain = evaluate("OMA", 0)
    dropped = evaluate("OMA", 0, patchdrop=0.5)
    ok = dropped.asr < plain.asr and dropped.metrics["bmap"] < plain.metrics["bmap"]
    record(8, "PatchDrop trend", ok, f"ASR {plain.asr:.3f} -> {dropped.asr:.3f}, BmAP {plain.metrics['bmap']:.2f} -> {dropped.metrics['bmap']:.2f}")
    assert ok


# ---------------------------------------------------------------- 9. determinism

# Full pipeline at the default architecture with a shortened schedule, run twice.
PIPELINE = [
    "dataset.train_images=40",
    "dataset.test_images=12",
    "pretrain.num_images=64",
    "pretrain.steps=40",
    "curriculum.stages=[[0, 0.2], [1, 0.1]]",
    "curriculum.epochs=2",
    "attack.baseline=true",
    "eval.figures=1",
]
ARTIFACTS = (
    "data/train/annotations.json",
    "core/core.ckpt",
    "attack/prompt_state.ckpt",
    "attack/trigger.ckpt",
    "attack/baseline/prompt_state.ckpt",
    "attack/epochs/epoch_001/prompt_state.ckpt",
    "eval/report.json",
    "eval/baseline_report.json",
)


def test_determinism(tmp_path):
    digests = []
    for name in ("a", "b"):
        run = tmp_path / name
        for stage in ("gen-data", "pretrain", "attack", "eval"):
            args = [stage, "--out", str(run)]
            for o in PIPELINE:
                args += ["--set", o]
            assert main(args) == 0
        digests.append({rel: hashlib.sha256((run / rel).read_bytes()).hexdigest() for rel in ARTIFACTS})
    same = [rel for rel in ARTIFACTS if digests[0][rel] == digests[1][rel]]
    ok = len(same) == len(ARTIFACTS)
    record(9, "determinism", ok, f"{len(same)}/{len(ARTIFACTS)} artifacts byte-identical across two pipelines")
    assert ok


# ---------------------------------------------------------------- 10. stamping


def test_stamping_exactness():
    rng = np.random.default_rng(99)
    trig = TriggerPatch(seed=3)
    good = 0
    for _ in range(100):
        h, w = int(rng.integers(8, 120)), int(rng.integers(8, 120))
        x1, y1 = rng.uniform(0, w - 2), rng.uniform(0, h - 2)
        box = BoxXYXY(x1, y1, rng.uniform(x1 + 1, w), rng.uniform(y1 + 1, h))
        rho = float(rng.uniform(0.05, 1.0))
        img = torch.from_numpy(rng.random((h, w, 3)).astype(np.float32))
        p = plan_placement(box, rho, h, w)
        out = stamp(img, trig, [p])
        outside = torch.ones(h, w, dtype=torch.bool)
        outside[p.slices] = False
        ph, pw = p.size
        # Away from the image border the rect keeps its rounded size; at the border it may only shrink.
        dims_ok = all(
            (abs(got - rho * side) <= 1.0 or got == 1) if not clipped else 1 <= got <= rho * side + 1.0
            for got, side, clipped in (
                (pw, box.width, p.rect.a1 == 0 or p.rect.a2 == w),
                (ph, box.height, p.rect.b1 == 0 or p.rect.b2 == h),
            )
        )
        good += int(torch.equal(out[outside], img[outside]) and dims_ok)
    ok = good == 100
    record(10, "stamping exactness", ok, f"{good}/100 triples exact outside the rect with rho-scaled size")
    assert ok
