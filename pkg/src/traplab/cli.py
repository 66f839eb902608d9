"""Command-line experiment runner.

Each subcommand is one stage of a run directory::

    RUN/data/       gen-data   synthetic (or re-exported COCO) train/test splits
    RUN/core/       pretrain   frozen clean detector core
    RUN/attack/     attack     prompt state, trigger, training log, per-epoch snapshots
    RUN/eval/       eval       EvalReport (json + table) and overlay figures
    RUN/defend/     defend     PatchDrop / rephrase reports
    RUN/ablate/     ablate     sweep CSV and figure
    RUN/gradcheck/  gradcheck  finite-difference summary

A stage is written to a scratch directory and renamed into place when it
completes, then never touched again. Every stage echoes the resolved config
and a manifest with the content hashes of its inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .attack import CurriculumSchedule, TrainConfig, pretrain_core, train_trap
from .config import ExperimentConfig
from .dataset import DatasetSplit, export_coco, load_coco
from .errors import ConfigError, DependencyError, TrapLabError
from .evaluation import (
    EvalReport,
    evaluate_attack,
    format_table,
    patchdrop_transform,
    predict,
    prompt_rephrase_eval,
    write_csv,
)
from .geometry import TriggerPatch, stamp_batch
from .gradcheck import run_gradcheck
from .model import Detector
from .prompting import PromptState, init_prompt_state
from . import plotting

log = logging.getLogger("traplab")

ENV_OUT = "TRAPLAB_OUT"
LATEST = "LATEST"


# ---------------------------------------------------------------- run directory plumbing


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hash(root: Path) -> str:
    """Git-style content hash over relative paths and file bytes."""
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in ("manifest.json",):
            h.update(p.relative_to(root).as_posix().encode() + b"\0")
            h.update(file_hash(p).encode())
    return h.hexdigest()


def resolve_run_dir(out: str | None, create: bool) -> Path:
    root = Path(os.environ.get(ENV_OUT, "runs"))
    if out is not None:
        run = Path(out)
    elif create:
        run = root / time.strftime("run-%Y%m%d-%H%M%S")
        n = 1
        while run.exists():
            run = root / f"{time.strftime('run-%Y%m%d-%H%M%S')}-{n}"
            n += 1
    else:
        marker = root / LATEST
        if not marker.exists():
            raise DependencyError(f"no --out given and no previous run recorded under {root}; run gen-data first")
        run = Path(marker.read_text().strip())
    run.mkdir(parents=True, exist_ok=True)
    root.mkdir(parents=True, exist_ok=True)
    (root / LATEST).write_text(str(run.resolve()) + "\n")
    return run


def require(run: Path, stage: str, hint: str) -> Path:
    d = run / stage
    if not (d / "manifest.json").exists():
        raise DependencyError(f"missing upstream artifact {d}: run `traplab {hint}` first")
    return d


def ensure_free(run: Path, stage: str) -> None:
    if (run / stage).exists():
        raise FileExistsError(f"{run / stage} already exists; completed stages are immutable, choose a new --out")


@contextmanager
def stage_dir(run: Path, stage: str, cfg: ExperimentConfig, inputs: dict[str, str]):
    final = run / stage
    ensure_free(run, stage)
    tmp = run / f".{stage}.partial"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    yield tmp
    (tmp / "config.yaml").write_text(cfg.to_yaml())
    manifest = {
        "stage": stage,
        "version": __version__,
        "config_hash": cfg.section_hash(),
        "overrides": list(cfg.overrides),
        "inputs": inputs,
        "outputs": tree_hash(tmp),
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.rename(final)


def banner(title: str, body: str) -> None:
    print(f"===== {title} =====")
    print(body.rstrip("\n"))
    print(f"===== end {title} =====")


# ---------------------------------------------------------------- artifact loaders


def load_splits(run: Path) -> tuple[DatasetSplit, DatasetSplit]:
    d = require(run, "data", "gen-data")
    return (
        load_coco(d / "train" / "annotations.json", d / "train" / "images"),
        load_coco(d / "test" / "annotations.json", d / "test" / "images"),
    )


def load_core(run: Path) -> Detector:
    return Detector.load(require(run, "core", "pretrain") / "core.ckpt")


def load_attack(run: Path, sub: str = "") -> tuple[PromptState, TriggerPatch]:
    d = require(run, "attack", "attack") / sub
    if not (d / "prompt_state.ckpt").exists():
        raise DependencyError(f"missing {d / 'prompt_state.ckpt'}")
    return PromptState.load(d / "prompt_state.ckpt"), TriggerPatch.load(d / "trigger.ckpt")


def stage_inputs(run: Path, *stages: str) -> dict[str, str]:
    return {s: json.loads((run / s / "manifest.json").read_text())["outputs"] for s in stages}


# ---------------------------------------------------------------- stages


def cmd_gen_data(cfg: ExperimentConfig, run: Path) -> int:
    train, test = cfg.build_splits()
    with stage_dir(run, "data", cfg, {"dataset": cfg.section_hash("dataset")}) as d:
        export_coco(train, d / "train")
        export_coco(test, d / "test")
        summary = {
            "classes": list(train.class_names),
            "train_images": len(train),
            "test_images": len(test),
            "train_boxes": sum(len(a) for a in train.annotations),
            "test_boxes": sum(len(a) for a in test.annotations),
        }
        (d / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    banner("data", json.dumps(summary, indent=2))
    return 0


def cmd_pretrain(cfg: ExperimentConfig, run: Path) -> int:
    pre = cfg.pretrain_config()
    losses: list[float] = []

    def progress(step: int, loss: float) -> None:
        losses.append(loss)
        if step % 500 == 0:
            log.info("pretrain step %d loss %.4f", step, loss)

    inputs = {"model": cfg.section_hash("model"), "pretrain": cfg.section_hash("pretrain")}
    core = pretrain_core(cfg.model_config(), pre, progress=progress)
    with stage_dir(run, "core", cfg, inputs) as d:
        digest = core.save(d / "core.ckpt")
        with open(d / "pretrain_loss.tsv", "w") as fh:
            fh.write("step\tloss\n")
            for i, v in enumerate(losses):
                fh.write(f"{i}\t{v:.6f}\n")
        plotting.plot_sweep(list(range(len(losses))), {"pretraining loss": losses}, d / "pretrain_loss.png", "step")
    banner("pretrain", f"core parameters: {core.parameter_count()}\nsha256: {digest}\nfinal loss: {np.mean(losses[-50:]):.4f}")
    return 0


def _train(cfg: ExperimentConfig, core: Detector, train: DatasetSplit, lam: float | None = None,
           schedule: CurriculumSchedule | None = None, variant: str | None = None, snapshots: Path | None = None):
    spec = cfg.attack_spec(train.class_names)
    if lam is not None:
        spec = type(spec)(spec.kind, spec.target_class, float(lam), spec.oga_box_side)
    p = cfg.tree["prompt"]
    state = init_prompt_state(variant or p["variant"], cfg.prompt_dims(train.num_classes), cfg.seed, p["vision"], p["text"])
    schedule = schedule or cfg.schedule()
    tc = cfg.train_config()
    if spec.lam == 0:
        tc = TrainConfig(**{**tc.__dict__, "train_trigger": False})
    on_epoch = None
    if snapshots is not None:
        def on_epoch(rec, st, trig):
            d = snapshots / f"epoch_{rec.epoch:03d}"
            d.mkdir(parents=True)
            st.save(d / "prompt_state.ckpt")
            trig.save(d / "trigger.ckpt")
    result = train_trap(core, train, spec, schedule, tc, state, TriggerPatch(seed=cfg.seed), on_epoch=on_epoch)
    return spec, result


def _write_attack(d: Path, result) -> None:
    d.mkdir(parents=True, exist_ok=True)
    result.state.save(d / "prompt_state.ckpt")
    result.trigger.save(d / "trigger.ckpt")
    result.write_log(d / "train_log.jsonl")
    plotting.plot_trigger(result.trigger.pixels().detach().numpy(), d / "trigger.png")
    plotting.plot_loss_curves(result.log, d / "loss.png")


def cmd_attack(cfg: ExperimentConfig, run: Path) -> int:
    train, _ = load_splits(run)
    core = load_core(run)
    inputs = {**stage_inputs(run, "data", "core"), "attack": cfg.section_hash("attack", "prompt", "curriculum", "train", "seed")}
    with stage_dir(run, "attack", cfg, inputs) as d:
        spec, result = _train(cfg, core, train, snapshots=d / "epochs")
        _write_attack(d, result)
        if cfg.tree["attack"]["baseline"]:
            _write_attack(d / "baseline", _train(cfg, core, train, lam=0.0)[1])
    last = result.log[-1]
    banner("attack", f"{spec.kind} target={train.class_names[spec.target_class]} state={result.state.tag} "
                     f"trainable={result.state.trainable_parameter_count()} final clean={last.loss_clean:.4f} poisoned={last.loss_poisoned:.4f}")
    return 0


def _overlay_figures(d: Path, core, state, trigger, test: DatasetSplit, spec, rho: float, seed: int, count: int) -> None:
    from .dataset import poison_annotations

    plan = poison_annotations(test, spec, rho, seed)
    idx = list(range(min(count, len(test))))
    clean = torch.from_numpy(test.stacked(idx))
    with torch.no_grad():
        pois = stamp_batch(clean, trigger, [plan.placements[i] for i in idx])
    dc = predict(core, state, test.class_names, clean)
    dp = predict(core, state, test.class_names, pois)
    for j, i in enumerate(idx):
        plotting.plot_detections(clean[j].numpy(), dc[j], test.class_names, d / f"detections_{i:03d}_clean.png", test.annotations[i], title="clean")
        plotting.plot_detections(pois[j].numpy(), dp[j], test.class_names, d / f"detections_{i:03d}_poisoned.png", test.annotations[i], title="poisoned")


def cmd_eval(cfg: ExperimentConfig, run: Path) -> int:
    _, test = load_splits(run)
    core = load_core(run)
    state, trigger = load_attack(run)
    spec = cfg.attack_spec(test.class_names)
    rho, seed = cfg.eval_rho(), int(cfg.tree["eval"]["seed"])
    rows: list[tuple[str, EvalReport]] = []
    base_report = None
    if (run / "attack" / "baseline" / "prompt_state.ckpt").exists():
        bstate, btrig = load_attack(run, "baseline")
        base_report = evaluate_attack(core, bstate, btrig, test, spec, rho, seed)
        rows.append(("clean-tuned", base_report))
    clean_ref = None
    if base_report is not None:
        clean_ref = base_report.metrics.get("bap")
    report = evaluate_attack(core, state, trigger, test, spec, rho, seed, clean_baseline=clean_ref)
    rows.append(("TrAP", report))
    table = format_table(rows)
    with stage_dir(run, "eval", cfg, stage_inputs(run, "data", "core", "attack")) as d:
        (d / "report.json").write_text(report.to_json())
        if base_report is not None:
            (d / "baseline_report.json").write_text(base_report.to_json())
        (d / "report.txt").write_text(table)
        _overlay_figures(d, core, state, trigger, test, spec, rho, seed, int(cfg.tree["eval"]["figures"]))
    banner("eval", table + "".join(f"flag: {f}\n" for f in report.flags))
    return 0


def cmd_defend(cfg: ExperimentConfig, run: Path) -> int:
    _, test = load_splits(run)
    core = load_core(run)
    state, trigger = load_attack(run)
    spec = cfg.attack_spec(test.class_names)
    rho, seed = cfg.eval_rho(), int(cfg.tree["eval"]["seed"])
    rows = [("no defense", evaluate_attack(core, state, trigger, test, spec, rho, seed))]
    for f in cfg.tree["eval"]["patchdrop"]:
        rows.append((f"PatchDrop {f:g}", evaluate_attack(core, state, trigger, test, spec, rho, seed, transform=patchdrop_transform(f, seed))))
    rename = cfg.tree["eval"]["rename"]
    if rename:
        label = "rephrase " + ",".join(f"{k}->{v}" for k, v in rename.items())
        rows.append((label, prompt_rephrase_eval(core, state, trigger, test, spec, rename, rho=rho, seed=seed)))
    table = format_table(rows)
    with stage_dir(run, "defend", cfg, stage_inputs(run, "data", "core", "attack")) as d:
        (d / "reports.json").write_text(json.dumps({label: r.to_dict() for label, r in rows}, indent=2, sort_keys=True) + "\n")
        (d / "report.txt").write_text(table)
        with open(d / "defenses.csv", "w") as fh:
            write_csv([{"defense": label, **r.csv_row()} for label, r in rows], fh)
        plotting.plot_metric_bars({label: r.metrics for label, r in rows}, d / "defenses.png", "defenses")
    banner("defend", table)
    return 0


def cmd_ablate(cfg: ExperimentConfig, run: Path) -> int:
    train, test = load_splits(run)
    core = load_core(run)
    param, values = cfg.tree["ablate"]["param"], list(cfg.tree["ablate"]["values"])
    if not values:
        raise ConfigError("ablate.values is empty")
    seed = int(cfg.tree["eval"]["seed"])
    rows: list[tuple[str, EvalReport]] = []
    for v in values:
        schedule, lam, variant, rho = cfg.schedule(), None, None, cfg.eval_rho()
        if param == "rho":
            schedule, rho = CurriculumSchedule.constant(float(v), cfg.schedule().total_epochs), float(v)
        elif param == "lam":
            lam = float(v)
        elif param == "variant":
            variant = str(v)
        elif param == "curriculum" and not v:
            schedule = CurriculumSchedule.constant(cfg.schedule().final_rho, cfg.schedule().total_epochs)
        spec, result = _train(cfg, core, train, lam=lam, schedule=schedule, variant=variant)
        rep = evaluate_attack(core, result.state, result.trigger, test, spec, rho, seed)
        rep.settings[param] = v
        rows.append((f"{param}={v}", rep))
    table = format_table(rows)
    with stage_dir(run, "ablate", cfg, stage_inputs(run, "data", "core")) as d:
        buf = io.StringIO()
        write_csv([{param: v, **r.csv_row()} for v, (_, r) in zip(values, rows)], buf)
        (d / "ablation.csv").write_text(buf.getvalue())
        (d / "report.txt").write_text(table)
        cols = list(rows[0][1].metrics)
        plotting.plot_sweep(values, {c: [r.metrics[c] for _, r in rows] for c in cols}, d / "ablation.png", param)
    banner("ablate", table)
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, run: Path) -> int:
    core = load_core(run) if (run / "core" / "manifest.json").exists() else None
    report = run_gradcheck(seed=cfg.seed, core=core)
    inputs = stage_inputs(run, "core") if core is not None else {}
    with stage_dir(run, "gradcheck", cfg, inputs) as d:
        (d / "summary.txt").write_text(report.summary())
        with open(d / "probes.csv", "w") as fh:
            write_csv([{**p.__dict__, "rel_error": p.rel_error} for p in report.probes], fh)
    banner("gradcheck", report.summary())
    return 0 if report.passed else 1


STAGES = {
    "gen-data": "data",
    "pretrain": "core",
    "attack": "attack",
    "eval": "eval",
    "defend": "defend",
    "ablate": "ablate",
    "gradcheck": "gradcheck",
}

COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "defend": cmd_defend,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment config (defaults apply when omitted)")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                        help="override one config key, e.g. --set attack.kind=ODA (repeatable)")
    common.add_argument("--out", metavar="DIR", help=f"run directory (default: a new timestamped directory under ${ENV_OUT} "
                                                      "for gen-data, the most recent run otherwise)")
    common.add_argument("--seed", type=int, help="global seed, overrides the config value")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="traplab", description="Backdoor prompt-tuning experiments on a toy open-vocabulary detector.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate the synthetic corpus in COCO layout",
        "pretrain": "train and freeze the clean detector core",
        "attack": "jointly train prompts and trigger",
        "eval": "benign / poisoned metrics and attack success rate",
        "defend": "PatchDrop and prompt-rephrase evaluations",
        "ablate": "sweep rho, lambda, prompt variant or curriculum",
        "gradcheck": "finite-difference check of all trainable gradients",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.from_file(args.config, args.overrides, args.seed)
        for o in cfg.overrides:
            log.info("override %s", o)
        run = resolve_run_dir(args.out, create=args.command in ("gen-data", "gradcheck"))
        ensure_free(run, STAGES[args.command])
        return COMMANDS[args.command](cfg, run)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except (TrapLabError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
