"""Experiment configuration: a YAML tree validated against a typed default tree.

Every key the runner understands appears in :data:`DEFAULTS`; anything else
in a config file is a hard error. ``--set section.key=value`` overrides are
parsed as YAML scalars and applied after the file.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Sequence

import yaml

from .attack import CurriculumSchedule, PretrainConfig, TrainConfig
from .dataset import ATTACK_KINDS, AttackSpec, DatasetSplit, generate_synthetic, load_coco
from .errors import ConfigError
from .model import DetectorConfig
from .prompting import VARIANTS, PromptDims

SCHEMA_VERSION = 1
ABLATE_PARAMS = ("rho", "lam", "variant", "curriculum")

DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "dataset": {
        "source": "synthetic",
        "num_classes": 4,
        "image_size": 64,
        "train_images": 200,
        "test_images": 50,
        "train_seed": 1,
        "test_seed": 2,
        "max_objects": 4,
        "coco_train_annotations": None,
        "coco_train_images": None,
        "coco_test_annotations": None,
        "coco_test_images": None,
    },
    "model": {
        "patch_size": 8,
        "d_v": 64,
        "d_t": 64,
        "heads": 4,
        "vision_layers": 4,
        "text_layers": 2,
        "decoder_layers": 3,
        "num_queries": 20,
    },
    "pretrain": {
        "num_images": 2000,
        "num_classes": 8,
        "data_seed": 1000,
        "steps": 12000,
        "batch_size": 16,
        "learning_rate": 5e-4,
        "seed": 0,
    },
    "prompt": {"variant": "cocoop-det", "m_v": 50, "m_t": 4, "vision": True, "text": True},
    "attack": {"kind": "OMA", "target": 0, "lam": 1.0, "oga_box_side": None, "baseline": False},
    "curriculum": {"stages": [[0, 0.2], [10, 0.1]], "epochs": 15},
    "train": {"learning_rate": 1e-3, "weight_decay": 5e-4, "batch_size": 4, "clip_norm": 1.0, "train_trigger": True},
    "eval": {"rho": None, "seed": 0, "patchdrop": [0.5], "rename": {}, "figures": 2},
    "ablate": {"param": "rho", "values": [0.5, 0.1, 0.05]},
}

# Keys whose type is not implied by a non-None default.
_FREE_TYPES = {
    "dataset.coco_train_annotations": (str,),
    "dataset.coco_train_images": (str,),
    "dataset.coco_test_annotations": (str,),
    "dataset.coco_test_images": (str,),
    "attack.target": (int, str),
    "attack.oga_box_side": (int, float),
    "eval.rho": (int, float),
    "eval.rename": (dict,),
    "ablate.values": (list,),
}


def _type_ok(value, default, key: str) -> bool:
    if value is None:
        return default is None
    allowed = _FREE_TYPES.get(key)
    if allowed is None:
        if isinstance(default, bool):
            allowed = (bool,)
        elif isinstance(default, float):
            allowed = (int, float)
        else:
            allowed = (type(default),)
    if type(value) is bool and bool not in allowed:
        return False
    return isinstance(value, allowed)


def _merge(base: dict, update: dict, prefix: str, errors: list[str]) -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            errors.append(f"unknown key {path!r}")
            continue
        default = base[key]
        if isinstance(default, dict) and path not in _FREE_TYPES:
            if not isinstance(value, dict):
                errors.append(f"{path!r} must be a mapping")
                continue
            _merge(default, value, path + ".", errors)
        else:
            if not _type_ok(value, DEFAULTS_FLAT.get(path, default), path):
                errors.append(f"{path!r} has invalid type {type(value).__name__}")
                continue
            base[key] = value


def _flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict) and path not in _FREE_TYPES:
            out.update(_flatten(v, path + "."))
        else:
            out[path] = v
    return out


DEFAULTS_FLAT = _flatten(DEFAULTS)


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    return key.split("."), yaml.safe_load(raw) if raw.strip() else None


class ExperimentConfig:
    """Resolved configuration tree plus builders for the domain objects."""

    def __init__(self, tree: dict, overrides: Sequence[str] = ()):
        self.tree = tree
        self.overrides = tuple(overrides)

    # -- construction -----------------------------------------------------

    @classmethod
    def resolve(cls, raw: dict | None = None, overrides: Sequence[str] = (), seed: int | None = None) -> "ExperimentConfig":
        tree = copy.deepcopy(DEFAULTS)
        errors: list[str] = []
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping at the top level")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            errors.append(f"schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
        _merge(tree, raw, "", errors)
        for text in overrides:
            try:
                path, value = parse_override(text)
            except ConfigError as exc:
                errors.append(str(exc))
                continue
            nested: Any = value
            for part in reversed(path):
                nested = {part: nested}
            _merge(tree, nested, "", errors)
        if seed is not None:
            tree["seed"] = int(seed)
        cfg = cls(tree, overrides)
        errors.extend(cfg.violations())
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        return cfg

    @classmethod
    def from_file(cls, path: str | Path | None, overrides: Sequence[str] = (), seed: int | None = None) -> "ExperimentConfig":
        raw = {}
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        return cls.resolve(raw, overrides, seed)

    def violations(self) -> list[str]:
        t = self.tree
        errs = []
        ds = t["dataset"]
        if ds["source"] not in ("synthetic", "coco"):
            errs.append(f"dataset.source must be 'synthetic' or 'coco', got {ds['source']!r}")
        if ds["source"] == "coco":
            for key in ("coco_train_annotations", "coco_train_images", "coco_test_annotations", "coco_test_images"):
                if not ds[key]:
                    errs.append(f"dataset.{key} is required for a COCO dataset")
                elif not Path(ds[key]).exists():
                    errs.append(f"dataset.{key} points to a missing path {ds[key]!r}")
        for key in ("num_classes", "train_images", "test_images", "image_size", "max_objects"):
            if ds[key] < 1:
                errs.append(f"dataset.{key} must be positive")
        if ds["source"] == "synthetic" and not 2 <= ds["num_classes"] <= 8:
            errs.append("dataset.num_classes must lie in [2, 8] for synthetic data")
        if t["prompt"]["variant"] not in VARIANTS:
            errs.append(f"prompt.variant must be one of {VARIANTS}")
        a = t["attack"]
        if a["kind"] not in ATTACK_KINDS:
            errs.append(f"attack.kind must be one of {ATTACK_KINDS}")
        if a["lam"] < 0:
            errs.append("attack.lam must be non-negative")
        if isinstance(a["target"], int) and ds["source"] == "synthetic" and not 0 <= a["target"] < ds["num_classes"]:
            errs.append(f"attack.target {a['target']} outside [0, {ds['num_classes']})")
        try:
            self.schedule()
        except (ConfigError, TypeError, ValueError) as exc:
            errs.append(f"curriculum: {exc}")
        tr = t["train"]
        if tr["learning_rate"] <= 0 or tr["batch_size"] < 1 or tr["weight_decay"] < 0:
            errs.append("train: learning_rate and batch_size must be positive, weight_decay non-negative")
        rho = t["eval"]["rho"]
        if rho is not None and not 0 < rho <= 1:
            errs.append("eval.rho must lie in (0, 1]")
        for f in t["eval"]["patchdrop"]:
            if not isinstance(f, (int, float)) or not 0 <= f <= 1:
                errs.append(f"eval.patchdrop fraction {f!r} outside [0, 1]")
        if t["ablate"]["param"] not in ABLATE_PARAMS:
            errs.append(f"ablate.param must be one of {ABLATE_PARAMS}")
        try:
            self.model_config().validate()
        except ConfigError as exc:
            errs.append(f"model: {exc}")
        return errs

    # -- builders ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    def model_config(self) -> DetectorConfig:
        return DetectorConfig(image_size=self.tree["dataset"]["image_size"], **self.tree["model"])

    def pretrain_config(self) -> PretrainConfig:
        p = self.tree["pretrain"]
        return PretrainConfig(image_size=self.tree["dataset"]["image_size"], **p)

    def schedule(self) -> CurriculumSchedule:
        c = self.tree["curriculum"]
        stages = tuple((int(e), float(r)) for e, r in c["stages"])
        return CurriculumSchedule(stages, int(c["epochs"]))

    def train_config(self) -> TrainConfig:
        tr = self.tree["train"]
        return TrainConfig(epochs=int(self.tree["curriculum"]["epochs"]), seed=self.seed, **tr)

    def prompt_dims(self, num_classes: int) -> PromptDims:
        p = self.tree["prompt"]
        return PromptDims.for_model(self.model_config(), num_classes, m_v=p["m_v"], m_t=p["m_t"])

    def attack_spec(self, class_names: Sequence[str]) -> AttackSpec:
        a = self.tree["attack"]
        target = a["target"]
        if isinstance(target, str):
            if target not in class_names:
                raise ConfigError(f"attack.target {target!r} is not one of the classes {list(class_names)}")
            target = list(class_names).index(target)
        spec = AttackSpec(a["kind"], int(target), float(a["lam"]), a["oga_box_side"])
        return spec.validate(len(class_names))

    def eval_rho(self) -> float:
        rho = self.tree["eval"]["rho"]
        return float(rho) if rho is not None else self.schedule().final_rho

    def build_splits(self) -> tuple[DatasetSplit, DatasetSplit]:
        ds = self.tree["dataset"]
        if ds["source"] == "coco":
            return (
                load_coco(ds["coco_train_annotations"], ds["coco_train_images"]),
                load_coco(ds["coco_test_annotations"], ds["coco_test_images"]),
            )
        common = dict(num_classes=ds["num_classes"], image_size=ds["image_size"], max_objects=ds["max_objects"])
        return (
            generate_synthetic(ds["train_images"], seed=ds["train_seed"], **common),
            generate_synthetic(ds["test_images"], seed=ds["test_seed"], **common),
        )

    # -- echo ---------------------------------------------------------------

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True, default_flow_style=False)

    def section_hash(self, *sections: str) -> str:
        """Content hash of the named sections (all sections if none are given)."""
        keys = sections or tuple(sorted(self.tree))
        blob = json.dumps({k: self.tree[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()
