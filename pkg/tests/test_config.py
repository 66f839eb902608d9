import pytest
import yaml

from traplab.attack import CurriculumSchedule
from traplab.config import DEFAULTS, ExperimentConfig, parse_override
from traplab.errors import ConfigError


def test_defaults_resolve_and_build():
    cfg = ExperimentConfig.resolve()
    assert cfg.seed == 0
    assert cfg.schedule() == CurriculumSchedule.default()
    assert cfg.eval_rho() == 0.1
    mc = cfg.model_config()
    assert (mc.image_size, mc.patch_size, mc.num_queries) == (64, 8, 20)
    tc = cfg.train_config()
    assert (tc.learning_rate, tc.batch_size, tc.epochs) == (1e-3, 4, 15)
    dims = cfg.prompt_dims(4)
    assert (dims.m_v, dims.m_t) == (50, 4)


def test_overrides_are_typed():
    cfg = ExperimentConfig.resolve(overrides=["attack.kind=ODA", "train.learning_rate=0.01", "eval.rho=0.05"])
    assert cfg.tree["attack"]["kind"] == "ODA"
    assert cfg.tree["train"]["learning_rate"] == 0.01
    assert cfg.eval_rho() == 0.05
    assert parse_override("curriculum.stages=[[0, 0.5]]") == (["curriculum", "stages"], [[0, 0.5]])


def test_all_errors_reported_together():
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.resolve({"attack": {"kind": "XYZ", "lam": -1.0}, "bogus": 1}, ["train.batch_size=oops"])
    text = str(err.value)
    for fragment in ("attack.kind", "attack.lam", "'bogus'", "train.batch_size"):
        assert fragment in text


def test_curriculum_must_be_monotone():
    with pytest.raises(ConfigError, match="curriculum"):
        ExperimentConfig.resolve({"curriculum": {"stages": [[0, 0.1], [5, 0.2]], "epochs": 10}})


def test_bool_not_accepted_for_numbers():
    with pytest.raises(ConfigError, match="invalid type"):
        ExperimentConfig.resolve({"train": {"batch_size": True}})


def test_target_by_name():
    cfg = ExperimentConfig.resolve({"attack": {"target": "square"}})
    assert cfg.attack_spec(("circle", "square", "triangle")).target_class == 1
    with pytest.raises(ConfigError):
        cfg.attack_spec(("circle", "cross"))


def test_synthetic_class_range():
    with pytest.raises(ConfigError, match=r"\[2, 8\]"):
        ExperimentConfig.resolve({"dataset": {"num_classes": 1}})


def test_coco_paths_required(tmp_path):
    with pytest.raises(ConfigError, match="coco_train_annotations"):
        ExperimentConfig.resolve({"dataset": {"source": "coco"}})


def test_file_round_trip(tmp_path):
    cfg = ExperimentConfig.resolve(overrides=["attack.kind=OGA"], seed=7)
    path = tmp_path / "cfg.yaml"
    path.write_text(cfg.to_yaml())
    back = ExperimentConfig.from_file(path)
    assert back.tree == cfg.tree
    assert back.section_hash() == cfg.section_hash()
    assert back.section_hash("attack") != ExperimentConfig.resolve().section_hash("attack")


def test_schema_version_checked():
    with pytest.raises(ConfigError, match="schema_version"):
        ExperimentConfig.resolve({"schema_version": 99})


def test_defaults_untouched_by_resolution():
    before = yaml.safe_dump(DEFAULTS)
    ExperimentConfig.resolve({"attack": {"kind": "ODA"}}, ["train.learning_rate=0.5"])
    assert yaml.safe_dump(DEFAULTS) == before
