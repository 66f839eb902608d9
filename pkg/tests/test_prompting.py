import pytest
import torch

from conftest import TINY
from traplab.dataset import build_text_prompt
from traplab.errors import ConfigError, DimensionError, FormatError
from traplab.model import Detector, DetectorConfig
from traplab.prompting import VARIANTS, PromptDims, PromptState, compute_pi, forward_prompted

PROMPT = build_text_prompt(["circle", "square", "triangle", "cross"])
DIMS = PromptDims.for_model(TINY, 4, m_v=3, m_t=2)


@pytest.fixture
def imgs():
    return torch.rand(2, 32, 32, 3, generator=torch.Generator().manual_seed(0))


@torch.no_grad()
def test_all_variants_run(tiny_core, imgs):
    for v in VARIANTS:
        out = forward_prompted(tiny_core, PromptState(v, DIMS), PROMPT, imgs)
        assert out.logits.shape == (2, TINY.num_queries, 4)
        assert torch.isfinite(out.logits).all()


@torch.no_grad()
def test_no_prompts_equals_core(tiny_core, imgs):
    state = PromptState("cocoop-det", DIMS, vision=False, text=False)
    assert state.trainable_parameter_count() == 0
    assert torch.equal(forward_prompted(tiny_core, state, PROMPT, imgs).logits, tiny_core(imgs, PROMPT).logits)


@torch.no_grad()
def test_glip_zero_offsets_equal_zero_shot(tiny_core, imgs):
    state = PromptState("glip-style", DIMS, vision=False)
    assert torch.equal(forward_prompted(tiny_core, state, PROMPT, imgs).logits, tiny_core(imgs, PROMPT).logits)


@torch.no_grad()
def test_cocoop_with_silent_metanet_equals_coop(tiny_core, imgs):
    cocoop = PromptState("cocoop-det", DIMS, seed=3)
    coop = PromptState("coop", DIMS, seed=3)
    coop.context.copy_(cocoop.context)
    for a, b in zip(coop.vision_prompts, cocoop.vision_prompts):
        a.copy_(b)
    cocoop.metanet.fc2.weight.zero_()
    cocoop.metanet.fc2.bias.zero_()
    assert torch.allclose(forward_prompted(tiny_core, cocoop, PROMPT, imgs).logits,
                          forward_prompted(tiny_core, coop, PROMPT, imgs).logits, atol=1e-6)


@torch.no_grad()
def test_coop_class_with_shared_context_equals_coop(tiny_core, imgs):
    coop = PromptState("coop", DIMS, seed=1, vision=False)
    per = PromptState("coop-class", DIMS, seed=1, vision=False)
    per.context.copy_(coop.context.expand(4, -1, -1))
    assert torch.allclose(forward_prompted(tiny_core, per, PROMPT, imgs).logits,
                          forward_prompted(tiny_core, coop, PROMPT, imgs).logits, atol=1e-6)


@torch.no_grad()
def test_image_conditioning_differs_per_image(tiny_core, imgs):
    state = PromptState("cocoop-det", DIMS, seed=0, vision=False)
    feats = tiny_core.vision(imgs)
    pi = compute_pi(feats.final, state.metanet)
    assert pi.shape == (2, TINY.d_t)
    assert not torch.allclose(pi[0], pi[1])


def test_parameter_counts():
    cfg = DetectorConfig()
    dims = PromptDims.for_model(cfg, 4)
    full = PromptState("cocoop-det", dims)
    hidden = cfg.d_v // 16
    expect = cfg.vision_layers * 50 * cfg.d_v + 4 * cfg.d_t + (cfg.d_v * hidden + hidden + hidden * cfg.d_t + cfg.d_t)
    assert full.trainable_parameter_count() == expect
    assert PromptState("coop-class", dims, vision=False).trainable_parameter_count() == 4 * 4 * cfg.d_t
    assert PromptState("glip-style", dims, vision=False).trainable_parameter_count() == 4 * cfg.d_t


def test_trainable_fraction_below_one_percent():
    core = Detector(DetectorConfig())
    for v in VARIANTS:
        state = PromptState(v, PromptDims.for_model(core.cfg, 4))
        assert state.trainable_parameter_count() < 0.01 * core.parameter_count()


def test_errors(tiny_core, imgs):
    with pytest.raises(ConfigError):
        PromptState("vpt", DIMS)
    with pytest.raises(ConfigError):
        PromptState("coop", PromptDims(m_t=0))
    state = PromptState("coop-class", DIMS)
    with pytest.raises(DimensionError):
        forward_prompted(tiny_core, state, build_text_prompt(["a", "b"]), imgs)


def test_save_load(tmp_path, tiny_core, imgs):
    state = PromptState("cocoop-det", DIMS, seed=9)
    state.attack = {"kind": "OMA", "target": 1, "lam": 1.0}
    state.save(tmp_path / "s.ckpt")
    back = PromptState.load(tmp_path / "s.ckpt")
    assert back.variant == "cocoop-det" and back.dims == DIMS and back.attack == state.attack
    with torch.no_grad():
        assert torch.equal(forward_prompted(tiny_core, back, PROMPT, imgs).logits,
                           forward_prompted(tiny_core, state, PROMPT, imgs).logits)
    tiny_core.save(tmp_path / "core.ckpt")
    with pytest.raises(FormatError):
        PromptState.load(tmp_path / "core.ckpt")


def test_seeded_init():
    a, b = PromptState("coop", DIMS, seed=2), PromptState("coop", DIMS, seed=2)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
