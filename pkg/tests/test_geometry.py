import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from traplab.errors import ConfigError, PreconditionError
from traplab.geometry import (
    BoxXYXY,
    Placement,
    TriggerPatch,
    elementwise_giou,
    giou,
    iou,
    pairwise_giou,
    pairwise_iou,
    plan_placement,
    resample,
    stamp,
)


def test_iou_hand_values():
    a = BoxXYXY(0, 0, 2, 2)
    b = BoxXYXY(1, 1, 3, 3)
    # overlap 1, union 7, hull 9
    assert iou(a, b) == pytest.approx(1 / 7, abs=1e-15)
    assert giou(a, b) == pytest.approx(1 / 7 - 2 / 9, abs=1e-15)


def test_iou_identity_and_disjoint():
    a = BoxXYXY(3, 4, 10, 12)
    assert iou(a, a) == 1.0
    assert giou(a, a) == 1.0
    far = BoxXYXY(20, 20, 21, 21)
    assert iou(a, far) == 0.0
    assert -1.0 < giou(a, far) < 0.0


def test_invalid_box_rejected():
    with pytest.raises(PreconditionError):
        iou(BoxXYXY(0, 0, 0, 5), BoxXYXY(0, 0, 1, 1))
    with pytest.raises(PreconditionError):
        giou(BoxXYXY(5, 0, 1, 5), BoxXYXY(0, 0, 1, 1))


def test_xywh_round_trip():
    b = BoxXYXY.from_xywh(1.5, 2.0, 3.0, 4.25)
    assert b.as_tuple() == (1.5, 2.0, 4.5, 6.25)
    assert b.to_xywh() == [1.5, 2.0, 3.0, 4.25]


coords = st.floats(0, 100, allow_nan=False)


@st.composite
def boxes(draw):
    x, y = draw(coords), draw(coords)
    w, h = draw(st.floats(0.01, 50)), draw(st.floats(0.01, 50))
    return BoxXYXY(x, y, x + w, y + h)


@settings(max_examples=200, deadline=None)
@given(boxes(), boxes())
def test_iou_properties(a, b):
    v = iou(a, b)
    g = giou(a, b)
    assert 0.0 <= v <= 1.0
    assert -1.0 <= g <= v + 1e-12
    assert v == pytest.approx(iou(b, a), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(boxes(), min_size=1, max_size=5), st.lists(boxes(), min_size=1, max_size=5))
def test_tensor_ops_match_scalar(xs, ys):
    t1 = torch.tensor([b.as_tuple() for b in xs], dtype=torch.float64)
    t2 = torch.tensor([b.as_tuple() for b in ys], dtype=torch.float64)
    m, _ = pairwise_iou(t1, t2)
    g = pairwise_giou(t1, t2)
    for i, a in enumerate(xs):
        for j, b in enumerate(ys):
            assert float(m[i, j]) == pytest.approx(iou(a, b), abs=1e-9)
            assert float(g[i, j]) == pytest.approx(giou(a, b), abs=1e-9)
    n = min(len(xs), len(ys))
    e = elementwise_giou(t1[:n], t2[:n])
    assert torch.allclose(e, torch.diagonal(g)[:n], atol=1e-12)


# ---------------------------------------------------------------- placement


def test_placement_examples():
    p = plan_placement(BoxXYXY(10, 10, 110, 110), 0.2, 224, 224)
    assert p.rect.as_tuple() == (50, 50, 70, 70)
    q = plan_placement(BoxXYXY(0, 0, 10, 10), 0.1, 224, 224)
    assert q.rect.as_tuple() == (4, 4, 5, 5)


def test_degenerate_size_promoted():
    p = plan_placement(BoxXYXY(0, 0, 3, 3), 0.1, 64, 64)
    assert p.size == (1, 1)


def test_rect_clipped_at_border():
    p = plan_placement(BoxXYXY(0, 0, 64, 64), 1.0, 32, 32)
    assert p.rect.inside(32, 32)


@pytest.mark.parametrize("rho", [0.0, -0.1, 1.5, float("nan")])
def test_bad_rho(rho):
    with pytest.raises(ConfigError):
        plan_placement(BoxXYXY(0, 0, 10, 10), rho, 64, 64)


# ---------------------------------------------------------------- stamping


def test_empty_placements_identity():
    img = torch.rand(16, 16, 3)
    assert stamp(img, TriggerPatch(), []) is img


def test_stamp_writes_resampled_trigger():
    img = torch.zeros(20, 20, 3)
    trig = TriggerPatch(4, 4, seed=3)
    rect = BoxXYXY(2, 5, 10, 9)
    out = stamp(img, trig, [Placement(rect, 0.5)])
    expect = resample(trig.pixels(), 4, 8)
    assert torch.equal(out[5:9, 2:10], expect)
    mask = torch.ones(20, 20, dtype=torch.bool)
    mask[5:9, 2:10] = False
    assert torch.equal(out[mask], img[mask])


def test_resample_identity_at_native_size():
    px = torch.rand(8, 8, 3, dtype=torch.float64)
    assert torch.allclose(resample(px, 8, 8), px, atol=1e-12)


def test_later_placement_wins():
    trig = torch.rand(2, 2, 3, generator=torch.Generator().manual_seed(0))
    img = torch.full((10, 10, 3), 0.5)
    p1 = Placement(BoxXYXY(0, 0, 4, 4), 1.0)
    p2 = Placement(BoxXYXY(2, 2, 6, 6), 1.0)
    out = stamp(img, trig, [p1, p2])
    assert torch.equal(out[2:6, 2:6], resample(trig, 4, 4))
    assert torch.equal(out, stamp(stamp(img, trig, [p1]), trig, [p2]))


def test_stamp_outside_image_rejected():
    with pytest.raises(PreconditionError):
        stamp(torch.zeros(8, 8, 3), TriggerPatch(), [Placement(BoxXYXY(6, 6, 10, 10), 0.5)])


def test_stamp_gradient_matches_finite_difference():
    torch.manual_seed(0)
    trig = TriggerPatch(3, 3, seed=1, init_scale=1.0).double()
    img = torch.rand(12, 12, 3, dtype=torch.float64)
    pl = [Placement(BoxXYXY(1, 2, 8, 7), 0.5)]
    weights = torch.rand(12, 12, 3, dtype=torch.float64)

    def f():
        return (stamp(img, trig, pl) * weights).sum()

    (grad,) = torch.autograd.grad(f(), [trig.base])
    eps = 1e-6
    with torch.no_grad():
        for idx in [(0, 0, 0), (1, 2, 1), (2, 1, 2)]:
            orig = float(trig.base[idx])
            trig.base[idx] = orig + eps
            up = float(f())
            trig.base[idx] = orig - eps
            down = float(f())
            trig.base[idx] = orig
            assert float(grad[idx]) == pytest.approx((up - down) / (2 * eps), rel=1e-6)


def test_trigger_pixels_in_unit_range_and_roundtrip(tmp_path):
    trig = TriggerPatch(5, 7, seed=2)
    px = trig.pixels().detach()
    assert px.shape == (5, 7, 3)
    assert float(px.min()) > 0.0 and float(px.max()) < 1.0
    trig.save(tmp_path / "t.ckpt")
    back = TriggerPatch.load(tmp_path / "t.ckpt")
    assert torch.equal(back.base, trig.base)
    trig.to_png(tmp_path / "t.png")
    assert (tmp_path / "t.png").stat().st_size > 0


def test_trigger_seed_determinism():
    assert torch.equal(TriggerPatch(seed=4).base, TriggerPatch(seed=4).base)
    assert not torch.equal(TriggerPatch(seed=4).base, TriggerPatch(seed=5).base)


def _rho_rule_ok(box: BoxXYXY, rho: float, p: Placement, h: int, w: int) -> bool:
    # Expected size before clipping; clipping can only shrink it, never below one pixel.
    ew = max(1, min(w, math.floor(rho * box.width + 0.5)))
    eh = max(1, min(h, math.floor(rho * box.height + 0.5)))
    ph, pw = p.size
    return 1 <= pw <= ew and 1 <= ph <= eh and (pw == ew or p.rect.a1 == 0 or p.rect.a2 == w) and (ph == eh or p.rect.b1 == 0 or p.rect.b2 == h)


def test_stamp_exactness_random_triples():
    rng = np.random.default_rng(0)
    trig = TriggerPatch(seed=0)
    for _ in range(100):
        h, w = int(rng.integers(8, 80)), int(rng.integers(8, 80))
        x1, y1 = rng.uniform(0, w - 2), rng.uniform(0, h - 2)
        box = BoxXYXY(x1, y1, rng.uniform(x1 + 1, w), rng.uniform(y1 + 1, h))
        rho = float(rng.uniform(0.05, 1.0))
        img = torch.from_numpy(rng.random((h, w, 3)).astype(np.float32))
        p = plan_placement(box, rho, h, w)
        out = stamp(img, trig, [p])
        mask = torch.ones(h, w, dtype=torch.bool)
        mask[p.slices] = False
        assert torch.equal(out[mask], img[mask])
        assert _rho_rule_ok(box, rho, p, h, w)
