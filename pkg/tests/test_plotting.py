import numpy as np

from traplab import plotting
from traplab.attack import EpochRecord
from traplab.dataset import Annotation
from traplab.geometry import BoxXYXY
from traplab.model import Detection


def _is_png(path):
    return path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_figures_render(tmp_path):
    recs = [EpochRecord(e, 0.2 if e < 2 else 0.1, 3.0 - 0.1 * e, 4.0 - 0.2 * e, 7.0 - 0.3 * e, 0.1) for e in range(4)]
    paths = [
        plotting.plot_loss_curves(recs, tmp_path / "loss.png"),
        plotting.plot_trigger(np.random.default_rng(0).random((8, 8, 3)), tmp_path / "trig.png"),
        plotting.plot_detections(
            np.zeros((32, 32, 3)),
            [Detection(BoxXYXY(2, 2, 10, 10), (0.9, 0.1)), Detection(BoxXYXY(5, 5, 9, 9), (0.2, 0.3))],
            ("circle", "square"),
            tmp_path / "det.png",
            [Annotation(0, BoxXYXY(2, 2, 11, 11))],
            title="clean",
        ),
        plotting.plot_metric_bars({"none": {"asr": 0.9, "bmap": 50.0}, "drop": {"asr": None, "bmap": 40.0}}, tmp_path / "bars.png"),
        plotting.plot_sweep(["coop", "glip-style"], {"asr": [0.5, None]}, tmp_path / "sweep.png", "variant"),
    ]
    assert all(_is_png(p) for p in paths)


def test_figures_are_byte_stable(tmp_path):
    px = np.random.default_rng(1).random((8, 8, 3))
    a = plotting.plot_trigger(px, tmp_path / "a.png").read_bytes()
    b = plotting.plot_trigger(px, tmp_path / "b.png").read_bytes()
    assert a == b
    assert b"matplotlib" not in a
