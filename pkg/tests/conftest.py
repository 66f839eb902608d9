import os

import pytest
import torch

from traplab.model import Detector, DetectorConfig

TINY = DetectorConfig(
    image_size=32,
    patch_size=8,
    d_v=32,
    d_t=32,
    heads=2,
    vision_layers=2,
    text_layers=1,
    decoder_layers=2,
    num_queries=8,
    vocab_buckets=1024,
)


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(autouse=True, scope="session")
def _run_root(tmp_path_factory):
    # Keep the CLI's LATEST marker out of the working tree.
    old = os.environ.get("TRAPLAB_OUT")
    os.environ["TRAPLAB_OUT"] = str(tmp_path_factory.mktemp("runs"))
    yield
    if old is None:
        os.environ.pop("TRAPLAB_OUT", None)
    else:
        os.environ["TRAPLAB_OUT"] = old


@pytest.fixture
def tiny_core():
    return Detector(TINY, seed=0)


# One line per acceptance criterion, printed after the run by the hook below.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
