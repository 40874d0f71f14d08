import numpy as np
import pytest
import torch

from synthplankton.dataset import ImageRecord, ImageSet, make_toy_images, save_image_set


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def toy_set():
    return make_toy_images(24, 32, seed=3)


@pytest.fixture
def toy_dir(tmp_path, toy_set):
    return save_image_set(toy_set, tmp_path / "toy")


def constant_set(values, size=(8, 8)):
    recs = tuple(ImageRecord(f"c{i}", np.full((*size, 3), v, dtype=np.float32)) for i, v in enumerate(values))
    return ImageSet(recs, size, 0)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, with whatever the test recorded."""
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call":
                rows.append((props["criterion"], outcome, props.get("detail", "")))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num, outcome, detail in sorted(rows, key=lambda r: r[0]):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {detail}".rstrip())
