import numpy as np
import pytest
import torch

from patchmil.encoder import TOY
from patchmil.model import PatchMILModel
from patchmil.synthetic import SyntheticSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model():
    torch.manual_seed(0)
    return PatchMILModel(TOY)


@pytest.fixture(scope="session")
def small_synthetic(tmp_path_factory):
    """40 planted-patch images shared by the pipeline, inference and CLI tests."""
    root = tmp_path_factory.mktemp("syn")
    return generate(SyntheticSpec(n_images=40), seed=7, out_dir=root)


def random_blob(rng, h=48, w=48):
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0.3 * h, 0.7 * h), rng.uniform(0.3 * w, 0.7 * w)
    ry, rx = rng.uniform(0.15 * h, 0.35 * h), rng.uniform(0.15 * w, 0.35 * w)
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if not mask.any():
        mask[int(cy), int(cx)] = True
    return mask


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
