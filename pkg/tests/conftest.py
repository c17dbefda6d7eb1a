import numpy as np
import pytest
import torch

from srunc.imaging import make_pair, synthetic_images
from srunc.losses import FeatureExtractor
from srunc.models import DiscriminatorConfig, GeneratorConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_esrgan_cfg():
    return GeneratorConfig(arch="esrgan", base_channels=16, n_blocks=2, growth_channels=8)


@pytest.fixture
def tiny_srgan_cfg():
    return GeneratorConfig(arch="srgan", base_channels=8, n_blocks=2)


@pytest.fixture
def tiny_disc_cfg():
    return DiscriminatorConfig(base_channels=8, n_stages=2, relativistic=True)


@pytest.fixture(scope="session")
def synthetic_pairs():
    imgs = synthetic_images(8, 32, seed=1)
    return [make_pair(im, (0, 0), 32, 4, f"s{i}") for i, im in enumerate(imgs)]


@pytest.fixture(scope="session")
def random_extractor():
    return FeatureExtractor.random_conv(seed=0)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
