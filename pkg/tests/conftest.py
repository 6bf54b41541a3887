import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from semsplat.config import SyntheticConfig  # noqa: E402
from semsplat.synthetic import generate_synthetic  # noqa: E402

TINY_SCENE = SyntheticConfig(num_classes=3, gaussians_per_class=12, image_size=32, num_views=6, clip_dim=16, grid=3)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """A small synthetic scene (16x16 views after the default 2x downscale)."""
    return generate_synthetic(tmp_path_factory.mktemp("tiny"), TINY_SCENE, seed=3)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
