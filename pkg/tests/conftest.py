import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def synth(tmp_path_factory):
    """Factory for (train, val) planted-signal datasets, cached per spec."""
    from attnpool.data import SyntheticSpec, generate_synthetic, load_dataset

    cache = {}

    def make(**kw):
        key = tuple(sorted(kw.items()))
        if key not in cache:
            spec = SyntheticSpec(**kw)
            out = tmp_path_factory.mktemp("synth")
            manifests = generate_synthetic(spec, out)
            cache[key] = (load_dataset(manifests["train"]), load_dataset(manifests["val"]))
        return cache[key]

    return make


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
