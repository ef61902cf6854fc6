import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from painnet.features import AU_NAMES, Dataset, VideoRecord  # noqa: E402
from painnet.synth import SynthSpec, synth_generate  # noqa: E402

# criterion lines collected by the acceptance module, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """44 short synthetic videos from 10 subjects (strong signal)."""
    out = tmp_path_factory.mktemp("small")
    ds = synth_generate(SynthSpec(subjects=10, videos_per_class=4, min_frames=48,
                                  max_frames=96, signal_strength=1.0, seed=3), out)
    return ds, out


@pytest.fixture
def fake_pool():
    """Records only (no feature files), for sampler tests."""
    def make(counts, subjects=5):
        recs = []
        i = 0
        for c, n in enumerate(counts):
            for _ in range(n):
                recs.append(VideoRecord(f"v{i:03d}", f"s{i % subjects}", c, Path("x.csv")))
                i += 1
        return recs
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_frames(rng, T, A=len(AU_NAMES)):
    return rng.uniform(0.0, 1.0, (T, A))


__all__ = ["Dataset", "random_frames"]
