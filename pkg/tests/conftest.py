from pathlib import Path

import numpy as np
import pytest

from sltmpc.config import load_config
from sltmpc.sim import ExperimentSetup

CONFIG_PATH = Path(__file__).resolve().parents[1] / "configs" / "default.cfg"


@pytest.fixture(scope="session")
def cfg():
    return load_config(CONFIG_PATH)


@pytest.fixture(scope="session")
def setup(cfg):
    """Shared experiment setup on the bundled benchmark preset."""
    return ExperimentSetup.from_config(cfg)


@pytest.fixture(scope="session")
def data(setup):
    return setup.data


@pytest.fixture(scope="session")
def terminal(setup):
    return setup.terminal


@pytest.fixture(scope="session")
def drs_entry(setup):
    return setup.drs_entry


@pytest.fixture(scope="session")
def seed_entry(setup):
    """Tube-optimized entry at the configured seed state (nominal cost)."""
    entry = setup.seed_entry(cost_mode="nominal")
    assert entry is not None
    return entry


def random_polytope_2d(rng, n_rows=6, radius=1.0):
    """Random compact 2-D polytope with the origin inside.

    Normals are jittered around an even fan, which keeps every angular gap
    below pi, so the polytope is always bounded.
    """
    spacing = 2 * np.pi / n_rows
    angles = np.arange(n_rows) * spacing + rng.uniform(0, 0.45 * spacing, n_rows)
    H = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    h = rng.uniform(0.3 * radius, radius, n_rows)
    from sltmpc.polytope import HPolytope
    return HPolytope(H, h, constraint_set=True)
