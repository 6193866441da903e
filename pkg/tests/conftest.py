import pytest

from xrlab import taskgen as tg


@pytest.fixture(scope="session")
def default_data():
    """Full default splits (5000/10000/50000), shared across test modules."""
    cfg = tg.GenConfig(seed=0)
    data = tg.generate_dataset(cfg)
    return cfg, data


@pytest.fixture(scope="session")
def small_data():
    """A light dataset for wiring tests: 20 tasks, 8 points per task."""
    cfg = tg.GenConfig(sample_size=160, num_tasks=20, max_index=500, seed=3)
    data = tg.generate_dataset(cfg)
    return cfg, data
