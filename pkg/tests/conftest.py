import numpy as np
import pytest
import torch

from motcast.data import compute_norm_stats, default_recipe, generate_synthetic
from motcast.grid import build_channel_layout, regular_grid, synthetic_mask
from motcast.net import NetConfig

torch.set_num_threads(1)

TOY_NET = NetConfig(latent_dim=32, patch=2, depth=2, window=4, heads=4)
TINY_NET = NetConfig(latent_dim=8, patch=2, depth=1, window=2, heads=2, mlp_ratio=2)


@pytest.fixture(scope="session")
def small_store():
    """8x16 grid, 5 channels, 80 steps; cheap enough for unit tests."""
    grid = regular_grid(8, 16, (0.0, 100.0))
    layout = build_channel_layout(["T", "S"], 2, True)
    mask = synthetic_mask(grid, seed=1)
    return generate_synthetic(default_recipe(layout, seed=1), grid, layout, 80, mask=mask)


@pytest.fixture(scope="session")
def small_stats(small_store):
    return compute_norm_stats(small_store, small_store.split()[0])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    """Store and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
