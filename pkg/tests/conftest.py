import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pdac_subtype.model.bags import PATCH_SIZE_40X, SlideBag

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


def make_bag(rng, n_patches=3, max_cells=5, d_patch=6, d_cell=4, label=0, scale=1.0, slide_id="B"):
    """Small random bag: distinct grid cells, cells placed inside their patch."""
    flat = rng.choice(16, size=n_patches, replace=False)
    grid = np.column_stack([flat % 4, flat // 4])
    counts = rng.integers(0, max_cells + 1, size=n_patches)
    owner = np.repeat(np.arange(n_patches), counts)
    m = int(counts.sum())
    cent = (grid[owner] + rng.uniform(0.05, 0.95, size=(m, 2))) * PATCH_SIZE_40X
    return SlideBag(
        slide_id,
        rng.normal(0, scale, size=(n_patches, d_patch)),
        grid,
        rng.normal(0, scale, size=(m, d_cell)),
        cent,
        rng.integers(0, 5, size=m),
        label,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def report_criterion(number, ok, detail):
    line = f"ACCEPTANCE {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
