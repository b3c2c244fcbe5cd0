import numpy as np
import pytest
import scipy.sparse as sp

from posit.dataset import InteractionMatrix


def random_binary(rng, n_users, n_items, density=0.3, min_per_row=1):
    """Random binary matrix where every row has at least ``min_per_row`` ones."""
    dense = rng.random((n_users, n_items)) < density
    for i in range(n_users):
        while dense[i].sum() < min_per_row:
            dense[i, rng.integers(n_items)] = True
    return dense.astype(np.float64)


def as_matrix(dense):
    rows = [np.flatnonzero(r) for r in np.asarray(dense)]
    return InteractionMatrix.from_rows(rows, np.asarray(dense).shape[1])


@pytest.fixture
def rng():
    return np.random.default_rng(20240)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    from posit import synth

    out = tmp_path_factory.mktemp("synth")
    cfg = synth.SynthConfig(n_users=300, n_items=200, n_clusters=12, mean_activity=30, seed=3)
    synth.write(out, cfg)
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
