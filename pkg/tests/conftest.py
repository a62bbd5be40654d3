import numpy as np
import pytest

from adlift.ingest import FactorDictionary, FactorTable

acceptance_lines: list[str] = []


def make_table(*factor_counts) -> FactorTable:
    """Build a FactorTable straight from (L_i, 2) count arrays."""
    counts = [np.asarray(c, dtype=np.int64) for c in factor_counts]
    total = int(counts[0].sum())
    dictionary = FactorDictionary(
        [f"f{i}" for i in range(len(counts))],
        [[f"v{k}" for k in range(c.shape[0])] for c in counts])
    return FactorTable(counts, total, dictionary)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def pytest_sessionfinish(session, exitstatus):
    if acceptance_lines:
        print("\n" + "=" * 70)
        print("ACCEPTANCE CRITERIA")
        print("=" * 70)
        for line in acceptance_lines:
            print(line)
