import numpy as np
import pytest

import indexcast as ic


@pytest.fixture(scope="session")
def small_synthetic():
    """Shared desk-scale dataset: 6 indices, 8 nodes, 120 months."""
    return ic.generate_synthetic(
        seed=7, n_indices=6, n_drivers_per_node=3, n_months=120,
        signal_strength=1.0, n_nodes=8,
    )


@pytest.fixture(scope="session")
def small_graph():
    return ic.synthetic_graph(8, 3)


def make_series(levels, index_id="IDX", start="2001-01-01"):
    """PriceSeries over consecutive weekdays starting at ``start``."""
    levels = np.asarray(levels, dtype=np.float64)
    day = np.datetime64(start, "D")
    dates = []
    while len(dates) < len(levels):
        if ((int(day.astype(np.int64)) + 3) % 7) < 5:
            dates.append(day)
        day += 1
    return ic.PriceSeries(index_id=index_id,
                          dates=np.array(dates, dtype="datetime64[D]"),
                          levels=levels)
