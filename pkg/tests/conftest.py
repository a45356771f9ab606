"""Shared fixtures: the public breast-cancer table, desk-scale synthetic
stand-ins for the two large sensor datasets, and small helper builders.

The real sensor CSVs are picked up from data/drive.csv and data/pucrio.csv
when present; otherwise the tree-labeled synthetic stand-ins are used.
"""

import os

import numpy as np
import pytest

from treeleak.datasets import Dataset, gen_synthetic_tree, load_csv

DATA_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "data")


def _load_breastcancer():
    try:
        from sklearn.datasets import load_breast_cancer
    except ImportError:
        pytest.skip("scikit-learn not installed (test extra)")
    raw = load_breast_cancer()
    return Dataset(features=np.asarray(raw.data, dtype=np.float64),
                   labels=np.asarray(raw.target, dtype=np.int64),
                   class_count=2)


@pytest.fixture(scope="session")
def breastcancer():
    ds = _load_breastcancer()
    assert ds.n_samples == 569 and ds.n_features == 30
    return ds


def _sensor_table(path, n_rows, f, c, depth, seed):
    """Real CSV subsample when available, tree-labeled synthetic otherwise."""
    if os.path.exists(path):
        full = load_csv(path, label_column="label")
        if full.n_samples > n_rows:
            rng = np.random.default_rng(seed)
            keep = np.sort(rng.choice(full.n_samples, size=n_rows,
                                      replace=False))
            return full.subset(keep)
        return full
    return gen_synthetic_tree(n_rows, f, c, depth, seed=seed,
                              flip_fraction=0.02)


@pytest.fixture(scope="session")
def drive_like():
    """5000 rows, 49 features, 11 classes: motor-current style shape."""
    return _sensor_table(os.path.join(DATA_DIR, "drive.csv"),
                         5000, 49, 11, 7, seed=7000)


@pytest.fixture(scope="session")
def pucrio_like():
    """5000 rows, 18 features, 5 classes: wearable-sensor style shape."""
    return _sensor_table(os.path.join(DATA_DIR, "pucrio.csv"),
                         5000, 18, 5, 6, seed=7001)


@pytest.fixture
def tiny_two_party():
    """60 rows, 6 features, 3 classes; party 1 active with features 0-2."""
    from treeleak.datasets import PartitionSpec, make_partition

    ds = gen_synthetic_tree(60, 6, 3, 3, seed=11)
    views = make_partition(ds, PartitionSpec(
        mode="explicit", explicit=[[0, 1, 2], [3, 4, 5]]))
    return ds, views
