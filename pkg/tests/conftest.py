import csv
from pathlib import Path

import numpy as np
import pytest

DATA = Path(__file__).parent / "data"


def load_ciede2000_pairs():
    rows = []
    with open(DATA / "ciede2000_pairs.csv") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    for r in csv.DictReader(lines):
        rows.append([float(r[k]) for k in ("L1", "a1", "b1", "L2", "a2", "b2", "dE00")])
    return np.array(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
