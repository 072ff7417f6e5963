"""Shared fixtures.

The heart fixture fabricates a dataset with the shape of the processed
Cleveland heart-disease file (303 rows, 13 features plus a binary target,
"?" as the missing marker in the ca/thal columns) and a planted clinical-ish
signal so models have something real to learn. It is generated, not
downloaded: runs must be hermetic.
"""

from __future__ import annotations

import numpy as np
import pytest

from shapaudit.dataset import load_csv

HEART_COLUMNS = [
    "age", "sex", "cp", "trestbps", "chol", "fbs", "restecg",
    "thalach", "exang", "oldpeak", "slope", "ca", "thal", "num",
]


def make_heart_csv(path, n_rows: int = 303, seed: int = 303) -> None:
    rng = np.random.default_rng(seed)
    age = rng.integers(29, 78, n_rows)
    sex = rng.integers(0, 2, n_rows)
    cp = rng.integers(1, 5, n_rows)
    trestbps = rng.integers(94, 201, n_rows)
    chol = rng.integers(126, 565, n_rows)
    fbs = (rng.random(n_rows) < 0.15).astype(int)
    restecg = rng.integers(0, 3, n_rows)
    thalach = rng.integers(71, 203, n_rows)
    exang = rng.integers(0, 2, n_rows)
    oldpeak = np.round(rng.uniform(0.0, 6.2, n_rows), 1)
    slope = rng.integers(1, 4, n_rows)
    ca = rng.integers(0, 4, n_rows)
    thal = rng.choice([3, 6, 7], n_rows)

    logits = (
        0.9 * (cp - 2.5)
        + 0.8 * (thal == 7)
        + 0.6 * ca
        - 0.03 * (thalach - 150)
        + 0.5 * exang
        + 0.4 * oldpeak
        - 2.2
    )
    target = (rng.random(n_rows) < 1.0 / (1.0 + np.exp(-logits))).astype(int)

    lines = [",".join(HEART_COLUMNS)]
    missing_rows = set(rng.choice(n_rows, size=6, replace=False).tolist())
    for i in range(n_rows):
        ca_cell = "?" if i in missing_rows and i % 2 == 0 else str(ca[i])
        thal_cell = "?" if i in missing_rows and i % 2 == 1 else str(thal[i])
        cells = [
            str(age[i]), str(sex[i]), str(cp[i]), str(trestbps[i]), str(chol[i]),
            str(fbs[i]), str(restecg[i]), str(thalach[i]), str(exang[i]),
            str(oldpeak[i]), str(slope[i]), ca_cell, thal_cell, str(target[i]),
        ]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@pytest.fixture(scope="session")
def heart_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "heart.csv"
    make_heart_csv(path)
    return path


@pytest.fixture(scope="session")
def heart_table(heart_csv):
    return load_csv(heart_csv)
