"""Built-in correctness checks: oracle equivalence, metric fixtures, audit identity.

Also home to the random ensemble builder that the checks (and the test suite)
use to exercise the attribution algorithms on structurally varied trees.
"""

from __future__ import annotations

import numpy as np

from .attribution import brute_force_shapley, tree_shap
from .dataset import BINARY, NUMERIC, ColumnSchema, PreprocessSpec, Table
from .metrics import AuditConfig, audit, kl_divergence, shap_distance
from .model import TrainConfig, Tree, TreeEnsemble
from .attribution import GlobalAttributionVector


def random_tree(rng: np.random.Generator, d: int, max_depth: int, leaf_prob: float = 0.2) -> Tree:
    """A structurally valid random tree: covers are consistent and at least 1 everywhere."""
    cl: list[int] = []
    cr: list[int] = []
    feat: list[int] = []
    thr: list[float] = []
    val: list[float] = []
    cov: list[float] = []

    def add() -> int:
        cl.append(-1)
        cr.append(-1)
        feat.append(-1)
        thr.append(float("nan"))
        val.append(0.0)
        cov.append(0.0)
        return len(cl) - 1

    def grow(depth: int, cover: int) -> int:
        node = add()
        cov[node] = float(cover)
        if depth >= max_depth or cover < 2 or rng.random() < leaf_prob:
            val[node] = float(rng.normal())
            return node
        feat[node] = int(rng.integers(0, d))
        thr[node] = float(rng.random())
        left_cover = int(rng.integers(1, cover))
        cl[node] = grow(depth + 1, left_cover)
        cr[node] = grow(depth + 1, cover - left_cover)
        return node

    grow(0, int(rng.integers(16, 256)))
    return Tree(
        children_left=np.asarray(cl, dtype=np.int32),
        children_right=np.asarray(cr, dtype=np.int32),
        feature=np.asarray(feat, dtype=np.int32),
        threshold=np.asarray(thr, dtype=np.float64),
        value=np.asarray(val, dtype=np.float64),
        cover=np.asarray(cov, dtype=np.float64),
    )


def random_ensemble(
    rng: np.random.Generator,
    d: int,
    max_depth: int,
    n_trees: int,
    leaf_prob: float = 0.2,
) -> TreeEnsemble:
    return TreeEnsemble(
        trees=[random_tree(rng, d, max_depth, leaf_prob) for _ in range(n_trees)],
        base_score=float(rng.normal()),
        learning_rate=float(rng.uniform(0.05, 1.0)),
        feature_names=[f"f{j}" for j in range(d)],
    )


def feature_table(X: np.ndarray, y: np.ndarray | None = None) -> Table:
    """Wrap a float matrix (and optional 0/1 target) as a Table for model/attribution calls."""
    n, d = X.shape
    if y is None:
        y = np.zeros(n, dtype=np.int64)
        y[: n // 2] = 1
    schema = [ColumnSchema(f"f{j}", NUMERIC) for j in range(d)]
    schema.append(ColumnSchema("target", BINARY, "target"))
    columns = {f"f{j}": X[:, j] for j in range(d)}
    columns["target"] = np.asarray(y, dtype=np.int64)
    return Table(schema, columns, {"target": ("0", "1")})


def planted_dataset(rng: np.random.Generator, n: int, d: int = 6) -> Table:
    """A learnable dataset where feature 0 dominates the target."""
    X = rng.normal(size=(n, d))
    logits = 2.5 * X[:, 0] + 0.5 * X[:, 1]
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-logits))).astype(np.int64)
    if y.min() == y.max():  # guard against degenerate draws at tiny n
        y[0] = 1 - y[0]
    return feature_table(X, y)


def check_oracle_equivalence(n_ensembles: int = 25, rows_per_ensemble: int = 10, seed: int = 0) -> float:
    """Max entrywise |tree_shap - brute force| over random ensembles; should be < 1e-9."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_ensembles):
        d = int(rng.integers(1, 11))
        ens = random_ensemble(rng, d, int(rng.integers(1, 5)), int(rng.integers(1, 21)))
        X = rng.random((rows_per_ensemble, d))
        matrix = tree_shap(ens, feature_table(X))
        for i in range(rows_per_ensemble):
            oracle = brute_force_shapley(ens, X[i])
            worst = max(worst, float(np.max(np.abs(oracle - matrix.values[i]))))
    return worst


def check_metric_fixtures() -> float:
    """Max deviation from hand-computed metric values."""
    a = GlobalAttributionVector(np.array([3.0, 4.0]), "mean_abs", ["a", "b"])
    b = GlobalAttributionVector(np.array([4.0, 3.0]), "mean_abs", ["a", "b"])
    dev = abs(shap_distance(a, b) - 0.04)
    kl = kl_divergence(np.array([0.0, 0.0, 1.0, 1.0]), np.array([0.0, 1.0, 1.0, 1.0]), bins=2)
    dev = max(dev, abs(kl - (0.5 * np.log(2.0) + 0.5 * np.log(2.0 / 3.0))))
    return float(dev)


def check_audit_identity(seed: int = 0) -> float:
    """Attribution distance of a table audited against its own copy; should be exactly 0."""
    rng = np.random.default_rng(seed)
    table = planted_dataset(rng, 120)
    config = AuditConfig(
        preprocess=PreprocessSpec(undersample=False),
        train=TrainConfig(num_rounds=10, max_depth=3, min_child_cover=2),
        master_seed=seed,
    )
    report = audit(table, table, config)
    return abs(report.shap_distance)


def run_selftest(verbose: bool = True) -> bool:
    checks = [
        ("oracle equivalence (25 random ensembles)", check_oracle_equivalence(), 1e-9),
        ("metric fixtures (cosine, KL)", check_metric_fixtures(), 1e-4),
        ("audit identity (copy of real)", check_audit_identity(), 0.0),
    ]
    ok = True
    for name, value, tol in checks:
        passed = value <= tol
        ok = ok and passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}: {value:.3e} (tolerance {tol:g})")
    return ok
