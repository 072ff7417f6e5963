"""Exact per-sample SHAP values for tree ensembles.

Two independent routes to the same quantity:

* ``tree_shap`` — the polynomial-time path algorithm. It maintains, per path,
  the weights of all coalition sizes simultaneously (EXTEND) and removes one
  feature's factor in closed form when needed (UNWIND). Cost is
  O(leaves * depth^2) per tree per row. The hot loop is JIT-compiled.
* ``brute_force_shapley`` — direct enumeration of all 2^d coalitions against
  the identical cover-weighted value function, used as a correctness oracle.

The value function fixes coalition features to the explained row's values and
descends both children elsewhere, weighted by training covers.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from math import factorial
from pathlib import Path

import numpy as np
from numba import njit

from .dataset import Table
from .model import LEAF, TreeEnsemble

MAX_BRUTE_FORCE_FEATURES = 20

MEAN_ABS = "mean_abs"
MEAN_SIGNED = "mean_signed"


class AttributionError(ValueError):
    pass


@dataclass
class AttributionMatrix:
    """Per-row, per-feature SHAP values; base_value + row sum equals the row's margin."""

    values: np.ndarray       # (n_rows, d) float64
    base_value: float
    row_ids: np.ndarray      # provenance indices into the explained table
    feature_names: list[str]


@dataclass
class GlobalAttributionVector:
    phi: np.ndarray
    aggregation: str
    feature_names: list[str]


@njit(cache=True)
def _shap_one_tree(children_left, children_right, feature, threshold, value, cover, X, phi, max_depth):
    """Accumulate one tree's SHAP values for every row of X into phi (unscaled).

    Iterative depth-first traversal. Path state for tree depth L lives in row L
    of the (depth+2)-row buffers: a child copies its parent's row, extends it
    with its own edge, and unwinds a previous occurrence of the same feature if
    there is one. Sibling subtrees only write strictly deeper rows, so a
    parent's row stays valid until both children have consumed it.
    """
    n_rows = X.shape[0]
    buf = max_depth + 2
    m_d = np.empty((buf, buf), dtype=np.int64)
    m_z = np.empty((buf, buf), dtype=np.float64)  # cover fraction if absent from coalition
    m_o = np.empty((buf, buf), dtype=np.float64)  # routing indicator if present
    m_w = np.empty((buf, buf), dtype=np.float64)  # coalition-size weights

    cap = 2 * max_depth + 4
    st_node = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    st_plen = np.empty(cap, dtype=np.int64)
    st_pz = np.empty(cap, dtype=np.float64)
    st_po = np.empty(cap, dtype=np.float64)
    st_pi = np.empty(cap, dtype=np.int64)

    for r in range(n_rows):
        top = 0
        st_node[0] = 0
        st_depth[0] = 0
        st_plen[0] = 0
        st_pz[0] = 1.0
        st_po[0] = 1.0
        st_pi[0] = -1
        top = 1
        while top > 0:
            top -= 1
            node = st_node[top]
            depth = st_depth[top]
            plen = st_plen[top]
            pz = st_pz[top]
            po = st_po[top]
            pi = st_pi[top]

            row = depth
            if depth > 0:
                for i in range(plen):
                    m_d[row, i] = m_d[row - 1, i]
                    m_z[row, i] = m_z[row - 1, i]
                    m_o[row, i] = m_o[row - 1, i]
                    m_w[row, i] = m_w[row - 1, i]

            # EXTEND with the incoming edge
            m_d[row, plen] = pi
            m_z[row, plen] = pz
            m_o[row, plen] = po
            m_w[row, plen] = 1.0 if plen == 0 else 0.0
            for i in range(plen - 1, -1, -1):
                m_w[row, i + 1] += po * m_w[row, i] * (i + 1.0) / (plen + 1.0)
                m_w[row, i] = pz * m_w[row, i] * (plen - i) / (plen + 1.0)
            length = plen + 1

            if children_left[node] < 0:
                leaf_value = value[node]
                for i in range(1, length):
                    # sum of the path weights with element i's factor unwound
                    oi = m_o[row, i]
                    zi = m_z[row, i]
                    nxt = m_w[row, length - 1]
                    total = 0.0
                    for j in range(length - 2, -1, -1):
                        if oi != 0.0:
                            tmp = nxt * length / ((j + 1.0) * oi)
                            total += tmp
                            nxt = m_w[row, j] - tmp * zi * (length - 1.0 - j) / length
                        else:
                            total += m_w[row, j] * length / (zi * (length - 1.0 - j))
                    phi[r, m_d[row, i]] += total * (m_o[row, i] - m_z[row, i]) * leaf_value
                continue

            split = feature[node]
            # UNWIND a previous occurrence of this feature on the path
            iz = 1.0
            io = 1.0
            k = -1
            for i in range(1, length):
                if m_d[row, i] == split:
                    k = i
                    break
            if k >= 0:
                iz = m_z[row, k]
                io = m_o[row, k]
                nxt = m_w[row, length - 1]
                for j in range(length - 2, -1, -1):
                    if io != 0.0:
                        tmp = m_w[row, j]
                        m_w[row, j] = nxt * length / ((j + 1.0) * io)
                        nxt = tmp - m_w[row, j] * iz * (length - 1.0 - j) / length
                    else:
                        m_w[row, j] = m_w[row, j] * length / (iz * (length - 1.0 - j))
                for j in range(k, length - 1):
                    m_d[row, j] = m_d[row, j + 1]
                    m_z[row, j] = m_z[row, j + 1]
                    m_o[row, j] = m_o[row, j + 1]
                length -= 1

            left = children_left[node]
            right = children_right[node]
            if X[r, split] < threshold[node]:
                hot, cold = left, right
            else:
                hot, cold = right, left
            c = cover[node]

            st_node[top] = cold
            st_depth[top] = depth + 1
            st_plen[top] = length
            st_pz[top] = iz * cover[cold] / c
            st_po[top] = 0.0
            st_pi[top] = split
            top += 1
            st_node[top] = hot
            st_depth[top] = depth + 1
            st_plen[top] = length
            st_pz[top] = iz * cover[hot] / c
            st_po[top] = io
            st_pi[top] = split
            top += 1


def tree_shap(model: TreeEnsemble, rows: Table) -> AttributionMatrix:
    """Exact SHAP values for every row, under the cover-weighted value function."""
    if rows.feature_names != model.feature_names:
        raise AttributionError(
            f"feature mismatch: table has {rows.feature_names}, model expects {model.feature_names}"
        )
    X = np.ascontiguousarray(rows.feature_matrix())
    phi = np.zeros((rows.row_count, X.shape[1]), dtype=np.float64)
    base = model.base_score
    for tree in model.trees:
        _shap_one_tree(
            tree.children_left.astype(np.int64),
            tree.children_right.astype(np.int64),
            tree.feature.astype(np.int64),
            tree.threshold,
            tree.value,
            tree.cover,
            X,
            phi,
            tree.max_depth(),
        )
        base += model.learning_rate * tree.root_expectation()
    phi *= model.learning_rate
    return AttributionMatrix(
        values=phi,
        base_value=float(base),
        row_ids=np.arange(rows.row_count, dtype=np.int64),
        feature_names=list(model.feature_names),
    )


def _coalition_values(model: TreeEnsemble, row: np.ndarray, has: list[np.ndarray], n_sub: int) -> np.ndarray:
    """Value of every coalition at once: descend each tree carrying a weight per coalition."""
    v = np.zeros(n_sub, dtype=np.float64)
    for tree in model.trees:
        stack = [(0, np.ones(n_sub, dtype=np.float64))]
        while stack:
            node, w = stack.pop()
            if tree.children_left[node] == LEAF:
                v += w * tree.value[node]
                continue
            f = int(tree.feature[node])
            left = int(tree.children_left[node])
            right = int(tree.children_right[node])
            hot, cold = (left, right) if row[f] < tree.threshold[node] else (right, left)
            frac_hot = tree.cover[hot] / tree.cover[node]
            frac_cold = tree.cover[cold] / tree.cover[node]
            stack.append((hot, np.where(has[f], w, w * frac_hot)))
            stack.append((cold, np.where(has[f], 0.0, w * frac_cold)))
    return model.base_score + model.learning_rate * v


def brute_force_shapley(model: TreeEnsemble, row: np.ndarray) -> np.ndarray:
    """Shapley values by full coalition enumeration; oracle for tree_shap.

    Combinatorial weights |S|!(d-|S|-1)!/d! are built as exact rationals and
    each feature's sum is accumulated with compensated summation.
    """
    d = len(model.feature_names)
    if d > MAX_BRUTE_FORCE_FEATURES:
        raise AttributionError(
            f"brute force enumerates 2^d coalitions and refuses d > {MAX_BRUTE_FORCE_FEATURES} (got {d})"
        )
    row = np.asarray(row, dtype=np.float64)
    n_sub = 1 << d
    members = np.arange(n_sub, dtype=np.int64)
    has = [((members >> k) & 1).astype(bool) for k in range(d)]
    sizes = np.zeros(n_sub, dtype=np.int64)
    for k in range(d):
        sizes += has[k]

    v = _coalition_values(model, row, has, n_sub)
    weight_table = np.array(
        [float(Fraction(factorial(s) * factorial(d - s - 1), factorial(d))) for s in range(d)],
        dtype=np.float64,
    )

    phi = np.empty(d, dtype=np.float64)
    for k in range(d):
        without = members[~has[k]]
        with_k = without | (1 << k)
        terms = weight_table[sizes[without]] * (v[with_k] - v[without])
        phi[k] = math.fsum(terms.tolist())
    return phi


def global_attribution(m: AttributionMatrix, aggregation: str = MEAN_ABS) -> GlobalAttributionVector:
    """Aggregate per-sample SHAP values into one per-feature vector."""
    if m.values.shape[0] == 0:
        raise AttributionError("cannot aggregate an empty attribution matrix")
    if aggregation == MEAN_ABS:
        phi = np.abs(m.values).mean(axis=0)
    elif aggregation == MEAN_SIGNED:
        phi = m.values.mean(axis=0)
    else:
        raise AttributionError(f"unknown aggregation {aggregation!r}")
    return GlobalAttributionVector(phi=phi, aggregation=aggregation, feature_names=list(m.feature_names))


def attribution_rows_for_audit(
    model: TreeEnsemble,
    real_test: Table,
    max_explain_rows: int = 1000,
    seed: int = 0,
) -> AttributionMatrix:
    """Explain a model on the real holdout rows, subsampled deterministically past the cap.

    Both audited models must be explained on the same rows so that attribution
    differences reflect model differences; callers pass the same seed for both.
    """
    if real_test.row_count == 0:
        raise AttributionError("no rows to explain")
    if real_test.row_count > max_explain_rows:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(real_test.row_count, size=max_explain_rows, replace=False))
    else:
        keep = np.arange(real_test.row_count, dtype=np.int64)
    matrix = tree_shap(model, real_test.select_rows(keep))
    matrix.row_ids = keep
    return matrix


# -- exports ------------------------------------------------------------------


def write_attribution_csv(matrix: AttributionMatrix, path: str | Path) -> None:
    """Long-format export: one (row_id, feature, shap_value) line per cell."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row_id", "feature", "shap_value"])
        for i, rid in enumerate(matrix.row_ids.tolist()):
            for j, name in enumerate(matrix.feature_names):
                writer.writerow([rid, name, repr(float(matrix.values[i, j]))])


def top_k_summary(phi: GlobalAttributionVector, k: int = 10) -> str:
    """JSON summary of the top-k features by global attribution, rank order."""
    order = np.argsort(-phi.phi, kind="stable")[:k]
    doc = {
        "aggregation": phi.aggregation,
        "top_features": [
            {"rank": r + 1, "feature": phi.feature_names[j], "phi": float(phi.phi[j])}
            for r, j in enumerate(order.tolist())
        ],
    }
    return json.dumps(doc, indent=2)
