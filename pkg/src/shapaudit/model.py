"""Deterministic gradient-boosted classification trees.

Exact greedy split search over all midpoint thresholds, logistic loss with
second-order (Newton) leaf values, no subsampling and no histogram binning:
the same table and config always produce a bit-identical ensemble. Node covers
(training rows reaching each node) are stored because the attribution value
function weighs descents by them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import Table

LEAF = -1
_HESSIAN_REG = 1.0   # fixed L2 regularization on leaf Newton steps
_MIN_GAIN = 1e-12


class ModelError(ValueError):
    pass


@dataclass
class Tree:
    """One regression tree in flat node-array form; node 0 is the root.

    Internal nodes carry (feature, threshold, children); leaves carry a margin
    value. ``cover`` is the number of training rows that reached the node.
    """

    children_left: np.ndarray   # int32, LEAF at leaves
    children_right: np.ndarray  # int32
    feature: np.ndarray         # int32, LEAF at leaves
    threshold: np.ndarray       # float64, NaN at leaves
    value: np.ndarray           # float64, leaf margin contribution (0 internally)
    cover: np.ndarray           # float64, positive everywhere

    @property
    def n_nodes(self) -> int:
        return len(self.children_left)

    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        out = 0
        for i in range(self.n_nodes):
            out = max(out, int(depth[i]))
            if self.children_left[i] != LEAF:
                depth[self.children_left[i]] = depth[i] + 1
                depth[self.children_right[i]] = depth[i] + 1
        return out

    def leaf_for(self, x: np.ndarray) -> int:
        node = 0
        while self.children_left[node] != LEAF:
            if x[self.feature[node]] < self.threshold[node]:
                node = self.children_left[node]
            else:
                node = self.children_right[node]
        return node

    def leaves_for_matrix(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            internal = self.children_left[node] != LEAF
            if not internal.any():
                return node
            idx = np.nonzero(internal)[0]
            cur = node[idx]
            go_left = X[idx, self.feature[cur]] < self.threshold[cur]
            node[idx] = np.where(go_left, self.children_left[cur], self.children_right[cur])

    def root_expectation(self) -> float:
        """Cover-weighted mean leaf value: the tree's output when no feature is fixed."""
        leaves = self.children_left == LEAF
        return float(np.sum(self.value[leaves] * self.cover[leaves]) / self.cover[0])


@dataclass
class TreeEnsemble:
    trees: list[Tree]
    base_score: float
    learning_rate: float
    feature_names: list[str]

    def predict_margin_matrix(self, X: np.ndarray) -> np.ndarray:
        out = np.full(len(X), self.base_score, dtype=np.float64)
        for tree in self.trees:
            out += self.learning_rate * tree.value[tree.leaves_for_matrix(X)]
        return out

    def to_json(self) -> str:
        """Serialize with hexadecimal float encoding so thresholds round-trip bit-exactly."""
        doc = {
            "format_version": 1,
            "base_score": float.hex(self.base_score),
            "learning_rate": float.hex(self.learning_rate),
            "feature_names": self.feature_names,
            "trees": [
                {
                    "children_left": t.children_left.tolist(),
                    "children_right": t.children_right.tolist(),
                    "feature": t.feature.tolist(),
                    "threshold": [float.hex(v) for v in t.threshold.tolist()],
                    "value": [float.hex(v) for v in t.value.tolist()],
                    "cover": t.cover.tolist(),
                }
                for t in self.trees
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "TreeEnsemble":
        doc = json.loads(text)
        trees = [
            Tree(
                children_left=np.asarray(td["children_left"], dtype=np.int32),
                children_right=np.asarray(td["children_right"], dtype=np.int32),
                feature=np.asarray(td["feature"], dtype=np.int32),
                threshold=np.asarray([float.fromhex(v) for v in td["threshold"]], dtype=np.float64),
                value=np.asarray([float.fromhex(v) for v in td["value"]], dtype=np.float64),
                cover=np.asarray(td["cover"], dtype=np.float64),
            )
            for td in doc["trees"]
        ]
        return cls(
            trees=trees,
            base_score=float.fromhex(doc["base_score"]),
            learning_rate=float.fromhex(doc["learning_rate"]),
            feature_names=list(doc["feature_names"]),
        )


@dataclass(frozen=True)
class TrainConfig:
    num_rounds: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1
    min_child_cover: int = 5
    seed: int = 0  # reserved: training has no stochastic step, kept for config parity

    def __post_init__(self) -> None:
        if self.num_rounds < 1 or self.max_depth < 1 or self.min_child_cover < 1:
            raise ModelError("num_rounds, max_depth, and min_child_cover must be positive")


@dataclass
class _NodeBuf:
    children_left: list[int] = field(default_factory=list)
    children_right: list[int] = field(default_factory=list)
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    value: list[float] = field(default_factory=list)
    cover: list[float] = field(default_factory=list)

    def add(self) -> int:
        self.children_left.append(LEAF)
        self.children_right.append(LEAF)
        self.feature.append(LEAF)
        self.threshold.append(float("nan"))
        self.value.append(0.0)
        self.cover.append(0.0)
        return len(self.children_left) - 1


def _best_split(X: np.ndarray, g: np.ndarray, h: np.ndarray, idx: np.ndarray, min_cover: int):
    """Exact greedy search: best (feature, threshold, gain) over all midpoints.

    Ties on gain keep the lowest feature index, then the lowest threshold.
    """
    g_sum = g[idx].sum()
    h_sum = h[idx].sum()
    parent_score = g_sum * g_sum / (h_sum + _HESSIAN_REG)
    best = (-1, 0.0, 0.0)  # (feature, threshold, gain)
    n = idx.size
    for f in range(X.shape[1]):
        v = X[idx, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        if vs[0] == vs[-1]:
            continue
        gc = np.cumsum(g[idx][order])
        hc = np.cumsum(h[idx][order])
        pos = np.arange(1, n)  # left side takes pos rows
        valid = vs[1:] != vs[:-1]
        valid &= (pos >= min_cover) & (n - pos >= min_cover)
        if not valid.any():
            continue
        gl, hl = gc[:-1], hc[:-1]
        gr, hr = g_sum - gl, h_sum - hl
        gains = np.where(
            valid,
            0.5 * (gl * gl / (hl + _HESSIAN_REG) + gr * gr / (hr + _HESSIAN_REG) - parent_score),
            -np.inf,
        )
        k = int(np.argmax(gains))  # first max: lowest threshold on ties
        if gains[k] > best[2] and gains[k] > _MIN_GAIN:
            best = (f, 0.5 * (vs[k] + vs[k + 1]), float(gains[k]))
    return best


def _build_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray, config: TrainConfig):
    buf = _NodeBuf()
    leaf_assignment = np.zeros(len(X), dtype=np.int64)

    def grow(idx: np.ndarray, depth: int) -> int:
        node = buf.add()
        buf.cover[node] = float(idx.size)
        can_split = depth < config.max_depth and idx.size >= 2 * config.min_child_cover
        if can_split:
            f, thr, gain = _best_split(X, g, h, idx, config.min_child_cover)
        else:
            f = -1
        if f < 0:
            buf.value[node] = -g[idx].sum() / (h[idx].sum() + _HESSIAN_REG)
            leaf_assignment[idx] = node
            return node
        left_mask = X[idx, f] < thr
        buf.feature[node] = f
        buf.threshold[node] = thr
        buf.children_left[node] = grow(idx[left_mask], depth + 1)
        buf.children_right[node] = grow(idx[~left_mask], depth + 1)
        return node

    grow(np.arange(len(X)), 0)
    tree = Tree(
        children_left=np.asarray(buf.children_left, dtype=np.int32),
        children_right=np.asarray(buf.children_right, dtype=np.int32),
        feature=np.asarray(buf.feature, dtype=np.int32),
        threshold=np.asarray(buf.threshold, dtype=np.float64),
        value=np.asarray(buf.value, dtype=np.float64),
        cover=np.asarray(buf.cover, dtype=np.float64),
    )
    return tree, leaf_assignment


def train(train_table: Table, config: TrainConfig) -> TreeEnsemble:
    """Boost logistic-loss trees on a preprocessed table."""
    X = train_table.feature_matrix()
    if X.shape[1] == 0:
        raise ModelError("empty feature set")
    if np.isnan(X).any():
        raise ModelError("features contain missing values; apply a transform first")
    y = train_table.target_codes().astype(np.float64)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ModelError("single-class target")
    if counts.min() < 2:
        raise ModelError("need at least 2 rows per class")

    p = y.mean()
    base_score = float(np.log(p / (1.0 - p)))
    margins = np.full(len(y), base_score, dtype=np.float64)

    trees: list[Tree] = []
    for _ in range(config.num_rounds):
        prob = 1.0 / (1.0 + np.exp(-margins))
        g = prob - y
        h = prob * (1.0 - prob)
        tree, leaf_of = _build_tree(X, g, h, config)
        trees.append(tree)
        margins += config.learning_rate * tree.value[leaf_of]

    return TreeEnsemble(
        trees=trees,
        base_score=base_score,
        learning_rate=config.learning_rate,
        feature_names=list(train_table.feature_names),
    )


def predict_margin(model: TreeEnsemble, row: np.ndarray) -> float:
    """Raw log-odds margin for a single feature vector; routing is value < threshold -> left."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (len(model.feature_names),):
        raise ModelError(f"row length {row.shape} does not match {len(model.feature_names)} features")
    total = model.base_score
    for tree in model.trees:
        total += model.learning_rate * float(tree.value[tree.leaf_for(row)])
    return total


def predict_proba(model: TreeEnsemble, row: np.ndarray) -> float:
    return float(1.0 / (1.0 + np.exp(-predict_margin(model, row))))


def accuracy(model: TreeEnsemble, test: Table) -> float:
    """Fraction of rows where (proba >= 0.5) matches the target; exact ties predict class 1."""
    if test.row_count == 0:
        raise ModelError("empty test table")
    margins = model.predict_margin_matrix(test.feature_matrix())
    pred = (margins >= 0.0).astype(np.int64)
    return float(np.mean(pred == test.target_codes()))


def logistic_loss(model: TreeEnsemble, table: Table, n_rounds: int | None = None) -> float:
    """Mean logistic loss using the first ``n_rounds`` trees (all by default)."""
    X = table.feature_matrix()
    y = table.target_codes().astype(np.float64)
    margins = np.full(len(y), model.base_score, dtype=np.float64)
    for tree in model.trees[: len(model.trees) if n_rounds is None else n_rounds]:
        margins += model.learning_rate * tree.value[tree.leaves_for_matrix(X)]
    return float(np.mean(np.logaddexp(0.0, margins) - y * margins))
