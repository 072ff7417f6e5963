import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapaudit.attribution import (
    MEAN_ABS,
    MEAN_SIGNED,
    AttributionError,
    AttributionMatrix,
    attribution_rows_for_audit,
    brute_force_shapley,
    global_attribution,
    tree_shap,
    top_k_summary,
    write_attribution_csv,
)
from shapaudit.model import LEAF, Tree, TreeEnsemble, predict_margin
from shapaudit.selftest import feature_table, random_ensemble


def stump(feature, threshold, left_value, right_value, left_cover=1.0, right_cover=1.0, d=2):
    tree = Tree(
        children_left=np.array([1, LEAF, LEAF], dtype=np.int32),
        children_right=np.array([2, LEAF, LEAF], dtype=np.int32),
        feature=np.array([feature, LEAF, LEAF], dtype=np.int32),
        threshold=np.array([threshold, np.nan, np.nan]),
        value=np.array([0.0, left_value, right_value]),
        cover=np.array([left_cover + right_cover, left_cover, right_cover]),
    )
    return TreeEnsemble([tree], 0.0, 1.0, [f"f{j}" for j in range(d)])


class TestTreeShap:
    def test_single_stump_routed_right(self):
        # equal covers: v(empty) = 0, v({0}) = 2, so feature 0 gets all of it
        model = stump(0, 0.5, -2.0, 2.0)
        rows = feature_table(np.array([[1.0, 9.0], [1.0, -9.0]]))
        m = tree_shap(model, rows)
        np.testing.assert_allclose(m.values[0], [2.0, 0.0], atol=1e-12)
        assert m.base_value == 0.0

    def test_empty_ensemble_all_zero(self):
        model = TreeEnsemble([], base_score=1.25, learning_rate=0.1, feature_names=["f0", "f1"])
        m = tree_shap(model, feature_table(np.zeros((3, 2))))
        np.testing.assert_array_equal(m.values, np.zeros((3, 2)))
        assert m.base_value == 1.25

    def test_local_accuracy_on_random_ensembles(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            d = int(rng.integers(2, 12))
            model = random_ensemble(rng, d, int(rng.integers(1, 6)), int(rng.integers(1, 15)))
            X = rng.random((20, d))
            m = tree_shap(model, feature_table(X))
            for i in range(20):
                margin = predict_margin(model, X[i])
                assert m.base_value + m.values[i].sum() == pytest.approx(margin, abs=1e-9)

    def test_feature_name_mismatch_rejected(self):
        model = stump(0, 0.5, -1.0, 1.0, d=3)
        rows = feature_table(np.zeros((2, 2)))
        with pytest.raises(AttributionError, match="feature mismatch"):
            tree_shap(model, rows)

    def test_linearity_across_trees(self):
        rng = np.random.default_rng(5)
        a = random_ensemble(rng, 4, 3, 1)
        b = random_ensemble(rng, 4, 3, 1)
        b.learning_rate = a.learning_rate
        combined = TreeEnsemble(a.trees + b.trees, 0.0, a.learning_rate, a.feature_names)
        only_a = TreeEnsemble(a.trees, 0.0, a.learning_rate, a.feature_names)
        only_b = TreeEnsemble(b.trees, 0.0, a.learning_rate, a.feature_names)
        rows = feature_table(rng.random((6, 4)))
        np.testing.assert_allclose(
            tree_shap(combined, rows).values,
            tree_shap(only_a, rows).values + tree_shap(only_b, rows).values,
            atol=1e-12,
        )


class TestBruteForce:
    def test_oracle_matches_tree_shap(self):
        rng = np.random.default_rng(123)
        worst = 0.0
        for _ in range(40):
            d = int(rng.integers(1, 11))
            model = random_ensemble(rng, d, int(rng.integers(1, 5)), int(rng.integers(1, 21)))
            X = rng.random((5, d))
            m = tree_shap(model, feature_table(X))
            for i in range(5):
                oracle = brute_force_shapley(model, X[i])
                worst = max(worst, float(np.max(np.abs(oracle - m.values[i]))))
        assert worst <= 1e-9

    def test_symmetric_model_symmetric_input(self):
        # two stumps, one per feature, identical shape: f = g(x0) + g(x1)
        t0 = stump(0, 0.5, -1.0, 1.0).trees[0]
        t1 = stump(1, 0.5, -1.0, 1.0).trees[0]
        model = TreeEnsemble([t0, t1], 0.0, 1.0, ["f0", "f1"])
        phi = brute_force_shapley(model, np.array([0.25, 0.25]))
        assert phi[0] == pytest.approx(phi[1], abs=1e-12)

    def test_null_player_gets_zero(self):
        model = stump(0, 0.5, -3.0, 3.0, d=4)
        phi = brute_force_shapley(model, np.array([0.9, 0.1, 0.2, 0.3]))
        np.testing.assert_array_equal(phi[1:], np.zeros(3))
        m = tree_shap(model, feature_table(np.array([[0.9, 0.1, 0.2, 0.3]])))
        np.testing.assert_array_equal(m.values[0][1:], np.zeros(3))

    def test_dimension_limit_enforced(self):
        model = stump(0, 0.5, -1.0, 1.0, d=21)
        with pytest.raises(AttributionError, match="20"):
            brute_force_shapley(model, np.zeros(21))


class TestGlobalAttribution:
    def make(self, values):
        return AttributionMatrix(
            values=np.asarray(values, dtype=np.float64),
            base_value=0.0,
            row_ids=np.arange(len(values)),
            feature_names=[f"f{j}" for j in range(np.asarray(values).shape[1])],
        )

    def test_single_row_mean_abs(self):
        phi = global_attribution(self.make([[1.0, -2.0]]), MEAN_ABS)
        np.testing.assert_array_equal(phi.phi, [1.0, 2.0])

    def test_cancellation_contrast(self):
        m = self.make([[1.0, 0.0], [-1.0, 0.0]])
        np.testing.assert_array_equal(global_attribution(m, MEAN_SIGNED).phi, [0.0, 0.0])
        np.testing.assert_array_equal(global_attribution(m, MEAN_ABS).phi, [1.0, 0.0])

    def test_identical_rows(self):
        m = self.make([[0.5, -1.5]] * 7)
        np.testing.assert_array_equal(global_attribution(m, MEAN_ABS).phi, [0.5, 1.5])

    def test_empty_matrix_rejected(self):
        with pytest.raises(AttributionError, match="empty"):
            global_attribution(self.make(np.zeros((0, 2))))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_mean_abs_is_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        m = self.make(rng.normal(size=(4, 3)))
        assert np.all(global_attribution(m, MEAN_ABS).phi >= 0.0)


class TestAuditRows:
    def test_small_input_fully_explained(self):
        rng = np.random.default_rng(0)
        model = random_ensemble(rng, 3, 2, 4)
        rows = feature_table(rng.random((303, 3)))
        m = attribution_rows_for_audit(model, rows, max_explain_rows=1000, seed=1)
        assert m.values.shape[0] == 303

    def test_cap_is_deterministic(self):
        rng = np.random.default_rng(0)
        model = random_ensemble(rng, 3, 2, 4)
        rows = feature_table(rng.random((1000, 3)))
        a = attribution_rows_for_audit(model, rows, max_explain_rows=100, seed=7)
        b = attribution_rows_for_audit(model, rows, max_explain_rows=100, seed=7)
        assert a.values.shape[0] == 100
        np.testing.assert_array_equal(a.row_ids, b.row_ids)
        np.testing.assert_array_equal(a.values, b.values)

    def test_same_model_same_rows_identical(self):
        rng = np.random.default_rng(4)
        model = random_ensemble(rng, 4, 3, 6)
        rows = feature_table(rng.random((50, 4)))
        a = tree_shap(model, rows)
        b = tree_shap(model, rows)
        np.testing.assert_array_equal(a.values, b.values)


class TestExports:
    def test_csv_long_format(self, tmp_path):
        m = AttributionMatrix(
            values=np.array([[1.0, -0.5]]),
            base_value=0.0,
            row_ids=np.array([3]),
            feature_names=["a", "b"],
        )
        path = tmp_path / "attr.csv"
        write_attribution_csv(m, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "row_id,feature,shap_value"
        assert lines[1] == "3,a,1.0"
        assert len(lines) == 3

    def test_top_k_summary_ranks(self):
        from shapaudit.attribution import GlobalAttributionVector

        phi = GlobalAttributionVector(np.array([0.1, 0.9, 0.5]), MEAN_ABS, ["a", "b", "c"])
        doc = top_k_summary(phi, k=2)
        assert '"feature": "b"' in doc
        assert doc.index('"b"') < doc.index('"c"')
