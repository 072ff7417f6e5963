import json

import numpy as np
import pytest

from shapaudit.attribution import MEAN_ABS, GlobalAttributionVector
from shapaudit.dataset import PreprocessSpec
from shapaudit.metrics import AuditConfig
from shapaudit.model import TrainConfig
from shapaudit.refine import (
    GAUSSIAN_COPULA,
    MARGINAL_RESAMPLER,
    GeneratorSpec,
    RefineError,
    fit_generator,
    identify_divergent_features,
    refine_loop,
    sample,
)
from shapaudit.selftest import feature_table, planted_dataset


def vec(values, names=None):
    values = np.asarray(values, dtype=np.float64)
    names = names or [f"f{j}" for j in range(len(values))]
    return GlobalAttributionVector(values, MEAN_ABS, names)


def quick_audit_config(seed=0):
    return AuditConfig(
        preprocess=PreprocessSpec(undersample=False),
        train=TrainConfig(num_rounds=15, max_depth=3, min_child_cover=2),
        master_seed=seed,
    )


class TestGenerators:
    def test_resampler_support_closure(self):
        rng = np.random.default_rng(0)
        real = feature_table(np.array([[1.0], [2.0], [3.0], [4.0]]), np.array([0, 1, 0, 1]))
        gen = fit_generator(real, GeneratorSpec(kind=MARGINAL_RESAMPLER, seed=1))
        syn = sample(gen, 200, seed=2)
        assert set(np.unique(syn.columns["f0"])) <= {1.0, 2.0, 3.0, 4.0}

    def test_copula_independent_columns_near_identity_corr(self):
        rng = np.random.default_rng(1)
        real = feature_table(rng.normal(size=(10000, 3)))
        gen = fit_generator(real, GeneratorSpec(kind=GAUSSIAN_COPULA, seed=1))
        off_diag = gen.copula_chol @ gen.copula_chol.T - np.eye(4)
        assert np.max(np.abs(off_diag)) <= 0.05

    def test_fit_deterministic(self):
        rng = np.random.default_rng(2)
        real = feature_table(rng.normal(size=(500, 3)))
        spec = GeneratorSpec(kind=GAUSSIAN_COPULA, seed=3)
        a = fit_generator(real, spec)
        b = fit_generator(real, spec)
        np.testing.assert_array_equal(a.copula_chol, b.copula_chol)

    def test_constant_column_copula_fallback_warns(self):
        X = np.column_stack([np.full(50, 2.0), np.random.default_rng(0).normal(size=50)])
        real = feature_table(X)
        gen = fit_generator(real, GeneratorSpec(kind=GAUSSIAN_COPULA))
        assert any("constant" in w for w in gen.warnings)
        syn = sample(gen, 40, seed=0)
        assert np.all(syn.columns["f0"] == 2.0)

    def test_sample_deterministic(self):
        rng = np.random.default_rng(3)
        real = planted_dataset(rng, 300)
        for kind in (MARGINAL_RESAMPLER, GAUSSIAN_COPULA):
            gen = fit_generator(real, GeneratorSpec(kind=kind, seed=4))
            a = sample(gen, 100, seed=9)
            b = sample(gen, 100, seed=9)
            assert a.content_digest() == b.content_digest()

    def test_emphasis_one_resampler_bootstraps_whole_rows(self):
        rng = np.random.default_rng(4)
        real = planted_dataset(rng, 50)
        emphasis = {name: 1.0 for name in real.feature_names}
        gen = fit_generator(real, GeneratorSpec(kind=MARGINAL_RESAMPLER, emphasis=emphasis))
        syn = sample(gen, 500, seed=5)
        real_rows = {tuple(row) for row in np.column_stack([real.columns[n] for n in real.feature_names])}
        syn_rows = np.column_stack([syn.columns[n] for n in syn.feature_names])
        assert all(tuple(row) in real_rows for row in syn_rows)

    def test_emphasis_zero_resampler_destroys_correlation(self):
        rng = np.random.default_rng(5)
        t = rng.normal(size=8000)
        X = np.column_stack([t, t + 0.01 * rng.normal(size=8000)])
        real = feature_table(X)
        gen = fit_generator(real, GeneratorSpec(kind=MARGINAL_RESAMPLER))
        syn = sample(gen, 8000, seed=6)
        corr = np.corrcoef(syn.columns["f0"], syn.columns["f1"])[0, 1]
        assert abs(corr) <= 0.05

    def test_schema_preserved(self, heart_table):
        gen = fit_generator(heart_table, GeneratorSpec(kind=MARGINAL_RESAMPLER))
        syn = sample(gen, 77, seed=0)
        assert syn.schema == heart_table.schema
        assert syn.row_count == 77
        assert syn.categories == heart_table.categories

    def test_bad_emphasis_rejected(self):
        with pytest.raises(RefineError, match="emphasis"):
            GeneratorSpec(emphasis={"f0": 1.5})


class TestDivergentFeatures:
    def test_identical_vectors_rank_by_index(self):
        out = identify_divergent_features(vec([1.0, 1.0, 1.0]), vec([2.0, 2.0, 2.0]), top_k=2)
        assert out == [("f0", 0.0), ("f1", 0.0)]

    def test_hand_computed_top1(self):
        out = identify_divergent_features(vec([0.8, 0.2]), vec([0.2, 0.8]), top_k=1)
        assert out[0][0] == "f0"
        assert out[0][1] == pytest.approx(0.6)

    def test_permutation_equivariance(self):
        a = vec([0.5, 0.1, 0.9], ["x", "y", "z"])
        b = vec([0.1, 0.5, 0.2], ["x", "y", "z"])
        perm_a = vec([0.9, 0.5, 0.1], ["z", "x", "y"])
        perm_b = vec([0.2, 0.1, 0.5], ["z", "x", "y"])
        original = identify_divergent_features(a, b, top_k=3)
        permuted = identify_divergent_features(perm_a, perm_b, top_k=3)
        assert [n for n, _ in original] == [n for n, _ in permuted]


class TestRefineLoop:
    def test_vacuous_epsilon_single_iteration(self):
        rng = np.random.default_rng(0)
        real = planted_dataset(rng, 250)
        spec = GeneratorSpec(kind=MARGINAL_RESAMPLER, seed=1, sample_count=250)
        _, trace = refine_loop(real, spec, epsilon=2.0, max_iters=5, audit_config=quick_audit_config())
        assert len(trace.iterations) == 1
        assert trace.best_iteration == 0

    def test_unreachable_epsilon_exhausts_budget(self):
        rng = np.random.default_rng(1)
        real = planted_dataset(rng, 250)
        spec = GeneratorSpec(kind=MARGINAL_RESAMPLER, seed=2, sample_count=250)
        _, trace = refine_loop(real, spec, epsilon=-1.0, max_iters=4, audit_config=quick_audit_config())
        assert len(trace.iterations) == 4

    def test_planted_experiment_improves(self):
        rng = np.random.default_rng(2)
        real = planted_dataset(rng, 400)
        spec = GeneratorSpec(kind=MARGINAL_RESAMPLER, seed=3, sample_count=400)
        _, trace = refine_loop(real, spec, epsilon=0.01, max_iters=5, audit_config=quick_audit_config())
        d_values = [rec.d_shap for rec in trace.iterations]
        best = trace.iterations[trace.best_iteration].d_shap
        assert best == min(d_values)
        assert best <= d_values[0]

    def test_reproducible_traces(self):
        rng = np.random.default_rng(3)
        real = planted_dataset(rng, 250)
        spec = GeneratorSpec(kind=MARGINAL_RESAMPLER, seed=4, sample_count=250)
        _, t1 = refine_loop(real, spec, epsilon=-1.0, max_iters=3, audit_config=quick_audit_config())
        _, t2 = refine_loop(real, spec, epsilon=-1.0, max_iters=3, audit_config=quick_audit_config())
        assert t1.to_jsonl() == t2.to_jsonl()

    def test_trace_jsonl_shape(self):
        rng = np.random.default_rng(4)
        real = planted_dataset(rng, 250)
        spec = GeneratorSpec(kind=MARGINAL_RESAMPLER, seed=5, sample_count=250)
        _, trace = refine_loop(real, spec, epsilon=-1.0, max_iters=2, audit_config=quick_audit_config())
        lines = trace.to_jsonl().strip().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert set(rec) == {"t", "d_shap", "divergent_features", "generator_spec_digest"}

    def test_emphasis_stays_in_unit_interval(self):
        rng = np.random.default_rng(5)
        real = planted_dataset(rng, 250)
        spec = GeneratorSpec(kind=MARGINAL_RESAMPLER, seed=6, sample_count=250)
        # many iterations with a large delta would overflow 1.0 without clamping
        refine_loop(
            real, spec, epsilon=-1.0, max_iters=6, audit_config=quick_audit_config(), delta=0.5
        )

    def test_emphasis_one_matches_real_moments(self):
        rng = np.random.default_rng(6)
        real = planted_dataset(rng, 5000)
        emphasis = {name: 1.0 for name in real.feature_names}
        gen = fit_generator(real, GeneratorSpec(kind=MARGINAL_RESAMPLER, emphasis=emphasis))
        syn = sample(gen, 5000, seed=7)
        for name in real.feature_names:
            col = real.columns[name]
            se = col.std(ddof=1) / np.sqrt(5000)
            assert abs(syn.columns[name].mean() - col.mean()) <= 3 * se
