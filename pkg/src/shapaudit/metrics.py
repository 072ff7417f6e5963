"""Attribution distance, distributional divergence, geometry, and gap metrics.

``audit`` wires the full pipeline: one transform fitted on real and applied to
both tables, matched undersampling and splits, two classifiers, SHAP
attributions of both on the same real holdout rows, and every metric assembled
into a single report.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .attribution import (
    MEAN_ABS,
    AttributionMatrix,
    GlobalAttributionVector,
    attribution_rows_for_audit,
    global_attribution,
)
from .dataset import (
    NUMERIC,
    PreprocessSpec,
    Table,
    _undersample_indices,
    apply_transform,
    fit_transform,
    split,
)
from .model import TrainConfig, TreeEnsemble, accuracy, train
from .seeds import derive_seed

DEGENERATE_NORM = 1e-12


class MetricError(ValueError):
    pass


class PipelineError(RuntimeError):
    """An audit stage failed; ``stage`` names the failing stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class AuditConfig:
    preprocess: PreprocessSpec = PreprocessSpec()
    train: TrainConfig = TrainConfig()
    kl_bins: int = 32
    kl_epsilon: float = 1e-9
    pca_components: int = 2
    aggregation: str = MEAN_ABS
    max_explain_rows: int = 1000
    test_fraction: float = 0.2
    master_seed: int = 0

    def digest(self) -> str:
        import dataclasses
        import hashlib

        doc = dataclasses.asdict(self)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class AuditReport:
    shap_distance: float
    mean_abs_attribution_diff: float
    per_feature_kl: dict[str, float]
    pca: dict[str, list[float]]            # real_ratios, syn_ratios
    gaps: dict[str, float | None]          # mean_gap, std_gap, cov_gap, spearman
    accuracy: dict[str, float]             # trtr, tstr
    provenance: dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "report_version": 1,
            "shap_distance": self.shap_distance,
            "mean_abs_attribution_diff": self.mean_abs_attribution_diff,
            "per_feature_kl": self.per_feature_kl,
            "pca": self.pca,
            "gaps": self.gaps,
            "accuracy": self.accuracy,
            "provenance": self.provenance,
        }
        return json.dumps(doc, indent=2)


@dataclass
class AuditRun:
    """An audit report plus the intermediate artifacts the CLI exports."""

    report: AuditReport
    model_real: TreeEnsemble
    model_syn: TreeEnsemble
    attributions_real: AttributionMatrix
    attributions_syn: AttributionMatrix
    phi_real: GlobalAttributionVector
    phi_syn: GlobalAttributionVector
    real_processed: Table
    syn_processed: Table
    real_test: Table


# -- attribution distances ----------------------------------------------------


def _check_aligned(a: GlobalAttributionVector, b: GlobalAttributionVector) -> None:
    if a.feature_names != b.feature_names:
        raise MetricError("attribution vectors have different feature orderings")
    if len(a.phi) != len(b.phi):
        raise MetricError("attribution vectors have different lengths")


def shap_distance(phi_real: GlobalAttributionVector, phi_syn: GlobalAttributionVector) -> float:
    """Cosine distance between global attribution vectors; 0 means parallel reasoning profiles."""
    _check_aligned(phi_real, phi_syn)
    a, b = phi_real.phi, phi_syn.phi
    sq_a = float(np.dot(a, a))
    sq_b = float(np.dot(b, b))
    if math.sqrt(sq_a) <= DEGENERATE_NORM or math.sqrt(sq_b) <= DEGENERATE_NORM:
        raise MetricError("degenerate attribution: zero-norm vector (a model learned nothing)")
    # sqrt of the product keeps the identical-vector case at exactly 0
    return 1.0 - float(np.dot(a, b)) / math.sqrt(sq_a * sq_b)


def mean_abs_attribution_diff(phi_real: GlobalAttributionVector, phi_syn: GlobalAttributionVector) -> float:
    """Mean absolute difference between sum-normalized attribution vectors."""
    _check_aligned(phi_real, phi_syn)
    sum_a = float(phi_real.phi.sum())
    sum_b = float(phi_syn.phi.sum())
    if sum_a <= 0.0 or sum_b <= 0.0:
        raise MetricError("cannot normalize a vector with non-positive sum")
    return float(np.mean(np.abs(phi_real.phi / sum_a - phi_syn.phi / sum_b)))


# -- distributional divergence -------------------------------------------------


def _smoothed_kl(p_counts: np.ndarray, q_counts: np.ndarray, epsilon: float) -> float:
    p = p_counts / p_counts.sum() + epsilon
    q = q_counts / q_counts.sum() + epsilon
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def kl_divergence(
    real_col: np.ndarray,
    syn_col: np.ndarray,
    bins: int = 32,
    epsilon: float = 1e-9,
) -> float:
    """KL(P real || Q synthetic) in nats over a shared equal-width binning of the union range."""
    real_col = np.asarray(real_col, dtype=np.float64)
    syn_col = np.asarray(syn_col, dtype=np.float64)
    if real_col.size == 0 or syn_col.size == 0:
        raise MetricError("kl_divergence needs non-empty columns")
    lo = min(real_col.min(), syn_col.min())
    hi = max(real_col.max(), syn_col.max())
    if lo == hi:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    p_counts, _ = np.histogram(real_col, bins=edges)
    q_counts, _ = np.histogram(syn_col, bins=edges)
    return _smoothed_kl(p_counts.astype(np.float64), q_counts.astype(np.float64), epsilon)


def categorical_kl(real_codes: np.ndarray, syn_codes: np.ndarray, epsilon: float = 1e-9) -> float:
    """KL over the category set itself; one bin per code, no width binning."""
    real_codes = np.asarray(real_codes, dtype=np.int64)
    syn_codes = np.asarray(syn_codes, dtype=np.int64)
    if real_codes.size == 0 or syn_codes.size == 0:
        raise MetricError("categorical_kl needs non-empty columns")
    n_cats = int(max(real_codes.max(), syn_codes.max())) + 1
    p_counts = np.bincount(real_codes, minlength=n_cats).astype(np.float64)
    q_counts = np.bincount(syn_codes, minlength=n_cats).astype(np.float64)
    return _smoothed_kl(p_counts, q_counts, epsilon)


def per_feature_kl(real: Table, syn: Table, bins: int = 32, epsilon: float = 1e-9) -> dict[str, float]:
    """Marginal KL per feature; numeric features use width bins, coded features their category set."""
    out: dict[str, float] = {}
    for col in real.schema:
        if col.role != "feature":
            continue
        if col.kind == NUMERIC:
            out[col.name] = kl_divergence(real.columns[col.name], syn.columns[col.name], bins, epsilon)
        else:
            out[col.name] = categorical_kl(real.columns[col.name], syn.columns[col.name], epsilon)
    return out


# -- geometry -------------------------------------------------------------------


def _covariance_eig(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if X.shape[1] < 2:
        raise MetricError("PCA needs at least 2 feature columns")
    if X.shape[0] < 3:
        raise MetricError("PCA needs at least 3 rows")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (X.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals, kind="stable")[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    # sign convention: the largest-magnitude entry of each eigenvector is positive
    for j in range(eigvecs.shape[1]):
        pivot = int(np.argmax(np.abs(eigvecs[:, j])))
        if eigvecs[pivot, j] < 0:
            eigvecs[:, j] = -eigvecs[:, j]
    return mean, eigvals, eigvecs


def pca_variance_ratios(table: Table, components: int = 2) -> list[float]:
    """Share of variance along the top principal components of the sample covariance."""
    X = table.feature_matrix()
    _, eigvals, _ = _covariance_eig(X)
    trace = float(eigvals.sum())
    if trace <= 0.0:
        raise MetricError("zero trace: all feature columns are constant")
    ratios = np.clip(eigvals / trace, 0.0, 1.0)
    return [float(r) for r in ratios[:components]]


def pca_project(real: Table, syn: Table, components: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Project both tables onto the real table's principal basis."""
    X_real = real.feature_matrix()
    X_syn = syn.feature_matrix()
    mean, eigvals, eigvecs = _covariance_eig(X_real)
    if float(eigvals.sum()) <= 0.0:
        raise MetricError("zero trace: all feature columns are constant")
    basis = eigvecs[:, :components]
    return (X_real - mean) @ basis, (X_syn - mean) @ basis


# -- statistical gaps -------------------------------------------------------------


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _rank_correlation(a: np.ndarray, b: np.ndarray) -> float | None:
    ra, rb = _average_ranks(a), _average_ranks(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    var_a = float(np.dot(da, da))
    var_b = float(np.dot(db, db))
    if var_a == 0.0 or var_b == 0.0:
        return None
    return float(np.dot(da, db)) / math.sqrt(var_a * var_b)


def statistical_gaps(real: Table, syn: Table) -> dict[str, float | None]:
    """Mean/std/covariance gaps and rank correlation of per-feature means, on raw scales."""
    if real.feature_names != syn.feature_names:
        raise MetricError("tables have different feature sets")
    X_r = real.feature_matrix()
    X_s = syn.feature_matrix()
    mu_r, mu_s = X_r.mean(axis=0), X_s.mean(axis=0)
    sd_r = X_r.std(axis=0, ddof=1)
    sd_s = X_s.std(axis=0, ddof=1)
    cov_r = np.atleast_2d(np.cov(X_r, rowvar=False, ddof=1))
    cov_s = np.atleast_2d(np.cov(X_s, rowvar=False, ddof=1))
    spearman = _rank_correlation(mu_r, mu_s) if len(mu_r) >= 2 else None
    return {
        "mean_gap": float(np.mean(np.abs(mu_r - mu_s))),
        "std_gap": float(np.mean(np.abs(sd_r - sd_s))),
        "cov_gap": float(np.linalg.norm(cov_r - cov_s, ord="fro")),
        "spearman": spearman,
    }


# -- the full pipeline --------------------------------------------------------------


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def run_audit(real: Table, syn: Table, config: AuditConfig | None = None) -> AuditRun:
    """Full audit pipeline; returns the report together with its intermediate artifacts."""
    config = config or AuditConfig()
    master = config.master_seed
    seeds = {
        "master": master,
        "undersample": derive_seed(master, "undersample"),
        "split": derive_seed(master, "split"),
        "explain": derive_seed(master, "explain"),
    }

    with _stage("preprocess"):
        transform = fit_transform(real, config.preprocess)
        real_model_view = apply_transform(real, transform)
        syn_model_view = apply_transform(syn, transform)
        if config.preprocess.normalization == "none":
            real_raw, syn_raw = real_model_view, syn_model_view
        else:
            # metrics stay on raw (pre-normalization) scales
            real_raw = apply_transform(real, transform, normalize=False)
            syn_raw = apply_transform(syn, transform, normalize=False)

    if config.preprocess.undersample:
        with _stage("undersample"):
            idx_r = _undersample_indices(real_model_view.target_codes(), seeds["undersample"])
            idx_s = _undersample_indices(syn_model_view.target_codes(), seeds["undersample"])
            real_model_view = real_model_view.select_rows(idx_r)
            syn_model_view = syn_model_view.select_rows(idx_s)
            real_raw = real_raw.select_rows(idx_r)
            syn_raw = syn_raw.select_rows(idx_s)

    with _stage("split"):
        real_train, real_test = split(real_model_view, config.test_fraction, seeds["split"])
        syn_train, _ = split(syn_model_view, config.test_fraction, seeds["split"])

    with _stage("train_real"):
        model_real = train(real_train, config.train)
    with _stage("train_syn"):
        model_syn = train(syn_train, config.train)

    with _stage("attribution"):
        m_real = attribution_rows_for_audit(model_real, real_test, config.max_explain_rows, seeds["explain"])
        m_syn = attribution_rows_for_audit(model_syn, real_test, config.max_explain_rows, seeds["explain"])
        phi_real = global_attribution(m_real, config.aggregation)
        phi_syn = global_attribution(m_syn, config.aggregation)

    with _stage("metrics"):
        report = AuditReport(
            shap_distance=shap_distance(phi_real, phi_syn),
            mean_abs_attribution_diff=mean_abs_attribution_diff(phi_real, phi_syn),
            per_feature_kl=per_feature_kl(real_raw, syn_raw, config.kl_bins, config.kl_epsilon),
            pca={
                "real_ratios": pca_variance_ratios(real_raw, config.pca_components),
                "syn_ratios": pca_variance_ratios(syn_raw, config.pca_components),
            },
            gaps=statistical_gaps(real_raw, syn_raw),
            accuracy={
                "trtr": accuracy(model_real, real_test),
                "tstr": accuracy(model_syn, real_test),
            },
            provenance={
                "seeds": seeds,
                "config_digest": config.digest(),
                "dataset_digests": {"real": real.content_digest(), "syn": syn.content_digest()},
                "transform_warnings": list(transform.warnings),
            },
        )

    return AuditRun(
        report=report,
        model_real=model_real,
        model_syn=model_syn,
        attributions_real=m_real,
        attributions_syn=m_syn,
        phi_real=phi_real,
        phi_syn=phi_syn,
        real_processed=real_raw,
        syn_processed=syn_raw,
        real_test=real_test,
    )


def audit(real: Table, syn: Table, config: AuditConfig | None = None) -> AuditReport:
    """Audit a real/synthetic pair and return the assembled report."""
    return run_audit(real, syn, config).report
