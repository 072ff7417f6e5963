"""shapaudit: semantic-fidelity auditing of synthetic tabular data.

Trains matched gradient-boosted classifiers on a real and a synthetic table,
computes exact SHAP attributions for both on the same holdout rows, and reports
the attribution (cosine) distance alongside per-feature KL divergence, PCA
variance ratios, and statistical gap metrics. A refinement loop feeds the
attribution divergence back into a pluggable generator.
"""

__version__ = "0.1.0"

from .attribution import (
    AttributionMatrix,
    GlobalAttributionVector,
    attribution_rows_for_audit,
    brute_force_shapley,
    global_attribution,
    tree_shap,
)
from .dataset import (
    ColumnSchema,
    FittedTransform,
    PreprocessSpec,
    Table,
    apply_transform,
    fit_transform,
    infer_schema,
    load_csv,
    split,
    undersample,
)
from .metrics import (
    AuditConfig,
    AuditReport,
    audit,
    categorical_kl,
    kl_divergence,
    mean_abs_attribution_diff,
    pca_project,
    pca_variance_ratios,
    run_audit,
    shap_distance,
    statistical_gaps,
)
from .model import TrainConfig, Tree, TreeEnsemble, accuracy, predict_margin, predict_proba, train
from .refine import (
    Generator,
    GeneratorSpec,
    RefinementTrace,
    fit_generator,
    identify_divergent_features,
    refine_loop,
    sample,
)

__all__ = [
    "AttributionMatrix",
    "AuditConfig",
    "AuditReport",
    "ColumnSchema",
    "FittedTransform",
    "Generator",
    "GeneratorSpec",
    "GlobalAttributionVector",
    "PreprocessSpec",
    "RefinementTrace",
    "Table",
    "TrainConfig",
    "Tree",
    "TreeEnsemble",
    "accuracy",
    "apply_transform",
    "attribution_rows_for_audit",
    "audit",
    "brute_force_shapley",
    "categorical_kl",
    "fit_generator",
    "fit_transform",
    "global_attribution",
    "identify_divergent_features",
    "infer_schema",
    "kl_divergence",
    "load_csv",
    "mean_abs_attribution_diff",
    "pca_project",
    "pca_variance_ratios",
    "predict_margin",
    "predict_proba",
    "refine_loop",
    "run_audit",
    "sample",
    "shap_distance",
    "split",
    "statistical_gaps",
    "train",
    "tree_shap",
    "undersample",
]
