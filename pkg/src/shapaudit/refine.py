"""Generator-agnostic iterative refinement driven by attribution divergence.

The loop samples a synthetic table, audits it against the real table, finds the
features whose normalized attributions diverge most, raises their *emphasis*
(a per-feature fidelity blend: weight w copies that feature from a bootstrapped
real row with probability w, preserving the row's joint context), and
regenerates until the attribution distance falls below epsilon or the
iteration budget runs out. The best iterate, not the last, is returned.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .attribution import GlobalAttributionVector
from .dataset import MISSING_CODE, NUMERIC, DatasetError, Table
from .metrics import AuditConfig, run_audit
from .seeds import derive_seed

MARGINAL_RESAMPLER = "marginal_resampler"
GAUSSIAN_COPULA = "gaussian_copula"

DEFAULT_TOP_K = 3
DEFAULT_DELTA = 0.25


class RefineError(ValueError):
    pass


class RefinementAborted(RuntimeError):
    """An audit failed mid-loop; ``trace`` holds the iterations completed so far."""

    def __init__(self, cause: Exception, trace: "RefinementTrace"):
        super().__init__(f"refinement aborted: {cause}")
        self.cause = cause
        self.trace = trace


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = MARGINAL_RESAMPLER
    emphasis: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    sample_count: int = 1000

    def __post_init__(self) -> None:
        if self.kind not in (MARGINAL_RESAMPLER, GAUSSIAN_COPULA):
            raise RefineError(f"unknown generator kind {self.kind!r}")
        for name, w in self.emphasis.items():
            if not 0.0 <= w <= 1.0:
                raise RefineError(f"emphasis weight for {name!r} must lie in [0, 1], got {w}")
        if self.sample_count < 1:
            raise RefineError("sample_count must be positive")

    def digest(self) -> str:
        doc = {
            "kind": self.kind,
            "emphasis": {k: self.emphasis[k] for k in sorted(self.emphasis)},
            "seed": self.seed,
            "sample_count": self.sample_count,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class IterationRecord:
    t: int
    d_shap: float
    divergent_features: list[tuple[str, float]]
    generator_spec_digest: str


@dataclass
class RefinementTrace:
    iterations: list[IterationRecord]
    best_iteration: int
    epsilon: float
    max_iters: int

    def to_jsonl(self) -> str:
        lines = []
        for rec in self.iterations:
            lines.append(
                json.dumps(
                    {
                        "t": rec.t,
                        "d_shap": rec.d_shap,
                        "divergent_features": [
                            {"feature": name, "score": score} for name, score in rec.divergent_features
                        ],
                        "generator_spec_digest": rec.generator_spec_digest,
                    }
                )
            )
        return "\n".join(lines) + "\n"


@dataclass
class Generator:
    """A fitted generator: the real table plus (for the copula) rank-correlation state."""

    spec: GeneratorSpec
    real: Table
    copula_chol: np.ndarray | None = None
    copula_quantiles: dict[str, np.ndarray] | None = None
    warnings: list[str] = field(default_factory=list)

    def with_spec(self, spec: GeneratorSpec) -> "Generator":
        # fitted state does not depend on emphasis/seed/sample_count, only on (real, kind)
        if spec.kind != self.spec.kind:
            raise RefineError("cannot swap generator kind on a fitted generator")
        return replace(self, spec=spec)


def _column_values_for_copula(table: Table, name: str) -> np.ndarray:
    """Column as float64 with missing imputed (median for numerics, mode code otherwise)."""
    col = table.column_schema(name)
    arr = table.columns[name].astype(np.float64)
    if col.kind == NUMERIC:
        mask = np.isnan(arr)
        if mask.all():
            raise DatasetError(f"column {name!r} is entirely missing")
        if mask.any():
            arr = np.where(mask, np.median(arr[~mask]), arr)
    else:
        mask = table.columns[name] == MISSING_CODE
        if mask.all():
            raise DatasetError(f"column {name!r} is entirely missing")
        if mask.any():
            codes = table.columns[name][~mask]
            counts = np.bincount(codes)
            arr = np.where(mask, float(np.argmax(counts)), arr)
    return arr


def _nearest_psd_correlation(corr: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(corr)
    if eigvals.min() >= 1e-12:
        return corr
    repaired = (eigvecs * np.clip(eigvals, 1e-12, None)) @ eigvecs.T
    scale = np.sqrt(np.diag(repaired))
    return repaired / np.outer(scale, scale)


def fit_generator(real: Table, spec: GeneratorSpec) -> Generator:
    """Fit a generator on the real table; fitting is deterministic and emphasis-independent."""
    if real.row_count == 0:
        raise RefineError("cannot fit a generator on an empty table")
    unknown = sorted(set(spec.emphasis) - set(real.feature_names))
    if unknown:
        raise RefineError(f"emphasis names unknown features: {unknown}")
    if spec.kind == MARGINAL_RESAMPLER:
        return Generator(spec=spec, real=real)

    names = [c.name for c in real.schema]
    n = real.row_count
    warnings: list[str] = []
    quantiles: dict[str, np.ndarray] = {}
    z_cols = []
    constant = []
    for name in names:
        values = _column_values_for_copula(real, name)
        quantiles[name] = np.sort(values)
        if values.min() == values.max():
            constant.append(name)
            z_cols.append(np.zeros(n))
            warnings.append(f"constant column {name!r}: copula falls back to resampling it")
            continue
        ranks = _average_ranks_1d(values)
        z_cols.append(norm.ppf(ranks / (n + 1.0)))
    Z = np.column_stack(z_cols)
    with np.errstate(invalid="ignore"):
        corr = np.corrcoef(Z, rowvar=False)
    for name in constant:
        j = names.index(name)
        corr[j, :] = 0.0
        corr[:, j] = 0.0
        corr[j, j] = 1.0
    corr = _nearest_psd_correlation(corr)
    chol = np.linalg.cholesky(corr + 1e-9 * np.eye(len(names)))
    return Generator(spec=spec, real=real, copula_chol=chol, copula_quantiles=quantiles, warnings=warnings)


def _average_ranks_1d(values: np.ndarray) -> np.ndarray:
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


def _quantile_lookup(sorted_values: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.clip((u * len(sorted_values)).astype(np.int64), 0, len(sorted_values) - 1)
    return sorted_values[idx]


def sample(gen: Generator, m: int, seed: int) -> Table:
    """Draw m rows with the real table's schema.

    Draw order is fixed (context rows, then the generator's own draws, then one
    emphasis mask per feature in schema order), so a seed pins the output.
    """
    if m < 1:
        raise RefineError("sample count must be positive")
    real = gen.real
    n = real.row_count
    rng = np.random.default_rng(seed)
    context = rng.integers(0, n, size=m)

    columns: dict[str, np.ndarray] = {}
    if gen.spec.kind == MARGINAL_RESAMPLER:
        columns[real.target_name] = real.columns[real.target_name][context]
        defaults = {
            name: real.columns[name][rng.integers(0, n, size=m)] for name in real.feature_names
        }
    else:
        normals = rng.standard_normal((m, len(real.schema)))
        correlated = normals @ gen.copula_chol.T
        u = norm.cdf(correlated)
        defaults = {}
        for j, col in enumerate(real.schema):
            drawn = _quantile_lookup(gen.copula_quantiles[col.name], u[:, j])
            if col.kind != NUMERIC:
                drawn = drawn.astype(np.int64)
            if col.role == "target":
                columns[col.name] = drawn
            else:
                defaults[col.name] = drawn

    for name in real.feature_names:
        w = gen.spec.emphasis.get(name, 0.0)
        from_context = rng.random(m) < w
        columns[name] = np.where(from_context, real.columns[name][context], defaults[name])

    return Table(real.schema, columns, real.categories)


def identify_divergent_features(
    phi_real: GlobalAttributionVector,
    phi_syn: GlobalAttributionVector,
    top_k: int,
) -> list[tuple[str, float]]:
    """Features ranked by absolute difference of sum-normalized attributions."""
    if top_k < 1:
        raise RefineError("top_k must be at least 1")
    if phi_real.feature_names != phi_syn.feature_names:
        raise RefineError("attribution vectors have different feature orderings")
    sum_r = float(phi_real.phi.sum())
    sum_s = float(phi_syn.phi.sum())
    if sum_r <= 0.0 or sum_s <= 0.0:
        raise RefineError("cannot normalize a vector with non-positive sum")
    scores = np.abs(phi_real.phi / sum_r - phi_syn.phi / sum_s)
    order = np.lexsort((np.arange(len(scores)), -scores))  # ties break to the lower index
    return [(phi_real.feature_names[j], float(scores[j])) for j in order[:top_k]]


def refine_loop(
    real: Table,
    spec: GeneratorSpec,
    epsilon: float,
    max_iters: int,
    audit_config: AuditConfig | None = None,
    top_k: int = DEFAULT_TOP_K,
    delta: float = DEFAULT_DELTA,
) -> tuple[Table, RefinementTrace]:
    """Generate, audit, emphasize divergent features, and repeat.

    Stops once the attribution distance is at most epsilon or after max_iters
    iterations; returns the synthetic table of the iteration with the minimum
    distance along with the full trace.
    """
    if max_iters < 1:
        raise RefineError("max_iters must be at least 1")
    gen = fit_generator(real, spec)
    syn = sample(gen, spec.sample_count, derive_seed(spec.seed, "sample:0"))

    records: list[IterationRecord] = []
    best_syn = syn
    best_d = np.inf
    best_t = 0
    for t in range(max_iters):
        try:
            run = run_audit(real, syn, audit_config)
        except Exception as exc:
            partial = RefinementTrace(records, best_t, epsilon, max_iters)
            raise RefinementAborted(exc, partial) from exc
        d = run.report.shap_distance
        divergent = identify_divergent_features(run.phi_real, run.phi_syn, top_k)
        records.append(IterationRecord(t, d, divergent, gen.spec.digest()))
        if d < best_d:
            best_d, best_syn, best_t = d, syn, t
        if d <= epsilon or t == max_iters - 1:
            break
        emphasis = dict(gen.spec.emphasis)
        for name, _score in divergent:
            emphasis[name] = min(1.0, emphasis.get(name, 0.0) + delta)
        gen = gen.with_spec(replace(gen.spec, emphasis=emphasis))
        syn = sample(gen, spec.sample_count, derive_seed(spec.seed, f"sample:{t + 1}"))

    return best_syn, RefinementTrace(records, best_t, epsilon, max_iters)
