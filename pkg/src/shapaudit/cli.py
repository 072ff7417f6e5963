"""Command-line surface: reproducible audit, refinement, and plot-data runs.

Exit codes: 0 success, 1 pipeline failure, 2 configuration or input failure.
All data outputs are byte-deterministic for a given config; wall-clock metadata
lives only in the run_meta.json sidecar.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import write_attribution_csv
from .config import ConfigError, RunConfig, load_config
from .dataset import NUMERIC, DatasetError, Table, load_csv, read_schema_overrides
from .metrics import PipelineError, pca_project, run_audit
from .refine import GeneratorSpec, RefinementAborted, refine_loop
from .seeds import derive_seed
from .selftest import run_selftest

EXIT_OK = 0
EXIT_PIPELINE = 1
EXIT_CONFIG = 2


def _fail_config(message: str) -> int:
    print(f"config error: {message}", file=sys.stderr)
    return EXIT_CONFIG


def _fail_pipeline(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_PIPELINE


def _load_inputs(config: RunConfig, need_syn: bool = True) -> tuple[Table, Table | None]:
    overrides = None
    if config.schema_path:
        schema_file = Path(config.schema_path)
        if not schema_file.exists():
            raise ConfigError(f"no such schema file: {schema_file}")
        overrides = read_schema_overrides(schema_file)

    def load(path_str: str, label: str) -> Table:
        if not path_str:
            raise ConfigError(f"{label} path is not set")
        path = Path(path_str)
        if not path.exists():
            raise ConfigError(f"no such file: {path}")
        return load_csv(path, overrides=overrides)

    real = load(config.real_path, "real dataset")
    syn = load(config.syn_path, "synthetic dataset") if need_syn else None
    return real, syn


def _write_run_meta(out_dir: Path, config: RunConfig, started: float, command: str) -> None:
    meta = {
        "command": command,
        "version": __version__,
        "config_digest": config.digest(),
        "started_utc": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
        "duration_seconds": time.time() - started,
    }
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def _attach_config_provenance(report, config: RunConfig) -> None:
    report.provenance["run_config_digest"] = config.digest()


def cmd_audit(config: RunConfig) -> int:
    started = time.time()
    try:
        real, syn = _load_inputs(config)
    except (ConfigError, DatasetError) as exc:
        return _fail_config(str(exc))
    try:
        run = run_audit(real, syn, config.audit_config())
    except PipelineError as exc:
        return _fail_pipeline(str(exc))

    _attach_config_provenance(run.report, config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(run.report.to_json() + "\n", encoding="utf-8")
    write_attribution_csv(run.attributions_real, out / "attributions_real.csv")
    write_attribution_csv(run.attributions_syn, out / "attributions_syn.csv")
    _write_run_meta(out, config, started, "audit")
    print(f"shap_distance = {run.report.shap_distance!r}")
    print(f"report written to {out / 'report.json'}")
    return EXIT_OK


def cmd_refine(config: RunConfig) -> int:
    started = time.time()
    try:
        real, _ = _load_inputs(config, need_syn=False)
    except (ConfigError, DatasetError) as exc:
        return _fail_config(str(exc))

    spec = GeneratorSpec(
        kind=config.generator,
        seed=derive_seed(config.master_seed, "generator"),
        sample_count=config.sample_count,
    )
    try:
        best_syn, trace = refine_loop(
            real,
            spec,
            epsilon=config.epsilon,
            max_iters=config.max_iters,
            audit_config=config.audit_config(),
            top_k=config.top_k,
            delta=config.delta,
        )
        best_run = run_audit(real, best_syn, config.audit_config())
    except (RefinementAborted, PipelineError) as exc:
        return _fail_pipeline(str(exc))

    _attach_config_provenance(best_run.report, config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    best_syn.to_csv(out / "best_synthetic.csv")
    (out / "trace.jsonl").write_text(trace.to_jsonl(), encoding="utf-8")
    (out / "report.json").write_text(best_run.report.to_json() + "\n", encoding="utf-8")
    _write_run_meta(out, config, started, "refine")
    best = trace.iterations[trace.best_iteration]
    print(f"best iteration t={best.t} with d_shap = {best.d_shap!r} over {len(trace.iterations)} iterations")
    return EXIT_OK


def _safe_name(feature: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", feature)


def _density_rows(real_col: np.ndarray, syn_col: np.ndarray, numeric: bool, bins: int):
    if numeric:
        lo = float(min(real_col.min(), syn_col.min()))
        hi = float(max(real_col.max(), syn_col.max()))
        if lo == hi:
            return [(lo, lo + 1.0, 1.0, 1.0)]
        edges = np.linspace(lo, hi, bins + 1)
        width = edges[1:] - edges[:-1]
        p = np.histogram(real_col, bins=edges)[0] / (len(real_col) * width)
        q = np.histogram(syn_col, bins=edges)[0] / (len(syn_col) * width)
        return list(zip(edges[:-1].tolist(), edges[1:].tolist(), p.tolist(), q.tolist()))
    n_cats = int(max(real_col.max(), syn_col.max())) + 1
    p = np.bincount(real_col.astype(np.int64), minlength=n_cats) / len(real_col)
    q = np.bincount(syn_col.astype(np.int64), minlength=n_cats) / len(syn_col)
    return [(float(c), float(c) + 1.0, float(p[c]), float(q[c])) for c in range(n_cats)]


def cmd_export_plots(config: RunConfig) -> int:
    started = time.time()
    try:
        real, syn = _load_inputs(config)
    except (ConfigError, DatasetError) as exc:
        return _fail_config(str(exc))
    try:
        run = run_audit(real, syn, config.audit_config())
        real_pts, syn_pts = pca_project(run.real_processed, run.syn_processed, config.pca_components)
    except PipelineError as exc:
        return _fail_pipeline(str(exc))

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    for col in run.real_processed.schema:
        if col.role != "feature":
            continue
        rows = _density_rows(
            run.real_processed.columns[col.name],
            run.syn_processed.columns[col.name],
            col.kind == NUMERIC,
            config.kl_bins,
        )
        lines = ["bin_left,bin_right,real_density,syn_density"]
        lines += [f"{repr(a)},{repr(b)},{repr(p)},{repr(q)}" for a, b, p, q in rows]
        (out / f"density_{_safe_name(col.name)}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    lines = ["source,pc1,pc2"]
    lines += [f"real,{repr(float(x))},{repr(float(y))}" for x, y in real_pts[:, :2]]
    lines += [f"syn,{repr(float(x))},{repr(float(y))}" for x, y in syn_pts[:, :2]]
    (out / "pca_points.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    phi_r, phi_s = run.phi_real.phi, run.phi_syn.phi
    order = np.argsort(-np.maximum(phi_r, phi_s), kind="stable")[: config.plot_top_k]
    lines = ["rank,feature,phi_real,phi_syn"]
    lines += [
        f"{rank + 1},{run.phi_real.feature_names[j]},{repr(float(phi_r[j]))},{repr(float(phi_s[j]))}"
        for rank, j in enumerate(order.tolist())
    ]
    (out / "shap_topk.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    _write_run_meta(out, config, started, "export-plots")
    print(f"plot data written to {out}")
    return EXIT_OK


def cmd_selftest() -> int:
    return EXIT_OK if run_selftest(verbose=True) else EXIT_PIPELINE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapaudit",
        description="Audit the semantic fidelity of synthetic tabular data via SHAP attribution divergence.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("audit", "audit a real/synthetic pair and write report.json plus attribution CSVs"),
        ("refine", "run the attribution-guided refinement loop and keep the best synthetic table"),
        ("export-plots", "write density, PCA projection, and top-k attribution data files"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override master_seed")
        p.add_argument("--output", default=None, help="override output_dir")
    sub.add_parser("selftest", help="run the built-in oracle-equivalence and identity checks")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return cmd_selftest()

    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.master_seed = args.seed
        if args.output is not None:
            config.output_dir = args.output
        config.validate()
    except ConfigError as exc:
        return _fail_config(str(exc))

    if args.command == "audit":
        return cmd_audit(config)
    if args.command == "refine":
        return cmd_refine(config)
    return cmd_export_plots(config)


if __name__ == "__main__":
    sys.exit(main())
