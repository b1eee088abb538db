"""File formats used by the command line tools: comma-separated sample
matrices, one-column integer label files, JSON mixture descriptions, JSON
result documents, and CSV trace / gap-study tables.

All writers are deterministic (sorted JSON keys, fixed column order) so that
result files from different transports can be compared byte for byte.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .coordinator import ClusteringResult, CoordinatorConfig
from .dataeval import GapEntry, GapReport, MixtureComponent, MixtureSpec
from .errors import ValidationError


def load_samples_csv(path, has_header: bool = False) -> np.ndarray:
    """Read a comma-separated float matrix, one sample per row."""

    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1 if has_header else 0,
                          ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"cannot parse {path} as a float matrix: {exc}") from exc
    if data.size == 0:
        raise ValidationError(f"{path} contains no samples")
    return data


def save_samples_csv(path, samples: np.ndarray) -> None:
    x = np.asarray(samples, dtype=np.float64)
    np.savetxt(path, x, delimiter=",", fmt="%.17g")


def load_labels_csv(path) -> np.ndarray:
    try:
        labels = np.loadtxt(path, dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise ValidationError(f"cannot parse {path} as integer labels: {exc}") from exc
    if labels.ndim != 1:
        raise ValidationError(f"{path} must hold a single label column")
    return labels


def save_labels_csv(path, labels: np.ndarray) -> None:
    np.savetxt(path, np.asarray(labels, dtype=np.int64), fmt="%d")


def load_mixture_spec(path) -> MixtureSpec:
    """JSON layout: {"components": [{"mean": [...], "cov": [[...]], "count": n}]}."""

    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "components" not in doc:
        raise ValidationError(f"{path} must be an object with a 'components' list")
    comps = []
    for i, entry in enumerate(doc["components"]):
        missing = {"mean", "cov", "count"} - set(entry)
        if missing:
            raise ValidationError(
                f"component {i} is missing fields: {sorted(missing)}"
            )
        comps.append(MixtureComponent(
            mean=np.asarray(entry["mean"], dtype=np.float64),
            cov=np.asarray(entry["cov"], dtype=np.float64),
            count=int(entry["count"]),
        ))
    return MixtureSpec(components=tuple(comps))


def save_mixture_spec(path, spec: MixtureSpec) -> None:
    doc = {"components": [
        {"mean": c.mean.tolist(), "cov": c.cov.tolist(), "count": c.count}
        for c in spec.components
    ]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def result_document(result: ClusteringResult, config: CoordinatorConfig,
                    labels_path: str) -> dict:
    """Deterministic JSON-ready summary of a clustering run. Timing and other
    environment-dependent values are deliberately excluded so documents from
    equivalent runs compare equal."""

    model = result.model
    return {
        "n_clusters": config.n_clusters,
        "sigma_n_sq": config.regularization.sigma_n_sq,
        "seed": config.seed,
        "labels_path": labels_path,
        "objective": result.objective,
        "primal_value": result.primal_value,
        "dual_value": result.dual_value,
        "duality_gap_estimate": result.duality_gap_estimate,
        "n_outer_rounds": result.n_outer_rounds,
        "restart_index": result.restart_index,
        "proportions": model.proportions.tolist(),
        "means": model.means.tolist(),
        "covariances": model.covariances.tolist(),
        "empty_clusters": list(model.empty_clusters),
        "trace": [
            {
                "round": rec.outer_round,
                "objective": rec.objective,
                "primal": rec.primal_value,
                "dual": rec.dual_value,
                "gap": rec.gap,
            }
            for rec in result.trace
        ],
    }


def save_result_json(path, document: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def save_trace_csv(path, result: ClusteringResult) -> None:
    """Columns: round, primal, dual, gap (one row per outer round)."""

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "primal", "dual", "gap"])
        for rec in result.trace:
            writer.writerow([
                rec.outer_round,
                f"{rec.primal_value:.17g}",
                f"{rec.dual_value:.17g}",
                f"{rec.gap:.17g}",
            ])


def save_soft_assignments_csv(path, soft: np.ndarray) -> None:
    np.savetxt(path, np.asarray(soft, dtype=np.float64), delimiter=",", fmt="%.17g")


def save_gap_report_csv(path, report: GapReport) -> None:
    """Columns: n_samples, primal, dual, relative_gap."""

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_samples", "primal", "dual", "relative_gap"])
        for entry in report.entries:
            writer.writerow([
                entry.n_samples,
                f"{entry.primal_value:.17g}",
                f"{entry.dual_value:.17g}",
                f"{entry.relative_gap:.17g}",
            ])


def load_gap_report_csv(path) -> GapReport:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["n_samples", "primal", "dual", "relative_gap"]:
        raise ValidationError(f"{path} is not a gap study table")
    entries = tuple(
        GapEntry(n_samples=int(r[0]), primal_value=float(r[1]),
                 dual_value=float(r[2]), relative_gap=float(r[3]))
        for r in rows[1:]
    )
    return GapReport(entries=entries)
