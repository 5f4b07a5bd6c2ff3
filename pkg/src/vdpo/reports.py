"""Merging MetricsReports into CSV and markdown tables."""

from __future__ import annotations

import csv
import io
import json

import numpy as np

from .metrics import FID_NOTE, SCHEMA_VERSION, MetricError, MetricsReport

COLUMNS = ("fid", "lpips_proxy", "bleu", "cider")
HEADERS = ("method", "task", "seed", "k", "FID", "LPIPS-proxy", "BLEU", "CIDEr")


def load_reports(paths):
    """Each file holds one report object or a list of them."""
    out = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        for item in obj if isinstance(obj, list) else [obj]:
            if not isinstance(item, dict):
                raise MetricError(f"{path}: report entries must be objects")
            out.append(MetricsReport.from_dict(item))
    return out


def save_reports(reports, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([json.loads(r.to_json()) for r in reports], fh, sort_keys=True, indent=2)
        fh.write("\n")


def table_rows(reports):
    """One row per report, in input order, plus a mean row for every
    (method, task, k) group with more than one report."""
    if not reports:
        raise MetricError("need at least one report")
    versions = {r.schema_version for r in reports}
    if versions != {SCHEMA_VERSION}:
        raise MetricError(f"mixed report schema versions {sorted(versions)}")
    rows = []
    groups = {}
    for r in reports:
        rows.append([r.method, r.task, str(r.seed), str(r.k)] + [f"{getattr(r, c):.6f}" for c in COLUMNS])
        groups.setdefault((r.method, r.task, r.k), []).append(r)
    for (method, task, k), members in groups.items():
        if len(members) > 1:
            means = [np.mean([getattr(m, c) for m in members]) for c in COLUMNS]
            rows.append([method, task, "mean", str(k)] + [f"{v:.6f}" for v in means])
    return rows


def render_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADERS)
    w.writerows(table_rows(reports))
    return buf.getvalue()


def render_md(reports):
    lines = ["| " + " | ".join(HEADERS) + " |", "|" + "---|" * len(HEADERS)]
    lines += ["| " + " | ".join(row) + " |" for row in table_rows(reports)]
    lines += ["", f"Note: {FID_NOTE}."]
    return "\n".join(lines) + "\n"


def render(reports, fmt):
    if fmt == "csv":
        return render_csv(reports)
    if fmt == "md":
        return render_md(reports)
    raise ValueError(f"unknown report format {fmt!r}")
