"""Per-image and aggregate metric tables for protection runs.

Protection metrics compare an edit of the (protected or clean) image against
a reference edit of the clean image made with a different noise seed, so the
``clean`` row measures the edit's own variability rather than a trivial
self-comparison.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import features, frechet_from_features, psnr, ssim, cosine

CSV_COLUMNS = ("section", "image_id", "method", "metric", "metric_kind", "strength", "value")
AGG_COLUMNS = ("section", "method", "metric", "metric_kind", "strength", "mean", "std", "count")

PERTURBATION_METRICS = ("ssim", "psnr", "feature_distance", "seconds_per_iter")
PROTECTION_METRICS = ("ia_score", "feature_distance", "psnr")
SET_METRICS = ("frechet",)

METRIC_KIND = {
    "ssim": "standard",
    "psnr": "standard",
    "seconds_per_iter": "timing",
    "ia_score": "feature-based analog",
    "feature_distance": "feature-based analog",
    "frechet": "feature-based analog",
}


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    aggregate: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    min_count: int = 1

    def to_csv(self) -> str:
        return _csv(self.rows, CSV_COLUMNS)

    def aggregate_csv(self) -> str:
        return _csv(self.aggregate, AGG_COLUMNS)

    def to_json(self) -> str:
        doc = {
            "columns": list(CSV_COLUMNS),
            "aggregate_columns": list(AGG_COLUMNS),
            "metric_kind": METRIC_KIND,
            "aggregate": [{k: _jsonval(r[k]) for k in AGG_COLUMNS} for r in self.aggregate],
            "missing": self.missing,
            "min_count": self.min_count,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def lookup(self, method, metric, strength="", section="protection") -> float:
        for r in self.aggregate:
            if (r["section"], r["method"], r["metric"], r["strength"]) == (section, method, metric, _fmt_s(strength)):
                return r["mean"]
        raise KeyError((section, method, metric, strength))

    def write(self, out_dir, stem: str = "metrics") -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"rows": out / f"{stem}.csv", "aggregate": out / f"{stem}_aggregate.csv",
                 "summary": out / f"{stem}.json"}
        paths["rows"].write_text(self.to_csv(), encoding="utf-8")
        paths["aggregate"].write_text(self.aggregate_csv(), encoding="utf-8")
        paths["summary"].write_text(self.to_json(), encoding="utf-8")
        return {k: str(v) for k, v in paths.items()}


def _fmt_s(s) -> str:
    if s in ("", None):
        return ""
    return s if isinstance(s, str) else format(float(s), "g")


def _fmtv(v) -> str:
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "missing"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".10g")


def _jsonval(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmtv(r[c]) for c in columns])
    return buf.getvalue()


def _row(section, image_id, method, metric, strength, value):
    return {"section": section, "image_id": str(image_id), "method": method, "metric": metric,
            "metric_kind": METRIC_KIND[metric], "strength": _fmt_s(strength), "value": float(value)}


def _per_image(metric, a, b, fa, fb):
    if metric == "ssim":
        return [ssim(x, y) for x, y in zip(a, b)]
    if metric == "psnr":
        return [psnr(x, y) for x, y in zip(a, b)]
    if metric == "ia_score":
        return list(cosine(fa, fb))
    if metric == "feature_distance":
        return list(np.sqrt(np.mean((fa - fb) ** 2, axis=1)))
    raise KeyError(f"unknown metric {metric!r}")


def build_report(clean, results: dict, edits: dict, bundle, metrics=None, image_ids=None,
                 min_count: int = 1) -> MetricsReport:
    """Assemble perturbation-quality and protection tables.

    Args:
        clean: clean images, array/tensor (N, C, H, W).
        results: method -> {"x_adv": (N, C, H, W), "seconds_per_iter": float}.
        edits: strength (or an edit label string) -> {"reference": edits of clean images,
            "clean": clean edits under the evaluation seed,
            <method>: edits of that method's protected images}.
        bundle: model whose encoder provides the analog features.
        metrics: subset of metric names to compute (default all).
        image_ids: identifiers for the N images (default 0..N-1).
        min_count: minimum finite samples per aggregate cell.

    Returns:
        MetricsReport. Missing (method, strength) cells produce rows with
        value "missing" and are listed in ``report.missing``.
    """
    metrics = set(metrics or PERTURBATION_METRICS + PROTECTION_METRICS + SET_METRICS)
    clean = np.asarray(clean, dtype=np.float64) if clean is not None else np.zeros((0,))
    n = clean.shape[0] if clean.ndim == 4 else 0
    ids = list(image_ids) if image_ids is not None else list(range(n))
    rep = MetricsReport(min_count=min_count)
    if n == 0:
        return rep
    f_clean = features(clean, bundle)
    methods = list(results)

    for method in methods:
        r = results[method]
        xa = np.asarray(r["x_adv"], dtype=np.float64)
        fa = features(xa, bundle)
        for metric in PERTURBATION_METRICS:
            if metric not in metrics:
                continue
            if metric == "seconds_per_iter":
                vals = [float(r.get("seconds_per_iter", float("nan")))] * n
            else:
                vals = _per_image(metric, xa, clean, fa, f_clean)
            rep.rows += [_row("perturbation", i, method, metric, "", v) for i, v in zip(ids, vals)]

    for strength in sorted(edits, key=_fmt_s):
        per = edits[strength]
        if "reference" not in per:
            rep.missing.append({"method": "reference", "strength": _fmt_s(strength)})
            continue
        ref = np.asarray(per["reference"], dtype=np.float64)
        f_ref = features(ref, bundle)
        for method in ["clean"] + methods:
            if method not in per:
                rep.missing.append({"method": method, "strength": _fmt_s(strength)})
                for metric in PROTECTION_METRICS:
                    if metric in metrics:
                        rep.rows += [_row("protection", i, method, metric, strength, float("nan")) for i in ids]
                if "frechet" in metrics:
                    rep.aggregate.append(_agg("protection", method, "frechet", strength, [float("nan")]))
                continue
            ed = np.asarray(per[method], dtype=np.float64)
            fe = features(ed, bundle)
            for metric in PROTECTION_METRICS:
                if metric in metrics:
                    vals = _per_image(metric, ed, ref, fe, f_ref)
                    rep.rows += [_row("protection", i, method, metric, strength, v) for i, v in zip(ids, vals)]
            if "frechet" in metrics:
                try:
                    fd = frechet_from_features(fe, f_ref)
                except ValueError:
                    fd = float("nan")
                rep.aggregate.append(_agg("protection", method, "frechet", strength, [fd]))

    groups = {}
    for r in rep.rows:
        groups.setdefault((r["section"], r["method"], r["metric"], r["strength"]), []).append(r["value"])
    rep.aggregate += [_agg(s, m, k, st, v) for (s, m, k, st), v in groups.items()]
    rep.aggregate.sort(key=lambda r: (r["section"], r["method"], r["metric"], r["strength"]))
    for r in rep.aggregate:
        if r["metric"] != "frechet" and r["count"] < min_count:
            rep.missing.append({"method": r["method"], "strength": r["strength"], "metric": r["metric"],
                                "reason": f"count {r['count']} < {min_count}"})
    return rep


def _agg(section, method, metric, strength, vals):
    v = np.asarray(vals, dtype=np.float64)
    v = v[np.isfinite(v)]
    return {"section": section, "method": method, "metric": metric, "metric_kind": METRIC_KIND[metric],
            "strength": _fmt_s(strength), "mean": float(v.mean()) if v.size else float("nan"),
            "std": float(v.std()) if v.size else float("nan"), "count": int(v.size)}
