"""Side-by-side comparison of two finished runs."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Dict, Optional


# (label, path into report.json)
SCALAR_METRICS = (
    ("psnr", ("recon", "psnr")),
    ("ssim", ("recon", "ssim")),
    ("frechet_recon", ("recon", "frechet_recon")),
    ("eq_rotation_mean", ("equivariance", "rotation_mean")),
    ("eq_scale_mean", ("equivariance", "scale_mean")),
    ("id_per_site", ("id", "id")),
    ("id_flatten", ("id_flatten", "id")),
    ("probe_rotation_mean", ("latent_transform_probe", "rotation_mean")),
)


class MissingReportError(FileNotFoundError):
    pass


def load_report(run_dir) -> dict:
    path = Path(run_dir) / "report.json"
    if not path.exists():
        raise MissingReportError(f"missing report: {path}")
    return json.loads(path.read_text())


def _get(report: dict, keys) -> Optional[float]:
    cur = report
    for k in keys:
        if not isinstance(cur, dict) or cur.get(k) is None:
            return None
        cur = cur[k]
    return float(cur)


def _row(a: Optional[float], b: Optional[float]) -> dict:
    if a is None or b is None:
        return {"a": a, "b": b, "delta": None, "relative": None}
    rel = (b - a) / abs(a) if a != 0 else (0.0 if b == a else math.inf)
    return {"a": a, "b": b, "delta": b - a, "relative": rel}


def compare_reports(ra: dict, rb: dict) -> dict:
    """Deltas ``b - a`` and relative changes ``(b - a) / |a|`` for headline metrics and each transform."""
    table = {name: _row(_get(ra, keys), _get(rb, keys)) for name, keys in SCALAR_METRICS}
    eq = {}
    for t, va in ra.get("equivariance", {}).get("per_transform", {}).items():
        eq[t] = _row(va, rb.get("equivariance", {}).get("per_transform", {}).get(t))
    probe = {}
    pa = ra.get("latent_transform_probe", {}).get("per_transform", {})
    pb = rb.get("latent_transform_probe", {}).get("per_transform", {})
    for t in pa:
        probe[t] = _row(pa[t]["latent_transform"], pb.get(t, {}).get("latent_transform"))
    return {"metrics": table, "equivariance_per_transform": eq, "latent_transform_probe": probe}


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    return f"{v:.4g}"


def _markdown(cmp: dict, name_a: str, name_b: str) -> str:
    lines = [f"| metric | {name_a} | {name_b} | delta | relative |", "|---|---|---|---|---|"]
    for section in ("metrics", "equivariance_per_transform", "latent_transform_probe"):
        prefix = "" if section == "metrics" else {"equivariance_per_transform": "eq ",
                                                   "latent_transform_probe": "probe "}[section]
        for k, r in cmp[section].items():
            rel = "n/a" if r["relative"] is None else f"{100 * r['relative']:+.1f}%"
            lines.append(f"| {prefix}{k} | {_fmt(r['a'])} | {_fmt(r['b'])} | {_fmt(r['delta'])} | {rel} |")
    return "\n".join(lines) + "\n"


def compare_runs(run_a, run_b, out_dir=None) -> Dict:
    """Compare the final reports of two runs and write plot-ready files.

    Writes ``comparison.json``, ``comparison.md``, ``latent_transform_bars.csv`` (probe
    Frechet proxy per latent transform) and ``id_comparison.csv`` into
    ``out_dir`` (default: ``run_b``).

    Raises:
        MissingReportError: either run has no ``report.json``.
    """
    ra, rb = load_report(run_a), load_report(run_b)
    cmp = compare_reports(ra, rb)
    cmp["run_a"], cmp["run_b"] = str(run_a), str(run_b)
    out = Path(out_dir) if out_dir else Path(run_b)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(json.dumps(cmp, indent=2))
    (out / "comparison.md").write_text(_markdown(cmp, Path(run_a).name, Path(run_b).name))
    with open(out / "latent_transform_bars.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["transform", "run", "frechet_proxy"])
        for t, r in cmp["latent_transform_probe"].items():
            w.writerow([t, "a", r["a"]])
            w.writerow([t, "b", r["b"]])
    with open(out / "id_comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "id_a", "id_b"])
        for name in ("id_per_site", "id_flatten"):
            r = cmp["metrics"][name]
            w.writerow([name, r["a"], r["b"]])
    return cmp
