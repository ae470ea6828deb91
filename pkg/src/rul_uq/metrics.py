"""Accuracy, likelihood, calibration and sharpness metrics plus report assembly."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, ndtr
from scipy.stats import pearsonr, spearmanr

from .objectives import HALF_LOG_2PI
from .predictors import Prediction, PredictiveSampleSet

REPORT_VERSION = 1
DEFAULT_LEVELS = 101
DEFAULT_CONFIDENCE_LEVELS = 21
DEFAULT_LIFETIME_BINS = 10
GROUP_KEYS = ("unit", "dataset", "flight_class")


def _vec(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    return a


def _positive(var, name: str = "variance") -> np.ndarray:
    var = _vec(var, name)
    if np.any(var <= 0):
        raise ValueError(f"{name} must be strictly positive")
    return var


# ---------------------------------------------------------------------------
# pointwise metrics
# ---------------------------------------------------------------------------


def point_metrics(y, mu) -> tuple[float, float]:
    """(MAE, RMSE)."""
    y, mu = _vec(y, "y"), _vec(mu, "mu")
    if y.shape != mu.shape:
        raise ValueError(f"y {y.shape} and mu {mu.shape} differ")
    err = y - mu
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err**2)))


def gaussian_nll_values(y, mu, var) -> np.ndarray:
    y, mu, var = _vec(y, "y"), _vec(mu, "mu"), _positive(var)
    return 0.5 * np.log(var) + (y - mu) ** 2 / (2.0 * var) + HALF_LOG_2PI


def mixture_nll_values(y, samples: PredictiveSampleSet) -> np.ndarray:
    """-log of the equally weighted Gaussian mixture density, via log-sum-exp."""
    y = _vec(y, "y")
    mu, var = samples.mu, samples.var
    if mu.shape[1] != y.size:
        raise ValueError("sample set and targets differ in batch size")
    log_comp = -0.5 * np.log(var) - (y - mu) ** 2 / (2.0 * var) - HALF_LOG_2PI
    return -(logsumexp(log_comp, axis=0) - math.log(mu.shape[0]))


def nll_metric(y, pred: Prediction, mode: str = "moment") -> float:
    if mode == "moment":
        return float(np.mean(gaussian_nll_values(y, pred.mu, pred.var_total)))
    if mode == "mixture":
        if pred.samples is None:
            raise ValueError("mixture NLL needs the retained predictive sample set")
        return float(np.mean(mixture_nll_values(y, pred.samples)))
    raise ValueError(f"unknown NLL mode {mode!r}")


def gaussian_cdf(y, mu, var) -> np.ndarray:
    """Predictive CDF at the target, with the standard deviation in the denominator."""
    y, mu, var = _vec(y, "y"), _vec(mu, "mu"), _positive(var)
    return ndtr((y - mu) / np.sqrt(var))


def sharpness(var) -> float:
    return float(np.sqrt(np.mean(_positive(var))))


def entropy(var) -> np.ndarray:
    """Differential entropy of N(mu, var): 0.5 log(2 pi e var)."""
    return 0.5 * np.log(2.0 * math.pi * math.e * _positive(var))


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@dataclass
class CalibrationCurve:
    levels: np.ndarray
    observed: np.ndarray

    def to_pairs(self) -> list[tuple[float, float]]:
        return [(float(p), float(q)) for p, q in zip(self.levels, self.observed)]


def calibration_curve(pit, m: int = DEFAULT_LEVELS) -> CalibrationCurve:
    """Empirical frequency of PIT values at or below each of ``m`` equally spaced levels."""
    if m < 2:
        raise ValueError("need at least two calibration levels")
    pit = np.asarray(pit, dtype=np.float64).reshape(-1)
    if pit.size == 0:
        raise ValueError("calibration_curve: no PIT values")
    if np.any((pit < 0) | (pit > 1)) or not np.all(np.isfinite(pit)):
        raise ValueError("PIT values must lie in [0, 1]")
    levels = np.arange(m) / (m - 1)
    ordered = np.sort(pit)
    observed = np.searchsorted(ordered, levels, side="right") / pit.size
    return CalibrationCurve(levels, observed)


def rmsce(curve: CalibrationCurve) -> float:
    return float(np.sqrt(np.mean((curve.levels - curve.observed) ** 2)))


def miscalibration_area(curve: CalibrationCurve) -> float:
    return float(np.trapezoid(np.abs(curve.observed - curve.levels), curve.levels))


# ---------------------------------------------------------------------------
# accuracy versus confidence
# ---------------------------------------------------------------------------


@dataclass
class ConfidenceCurve:
    """RMSE on the most confident share of points.

    Entry k keeps the ``quantile[k]`` share of points with the smallest
    predicted variance; ``confidence = 1 - quantile``. Entries whose
    retained set is empty have ``rmse = None``.
    """

    quantile: np.ndarray
    retained_fraction: np.ndarray
    rmse: list

    @property
    def confidence(self) -> np.ndarray:
        return 1.0 - self.quantile

    def valid(self) -> tuple[np.ndarray, np.ndarray]:
        keep = [i for i, r in enumerate(self.rmse) if r is not None]
        return self.confidence[keep], np.array([self.rmse[i] for i in keep])

    def spearman(self) -> float:
        conf, rmse = self.valid()
        if len(conf) < 2:
            return float("nan")
        return float(spearmanr(conf, rmse).statistic)


def rmse_vs_confidence(y, mu, var, levels: int = DEFAULT_CONFIDENCE_LEVELS) -> ConfidenceCurve:
    if levels < 2:
        raise ValueError("need at least two confidence levels")
    y, mu, var = _vec(y, "y"), _vec(mu, "mu"), _positive(var)
    order = np.argsort(var, kind="stable")
    sq_err = ((y - mu) ** 2)[order]
    cum = np.cumsum(sq_err)
    n = y.size
    quantile = np.arange(levels) / (levels - 1)
    counts = np.rint(quantile * n).astype(int)
    rmse = [None if c == 0 else float(np.sqrt(cum[c - 1] / c)) for c in counts]
    return ConfidenceCurve(quantile, counts / n, rmse)


# ---------------------------------------------------------------------------
# row-level evaluation tables
# ---------------------------------------------------------------------------


@dataclass
class EvalRows:
    """One row per test window: identity, target and the prediction."""

    unit_id: np.ndarray
    cycle: np.ndarray
    lifetime_fraction: np.ndarray
    y: np.ndarray
    pred: Prediction

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "EvalRows":
        return EvalRows(self.unit_id[idx], self.cycle[idx], self.lifetime_fraction[idx], self.y[idx],
                        self.pred.take(idx))


def summary_metrics(rows: EvalRows, m: int = DEFAULT_LEVELS) -> dict:
    """Every scalar metric, pooled over the given rows."""
    y, pred = rows.y, rows.pred
    mae, rmse = point_metrics(y, pred.mu)
    curve = calibration_curve(gaussian_cdf(y, pred.mu, pred.var_total), m)
    out = {
        "n": int(len(rows)),
        "mae": mae,
        "rmse": rmse,
        "nll_moment": nll_metric(y, pred, "moment"),
        "nll_mixture": nll_metric(y, pred, "mixture") if pred.samples is not None else None,
        "rmsce": rmsce(curve),
        "miscalibration_area": miscalibration_area(curve),
        "sharpness": sharpness(pred.var_total),
        "mean_entropy": float(np.mean(entropy(pred.var_total))),
        "mean_var_epistemic": float(np.mean(pred.var_epistemic)),
        "mean_var_aleatoric": float(np.mean(pred.var_aleatoric)),
    }
    return out


def group_keys(rows: EvalRows, key: str, units: dict[int, dict]) -> np.ndarray:
    if key == "unit":
        return rows.unit_id.copy()
    if key in ("dataset", "flight_class"):
        field_name = "dataset_id" if key == "dataset" else "flight_class"
        try:
            return np.array([int(units[int(u)][field_name]) for u in rows.unit_id])
        except KeyError as exc:
            raise ValueError(f"unit {exc} is missing from the manifest") from None
    raise ValueError(f"unknown group key {key!r}; expected one of {GROUP_KEYS}")


def group_aggregate(rows: EvalRows, key: str, units: dict[int, dict], m: int = DEFAULT_LEVELS) -> dict[str, dict]:
    """Metrics per group, each computed by pooling that group's rows."""
    labels = group_keys(rows, key, units)
    return {str(g): summary_metrics(rows.take(np.nonzero(labels == g)[0]), m) for g in np.unique(labels)}


def lifetime_bin_edges(bins: int) -> np.ndarray:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    return np.linspace(0.0, 1.0, bins + 1)


def lifetime_bin_index(lifetime_fraction, bins: int) -> np.ndarray:
    """Equal-width bin of each fraction; 1.0 falls in the last bin."""
    lf = np.asarray(lifetime_fraction, dtype=np.float64)
    if np.any((lf < 0) | (lf > 1)):
        raise ValueError("lifetime_fraction must lie in [0, 1]")
    return np.minimum((lf * bins).astype(int), bins - 1)


def lifetime_binned(rows: EvalRows, bins: int = DEFAULT_LIFETIME_BINS, m: int = DEFAULT_LEVELS) -> list[dict]:
    """Per-bin metrics over the lifetime; empty bins carry None metrics."""
    edges = lifetime_bin_edges(bins)
    idx = lifetime_bin_index(rows.lifetime_fraction, bins)
    out = []
    for k in range(bins):
        sel = np.nonzero(idx == k)[0]
        entry = {"bin": k, "lo": float(edges[k]), "hi": float(edges[k + 1]), "n": int(sel.size)}
        if sel.size == 0:
            entry.update({"rmse": None, "sharpness": None, "rmsce": None, "nll": None,
                          "mean_var_aleatoric": None, "mean_var_epistemic": None})
        else:
            s = summary_metrics(rows.take(sel), m)
            entry.update({"rmse": s["rmse"], "sharpness": s["sharpness"], "rmsce": s["rmsce"],
                          "nll": s["nll_moment"], "mean_var_aleatoric": s["mean_var_aleatoric"],
                          "mean_var_epistemic": s["mean_var_epistemic"]})
        out.append(entry)
    return out


def binned_mean(values, lifetime_fraction, bins: int = DEFAULT_LIFETIME_BINS) -> np.ndarray:
    """Mean of ``values`` per lifetime bin (NaN for empty bins)."""
    values = np.asarray(values, dtype=np.float64)
    idx = lifetime_bin_index(lifetime_fraction, bins)
    sums = np.bincount(idx, weights=values, minlength=bins)
    counts = np.bincount(idx, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def pearson(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    keep = np.isfinite(a) & np.isfinite(b)
    if keep.sum() < 2:
        return float("nan")
    return float(pearsonr(a[keep], b[keep]).statistic)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def build_report(method: str, seed: int, fingerprint: str, rows: EvalRows, units: dict[int, dict],
                 m: int = DEFAULT_LEVELS, confidence_levels: int = DEFAULT_CONFIDENCE_LEVELS,
                 bins: int = DEFAULT_LIFETIME_BINS) -> dict:
    pred = rows.pred
    curve = calibration_curve(gaussian_cdf(rows.y, pred.mu, pred.var_total), m)
    conf = rmse_vs_confidence(rows.y, pred.mu, pred.var_total, confidence_levels)
    ood = {int(u["unit_id"]) for u in units.values() if u.get("ood_flag")}
    ood_mask = np.isin(rows.unit_id, list(ood))
    entropy_split = {}
    ent = entropy(pred.var_total)
    for name, mask in (("in_distribution", ~ood_mask), ("ood", ood_mask)):
        entropy_split[name] = float(np.mean(ent[mask])) if mask.any() else None
    return {
        "format_version": REPORT_VERSION,
        "method": method,
        "seed": int(seed),
        "dataset_fingerprint": fingerprint,
        "nominal_decomposition": bool(pred.nominal_split),
        "overall": summary_metrics(rows, m),
        "per_unit": group_aggregate(rows, "unit", units, m),
        "per_dataset": group_aggregate(rows, "dataset", units, m),
        "per_flight_class": group_aggregate(rows, "flight_class", units, m),
        "calibration_curve": {"levels": curve.levels.tolist(), "observed": curve.observed.tolist()},
        "rmse_vs_confidence": {
            "quantile": conf.quantile.tolist(),
            "confidence": conf.confidence.tolist(),
            "retained_fraction": conf.retained_fraction.tolist(),
            "rmse": conf.rmse,
            "spearman": conf.spearman(),
        },
        "lifetime_bins": lifetime_binned(rows, bins, m),
        "mean_entropy_by_ood": entropy_split,
    }


def _clean(obj):
    """Replace NaN with None so the JSON stays standard."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(_clean(report), indent=1, sort_keys=True) + "\n")


def read_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    if report.get("format_version") != REPORT_VERSION:
        raise ValueError(f"{path}: report format_version {report.get('format_version')!r} unsupported")
    return report


def write_curve_csv(path, header: tuple[str, str], pairs) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for a, b in pairs:
            writer.writerow([repr(float(a)), "" if b is None else repr(float(b))])


def export_curves(report: dict, out_dir, stem: str) -> list[Path]:
    """Write the calibration and RMSE-vs-confidence curves of a report as CSV."""
    out_dir = Path(out_dir)
    cal = report["calibration_curve"]
    conf = report["rmse_vs_confidence"]
    paths = [out_dir / f"{stem}_calibration.csv", out_dir / f"{stem}_rmse_vs_confidence.csv"]
    write_curve_csv(paths[0], ("level", "observed"), zip(cal["levels"], cal["observed"]))
    write_curve_csv(paths[1], ("confidence", "rmse"), zip(conf["confidence"], conf["rmse"]))
    return paths


OVERALL_KEYS = ("mae", "rmse", "nll_moment", "nll_mixture", "rmsce", "miscalibration_area", "sharpness",
                "mean_entropy")


def aggregate_runs(reports: list[dict]) -> dict[str, dict]:
    """Mean and sample standard deviation (ddof=1; 0 for a single run) across seeds."""
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {}
    for key in OVERALL_KEYS:
        vals = [r["overall"][key] for r in reports if r["overall"].get(key) is not None]
        if not vals:
            out[key] = {"mean": None, "std": None, "n": 0}
            continue
        arr = np.asarray(vals, dtype=np.float64)
        std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
        out[key] = {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}
    return out


def compare_reports(reports: list[dict], sort_key: str = "nll_moment") -> list[dict]:
    """Methods ranked by the mean of ``sort_key`` across their runs.

    Reports built on different datasets cannot be compared.
    """
    if not reports:
        raise ValueError("nothing to compare")
    prints = {r["dataset_fingerprint"] for r in reports}
    if len(prints) > 1:
        raise ValueError(f"reports come from different datasets: {sorted(prints)}")
    by_method: dict[str, list[dict]] = {}
    for r in reports:
        by_method.setdefault(r["method"], []).append(r)
    rows = []
    for method, group in by_method.items():
        stats = aggregate_runs(group)
        rows.append({"method": method, "n_runs": len(group),
                     "seeds": sorted(r["seed"] for r in group), "metrics": stats,
                     "nominal_decomposition": any(r.get("nominal_decomposition") for r in group)})
    rows.sort(key=lambda r: (math.inf if r["metrics"][sort_key]["mean"] is None
                             else r["metrics"][sort_key]["mean"], r["method"]))
    return rows


def format_comparison(rows: list[dict], keys=("nll_moment", "rmse", "rmsce", "sharpness")) -> str:
    """Plain-text table; the +- figure is the standard deviation across runs."""
    head = f"{'method':<10} {'runs':>4} " + " ".join(f"{k + ' (mean +- sd)':>26}" for k in keys)
    lines = [head]
    for r in rows:
        cells = []
        for k in keys:
            s = r["metrics"][k]
            cells.append(f"{'n/a':>26}" if s["mean"] is None else f"{s['mean']:>15.4f} +- {s['std']:<7.4f}")
        lines.append(f"{r['method']:<10} {r['n_runs']:>4} " + " ".join(cells))
    return "\n".join(lines)


def svg_line_chart(series: dict[str, list[tuple[float, float]]], path, title: str = "",
                   width: int = 480, height: int = 320) -> None:
    """Minimal static SVG line chart, one polyline per named series."""
    pts = [(x, y) for s in series.values() for x, y in s if y is not None]
    if not pts:
        raise ValueError("nothing to plot")
    xs, ys = zip(*pts)
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    pad = 40
    palette = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
             'fill="none" stroke="#999"/>']
    for i, (name, s) in enumerate(series.items()):
        color = palette[i % len(palette)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s if y is not None)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * (i + 1)}" font-size="10" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
