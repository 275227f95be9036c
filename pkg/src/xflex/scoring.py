"""Verification metrics: pinball, Brier, AUC, reliability, threshold-weighted
CRPS and quantile RMSE.

Report-shaped functions work on long-format pandas frames with one metric
value per row; undefined values are kept as NaN with a reason in the flag
column rather than dropped silently.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .exceptions import ValidationError


def pinball(y, q, alpha: float):
    """Pinball loss: alpha*(y-q) when y >= q else (1-alpha)*(q-y)."""
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    ya = np.asarray(y, dtype=float)
    qa = np.asarray(q, dtype=float)
    diff = ya - qa
    out = np.where(diff >= 0, alpha * diff, (alpha - 1.0) * diff)
    return float(out) if np.isscalar(y) and np.isscalar(q) else out


def scaled_pinball(report: pd.DataFrame, baseline_source: str = "eps+hres", baseline_lead: float = 0.0) -> pd.DataFrame:
    """Divide each pinball row by its district/level baseline row.

    Expects columns district, source, lead_h, level, value. Rows with no
    matching baseline keep value NaN and get a flag.
    """
    required = {"district", "source", "lead_h", "level", "value"}
    missing = required - set(report.columns)
    if missing:
        raise ValidationError(f"report is missing columns {sorted(missing)}")
    base = report[(report["source"] == baseline_source) & (report["lead_h"] == baseline_lead)]
    base_map = {(r.district, r.level): r.value for r in base.itertuples()}
    out = report.copy()
    scaled, flags = [], []
    for r in report.itertuples():
        ref = base_map.get((r.district, r.level))
        if ref is None or not np.isfinite(ref) or ref == 0:
            scaled.append(np.nan)
            flags.append("missing-baseline" if ref is None else "degenerate-baseline")
        else:
            scaled.append(r.value / ref)
            flags.append("")
    out["scaled_value"] = scaled
    out["flag"] = flags
    return out


def brier(p, occurred):
    """Squared error of an event probability against the 0/1 outcome."""
    pa = np.asarray(p, dtype=float)
    if np.any((pa < 0) | (pa > 1)):
        raise ValidationError("probabilities must lie in [0, 1]")
    oa = np.asarray(occurred, dtype=float)
    if np.any((oa != 0) & (oa != 1)):
        raise ValidationError("occurred must be 0/1")
    out = (pa - oa) ** 2
    return float(out) if np.isscalar(p) else out


def brier_skill(bs: float, bs_ref: float) -> float:
    """1 - bs/bs_ref; NaN when the reference score is zero (undefined skill)."""
    if bs_ref == 0.0:
        return float("nan")
    return 1.0 - bs / bs_ref


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties; NaN for single-class input."""
    s = np.asarray(scores, dtype=float)
    lab = np.asarray(labels, dtype=bool)
    if s.shape != lab.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be aligned 1-d arrays")
    n_pos = int(lab.sum())
    n_neg = int((~lab).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    r_pos = float(ranks[lab].sum())
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def multiclass_auc(prob_matrix, labels, classes) -> dict:
    """One-vs-rest AUCs per class plus macro (unweighted mean over defined
    classes) and micro (pooled probability/indicator pairs)."""
    probs = np.asarray(prob_matrix, dtype=float)
    labels = np.asarray(labels)
    classes = list(classes)
    if probs.ndim != 2 or probs.shape[1] != len(classes):
        raise ValidationError("prob_matrix must be (rows, classes)")
    if probs.shape[0] != labels.shape[0]:
        raise ValidationError("labels must align with prob_matrix rows")
    per_class = {}
    flags = []
    pooled_p, pooled_i = [], []
    for j, c in enumerate(classes):
        ind = labels == c
        val = auc(probs[:, j], ind)
        per_class[c] = val
        if np.isnan(val):
            flags.append(f"class {c!r} has a single outcome; AUC undefined")
        pooled_p.append(probs[:, j])
        pooled_i.append(ind)
    defined = [v for v in per_class.values() if not np.isnan(v)]
    macro = float(np.mean(defined)) if defined else float("nan")
    micro = auc(np.concatenate(pooled_p), np.concatenate(pooled_i))
    return {"per_class": per_class, "macro": macro, "micro": micro, "flags": flags}


def reliability(dists, y, levels, condition=None, min_rows: int = 20, tag: str = "") -> pd.DataFrame:
    """Empirical coverage of predictive quantiles, optionally on a row subset.

    dists may be a sequence of objects with quantile(p) or a precomputed
    (rows, levels) quantile matrix. condition is a boolean row mask.
    """
    ya = np.asarray(y, dtype=float)
    n = ya.shape[0]
    mask = np.ones(n, dtype=bool) if condition is None else np.asarray(condition, dtype=bool)
    if mask.shape != (n,):
        raise ValidationError("condition mask must align with observations")
    levels = [float(v) for v in levels]
    if isinstance(dists, np.ndarray):
        qmat = np.asarray(dists, dtype=float)
        if qmat.shape != (n, len(levels)):
            raise ValidationError("quantile matrix must be (rows, levels)")
    else:
        if len(dists) != n:
            raise ValidationError("one predictive distribution per observation is required")
        qmat = np.array([[d.quantile(lv) for lv in levels] for d in dists], dtype=float)
    rows = []
    m = int(mask.sum())
    for j, lv in enumerate(levels):
        if m == 0:
            cov = float("nan")
        else:
            cov = float(np.mean(ya[mask] <= qmat[mask, j]))
        rows.append(
            {
                "tag": tag,
                "level": lv,
                "coverage": cov,
                "n": m,
                "flag": "" if m >= min_rows else f"only {m} rows (<{min_rows})",
            }
        )
    return pd.DataFrame(rows)


def twcrps_sample(samples, y: float, a: float) -> float:
    """Threshold-weighted CRPS sample estimator with chaining v(z) = max(z, a):

        mean_i |v(X_i) - v(y)| - 0.5 * mean_{i,j} |v(X_i) - v(X_j)|

    the second mean running over all ordered pairs. Computed by sorting, which
    matches the exhaustive pair enumeration exactly.
    """
    xs = np.asarray(samples, dtype=float)
    if xs.ndim != 1 or xs.size == 0:
        raise ValidationError("samples must be a nonempty 1-d array")
    v = np.maximum(xs, a)
    vy = max(float(y), a)
    term1 = float(np.mean(np.abs(v - vy)))
    n = v.size
    vs = np.sort(v)
    coeff = 2.0 * np.arange(1, n + 1) - n - 1.0
    pair_sum = float(coeff @ vs)  # sum over unordered pairs of |v_i - v_j|
    term2 = 0.5 * (2.0 * pair_sum / (n * n))
    return term1 - term2


def rmse_quantiles(estimated, truth, levels) -> dict[float, float]:
    """Per-level RMSE across rows of two (rows, levels) quantile matrices."""
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValidationError("estimated and truth must have matching shapes")
    levels = [float(v) for v in levels]
    if est.ndim == 1:
        est = est[:, None]
        tru = tru[:, None]
    if est.shape[1] != len(levels):
        raise ValidationError("one column per level is required")
    out = {}
    for j, lv in enumerate(levels):
        out[lv] = float(np.sqrt(np.mean((est[:, j] - tru[:, j]) ** 2)))
    return out
