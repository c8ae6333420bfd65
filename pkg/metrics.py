"""AUROC, AUPRC, pooled/per-endpoint evaluation and multi-split aggregation."""
import logging

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

METRICS = ("auprc", "auroc")


class UndefinedMetric(ValueError):
    """The label set has no positives (or, for AUROC, no negatives)."""


def _scored_set(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape[0]} vs {labels.shape[0]}")
    if scores.size == 0:
        raise UndefinedMetric("empty scored set")
    return scores, labels > 0.5


def auroc(scores, labels):
    """Mann-Whitney statistic; tied positive/negative pairs count one half."""
    scores, pos = _scored_set(scores, labels)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric(f"AUROC needs both classes (positives={n_pos}, negatives={n_neg})")
    ranks = pd.Series(scores).rank(method="average").to_numpy()
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _threshold_groups(scores, pos):
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    tp = np.cumsum(pos[order])
    ends = np.append(np.flatnonzero(s[1:] != s[:-1]), s.size - 1)
    return s[ends], tp[ends].astype(np.float64), (ends + 1).astype(np.float64)


def auprc(scores, labels):
    """Average precision: sum over distinct thresholds of (R_k - R_{k-1}) * P_k, no interpolation."""
    scores, pos = _scored_set(scores, labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedMetric("AUPRC needs at least one positive")
    _, tp, k = _threshold_groups(scores, pos)
    recall = tp / n_pos
    precision = tp / k
    return float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))


def pr_curve(scores, labels):
    scores, pos = _scored_set(scores, labels)
    n_pos = max(int(pos.sum()), 1)
    thr, tp, k = _threshold_groups(scores, pos)
    return pd.DataFrame({"threshold": thr, "precision": tp / k, "recall": tp / n_pos})


def roc_curve(scores, labels):
    scores, pos = _scored_set(scores, labels)
    n_pos = max(int(pos.sum()), 1)
    n_neg = max(pos.size - int(pos.sum()), 1)
    thr, tp, k = _threshold_groups(scores, pos)
    return pd.DataFrame({"threshold": thr, "fpr": (k - tp) / n_neg, "tpr": tp / n_pos})


def _evaluable(scores, labels, mask):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ValueError(f"prediction shape {scores.shape} differs from target shape {labels.shape}")
    keep = np.ones(scores.shape, dtype=bool) if mask is None else np.asarray(mask) > 0.5
    return scores, labels, keep


def evaluate_pooled(scores, labels, mask=None):
    """Both metrics over one flat set of every evaluable (visit, label) entry."""
    scores, labels, keep = _evaluable(scores, labels, mask)
    return {"auprc": auprc(scores[keep], labels[keep]), "auroc": auroc(scores[keep], labels[keep])}


def _or_nan(metric, scores, labels, where):
    try:
        return metric(scores, labels)
    except UndefinedMetric as e:
        logger.warning("%s undefined for %s: %s", metric.__name__, where, e)
        return float("nan")


def evaluate_per_endpoint(scores, labels, mask=None, names=None):
    """One row per label column; undefined metrics are NaN."""
    scores, labels, keep = _evaluable(scores, labels, mask)
    names = list(names) if names is not None else [f"label_{j}" for j in range(scores.shape[1])]
    rows = {}
    for j, name in enumerate(names):
        col = keep[:, j]
        rows[name] = {m: _or_nan(fn, scores[col, j], labels[col, j], name)
                      for m, fn in (("auprc", auprc), ("auroc", auroc))}
    return pd.DataFrame.from_dict(rows, orient="index", columns=list(METRICS))


def evaluation_report(scores, labels, mask=None, names=None):
    """Per-split EvalReport: a 'pooled' row followed by one row per label."""
    s, l, keep = _evaluable(scores, labels, mask)
    pooled = {m: _or_nan(fn, s[keep], l[keep], "pooled") for m, fn in (("auprc", auprc), ("auroc", auroc))}
    per = evaluate_per_endpoint(scores, labels, mask, names)
    report = pd.concat([pd.DataFrame([pooled], index=["pooled"]), per])
    report.index.name = "group"
    return report


def aggregate_splits(reports):
    """Mean and standard error (sample std / sqrt(#defined splits)) per group and metric."""
    if len(reports) < 2:
        raise ValueError(f"aggregation needs at least 2 split reports, got {len(reports)}")
    first = reports[0]
    for r in reports[1:]:
        if list(r.index) != list(first.index) or list(r.columns) != list(first.columns):
            raise ValueError("split reports differ in structure")
    out = pd.DataFrame(index=first.index)
    for m in first.columns:
        values = pd.concat([r[m] for r in reports], axis=1)
        values.columns = [f"{m}_split{j}" for j in range(len(reports))]
        defined = values.notna().sum(axis=1)
        out[f"{m}_mean"] = values.mean(axis=1)
        out[f"{m}_se"] = values.std(axis=1, ddof=1) / np.sqrt(defined)
        out[f"{m}_undefined"] = len(reports) - defined
        out = out.join(values)
    out["n_splits"] = len(reports)
    return out


def format_mean_se(mean, se, digits=3):
    if pd.isna(mean):
        return "undefined"
    if pd.isna(se):
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ± {se:.{digits}f}"


def render_table(aggregated, titles=None):
    """Table-shaped view: one row per group, 'mean ± SE' strings for AUPRC and AUROC."""
    titles = titles or {}
    rows = {}
    for group, row in aggregated.iterrows():
        rows[titles.get(group, group)] = {
            "AUPRC": format_mean_se(row["auprc_mean"], row["auprc_se"]),
            "AUROC": format_mean_se(row["auroc_mean"], row["auroc_se"]),
        }
    return pd.DataFrame.from_dict(rows, orient="index")
