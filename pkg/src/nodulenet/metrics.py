"""Agreement and classification metrics between two label sources."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .volume import LABELS, NOT_A_NODULE, parse_label

CLASS_NAMES_7 = LABELS + (NOT_A_NODULE,)


class DegenerateKappaError(ValueError):
    """Expected agreement is 1, so kappa is undefined."""


class LabelFileError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) int64; row = source A, column = source B

    @property
    def k(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def class_names(self):
        return CLASS_NAMES_7[: self.k]

    def transpose(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts.T.copy())

    def permute(self, order) -> "ConfusionMatrix":
        order = np.asarray(order)
        return ConfusionMatrix(self.counts[np.ix_(order, order)])


def confusion_from_labels(a, b, n_classes=None) -> ConfusionMatrix:
    """counts[i, j] = #{n : a[n] == i and b[n] == j}."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError(f"label sequences differ in length: {a.size} vs {b.size}")
    if n_classes is None:
        n_classes = 7 if a.size and max(a.max(), b.max()) == 6 else 6
    for seq in (a, b):
        if seq.size and (seq.min() < 0 or seq.max() >= n_classes):
            bad = seq[(seq < 0) | (seq >= n_classes)][0]
            raise ValueError(f"unknown label index {bad} for {n_classes} classes")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (a, b), 1)
    return ConfusionMatrix(counts)


@dataclass
class ClassificationReport:
    accuracy: float
    precision: list
    recall: list
    f_measure: list
    mean_f: float
    total: int


def _safe_div(num, den):
    return float(num) / float(den) if den else 0.0


def classification_metrics(cm: ConfusionMatrix) -> ClassificationReport:
    """Rows are the reference, columns the prediction; empty denominators give 0."""
    c = cm.counts
    if c.size == 0 or cm.total == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(c)
    prec = [_safe_div(diag[k], c[:, k].sum()) for k in range(cm.k)]
    rec = [_safe_div(diag[k], c[k, :].sum()) for k in range(cm.k)]
    f = [f_measure(p, r) for p, r in zip(prec, rec)]
    return ClassificationReport(_safe_div(diag.sum(), cm.total), prec, rec, f, float(np.mean(f)), cm.total)


def f_measure(precision, recall):
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


@dataclass
class KappaResult:
    kappa: float
    ci_low: float
    ci_high: float
    p_o: float
    p_e: float
    se: float
    n: int


def cohen_kappa_ci(cm: ConfusionMatrix, z=1.96) -> KappaResult:
    """Cohen's kappa with a large-sample normal CI, clamped to [-1, 1]."""
    n = cm.total
    if n == 0:
        raise ValueError("confusion matrix is empty")
    c = cm.counts.astype(np.float64)
    p_o = float(np.trace(c)) / n
    p_e = float(c.sum(axis=1) @ c.sum(axis=0)) / (n * n)
    if p_e >= 1.0:
        raise DegenerateKappaError("both sources use a single identical class; kappa undefined")
    kappa = (p_o - p_e) / (1 - p_e)
    se = math.sqrt(p_o * (1 - p_o) / (n * (1 - p_e) ** 2))
    lo = max(-1.0, kappa - z * se)
    hi = min(1.0, kappa + z * se)
    return KappaResult(kappa, lo, hi, p_o, p_e, se, n)


# ---------------------------------------------------------------- observer files


def read_label_file(path):
    """Parse ``nodule_id, label`` rows; returns an ordered {id: label index} dict."""
    path = Path(path)
    out = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip() or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() in ("nodule_id", "id"):
                continue
            if len(row) != 2:
                raise LabelFileError(f"{path}:{lineno}: expected 'nodule_id, label'")
            nid = row[0].strip()
            if nid in out:
                raise LabelFileError(f"{path}:{lineno}: duplicate id {nid}")
            try:
                out[nid] = parse_label(row[1], allow_not_nodule=True)
            except ValueError as exc:
                raise LabelFileError(f"{path}:{lineno}: {exc}") from None
    return out


def ingest_observer_labels(path, ids):
    """Labels from ``path`` aligned to ``ids`` (e.g. manifest order).

    Returns ``(labels, seven_class)`` where ``seven_class`` is true when any
    row uses the not-a-nodule token.
    """
    table = read_label_file(path)
    missing = [i for i in ids if i not in table]
    if missing:
        raise LabelFileError(f"{path}: no label for nodule id {missing[0]!r}"
                             + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    extra = set(table) - set(ids)
    if extra:
        raise LabelFileError(f"{path}: unexpected nodule id {sorted(extra)[0]!r}")
    labels = np.array([table[i] for i in ids], dtype=np.int64)
    return labels, bool((labels == len(LABELS)).any())


# ---------------------------------------------------------------- reports


def metrics_report(cm: ConfusionMatrix, kappa: KappaResult | None = None, extra=None) -> dict:
    rep = classification_metrics(cm)
    out = {
        "classes": list(cm.class_names),
        "confusion": cm.counts.tolist(),
        **asdict(rep),
    }
    if kappa is not None:
        out["kappa"] = asdict(kappa)
    if extra:
        out.update(extra)
    return out


def format_report(report: dict) -> str:
    """Human-readable rendering of :func:`metrics_report` output."""
    names = report["classes"]
    w = max(len(n) for n in names) + 2
    lines = []
    for key, value in report.items():
        if key not in ("classes", "confusion", "precision", "recall", "f_measure", "accuracy",
                       "mean_f", "total", "kappa"):
            lines.append(f"{key}: {value}")
    lines.append(f"items: {report['total']}")
    lines.append(f"accuracy: {100 * report['accuracy']:.1f}%")
    lines.append(f"mean F: {100 * report['mean_f']:.1f}%")
    if "kappa" in report:
        k = report["kappa"]
        lines.append(f"kappa: {k['kappa']:.3f} (95% CI {k['ci_low']:.3f} to {k['ci_high']:.3f})")
    lines.append("")
    lines.append(f"{'class':<{w}}{'precision':>10}{'recall':>10}{'F':>10}")
    for n, p, r, f in zip(names, report["precision"], report["recall"], report["f_measure"]):
        lines.append(f"{n:<{w}}{100 * p:>9.1f}%{100 * r:>9.1f}%{100 * f:>9.1f}%")
    lines.append("")
    lines.append("confusion (rows = reference, columns = prediction)")
    abbrev = [n[:6] for n in names]
    lines.append(" " * w + "".join(f"{a:>8}" for a in abbrev))
    for n, row in zip(names, report["confusion"]):
        lines.append(f"{n:<{w}}" + "".join(f"{v:>8}" for v in row))
    return "\n".join(lines) + "\n"


def write_report(report: dict, prefix) -> tuple:
    """Write ``<prefix>.json`` (machine-readable) and ``<prefix>.txt`` (table)."""
    prefix = Path(prefix)
    js = prefix.with_name(prefix.name + ".json")
    txt = prefix.with_name(prefix.name + ".txt")
    js.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    txt.write_text(format_report(report))
    return js, txt
