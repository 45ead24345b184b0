"""Aggregate per-seed results into tables and figures."""

from __future__ import annotations

import csv
import glob
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import FEASIBLE, Arm
from .data.dataset import atomic_write
from .errors import MissingArtifactsError, NoRunsFoundError

Z95 = 1.96
CSV_COLUMNS = ["shift", "quality", "arm", "mean", "ci95", "n_seeds"]


def ci95(values):
    """Half-width 1.96 * s / sqrt(n) with the sample std; nan below two values."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return float("nan")
    return float(Z95 * values.std(ddof=1) / math.sqrt(len(values)))


@dataclass
class ScoreRow:
    shift: str
    quality: str
    arm: str
    mean: float
    ci95: float
    n_seeds: int
    n_failed: int = 0
    best: bool = False
    errors: list = field(default_factory=list)


@dataclass
class ClassifierRow:
    shift: str
    quality: str
    accuracy_mean: float
    accuracy_std: float
    alpha_hat_mean: float
    alpha_true: float
    precision_mean: float
    recall_mean: float
    n_seeds: int


@dataclass
class ResultTable:
    rows: list
    classifier_rows: list = field(default_factory=list)
    recomputed: list = field(default_factory=list)

    def row(self, shift, quality, arm):
        for r in self.rows:
            if (r.shift, r.quality, r.arm) == (shift, quality, Arm(arm).value):
                return r
        raise KeyError((shift, quality, arm))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.shift, r.quality, r.arm, repr(r.mean), repr(r.ci95), r.n_seeds])
        return buf.getvalue()

    def classifier_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["shift", "quality", "accuracy_mean", "accuracy_std", "alpha_hat_mean", "alpha_true",
                "precision_mean", "recall_mean", "n_seeds"]
        w.writerow(cols)
        for r in self.classifier_rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in cols)])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({"scores": [asdict(r) for r in self.rows],
                           "classifier": [asdict(r) for r in self.classifier_rows]}, indent=2, sort_keys=True) + "\n"

    def to_text(self):
        lines = [f"{'shift':<12} {'quality':<8} {'arm':<11} {'score':>16} {'seeds':>5}  best"]
        for r in self.rows:
            cell = "failed" if r.n_seeds == 0 else f"{r.mean:7.1f} +/- {r.ci95:5.1f}"
            mark = "*" if r.best else ""
            extra = f" ({r.n_failed} failed)" if r.n_failed else ""
            lines.append(f"{r.shift:<12} {r.quality:<8} {r.arm:<11} {cell:>16} {r.n_seeds:>5}  {mark}{extra}")
        if self.classifier_rows:
            lines.append("")
            lines.append(f"{'shift':<12} {'quality':<8} {'accuracy':>16} {'alpha_hat':>9} {'alpha':>7} {'seeds':>5}")
            for c in self.classifier_rows:
                acc = f"{c.accuracy_mean:.3f} +/- {c.accuracy_std:.3f}"
                lines.append(f"{c.shift:<12} {c.quality:<8} {acc:>16} {c.alpha_hat_mean:9.3f} "
                             f"{c.alpha_true:7.3f} {c.n_seeds:>5}")
        return "\n".join(lines) + "\n"


def _mark_best(rows):
    groups = {}
    for r in rows:
        groups.setdefault((r.shift, r.quality), []).append(r)
    for group in groups.values():
        ok = [r for r in group if Arm(r.arm) in FEASIBLE and r.n_seeds > 0]
        if ok:
            max(ok, key=lambda r: r.mean).best = True


def collect(output_dir):
    """Build a ResultTable from every manifest under ``output_dir``."""
    manifests = sorted(glob.glob(os.path.join(output_dir, "manifest-*.json")))
    if not manifests:
        raise NoRunsFoundError(f"no run manifests under {output_dir}")
    rows, crow, missing = [], [], []
    for mpath in manifests:
        with open(mpath) as fh:
            m = json.load(fh)
        for arm in m["arms"]:
            scores, errors = [], []
            for seed in m["rl_seeds"]:
                rel = m["results"].get(arm, {}).get(str(seed))
                path = os.path.join(output_dir, rel) if rel else None
                if path is None or not os.path.exists(path):
                    missing.append(rel or f"{arm}/seed{seed}")
                    continue
                with open(path) as fh:
                    res = json.load(fh)
                if res.get("status") == "ok":
                    scores.append(res["score"])
                else:
                    errors.append(res.get("error", "unknown"))
            n = len(scores)
            rows.append(ScoreRow(m["shift"], m["quality"], arm, float(np.mean(scores)) if n else float("nan"),
                                 ci95(scores), n, len(errors), errors=errors))
        reports = []
        for rel in m.get("classifiers", []):
            path = os.path.join(output_dir, rel)
            if not os.path.exists(path):
                missing.append(rel)
                continue
            with open(path) as fh:
                reports.append(json.load(fh))
        if reports:
            acc = np.array([r["accuracy"] for r in reports])
            crow.append(ClassifierRow(m["shift"], m["quality"], float(acc.mean()),
                                      float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
                                      float(np.mean([r["alpha_hat"] for r in reports])),
                                      float(reports[0]["alpha_true"]),
                                      float(np.mean([r["filter"]["precision"] for r in reports])),
                                      float(np.mean([r["filter"]["recall"] for r in reports])), len(reports)))
    if missing:
        raise MissingArtifactsError(missing)
    _mark_best(rows)
    return ResultTable(rows, crow)


def plot_scores(table, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = {}
    for r in table.rows:
        groups.setdefault((r.shift, r.quality), []).append(r)
    fig, axes = plt.subplots(1, len(groups), figsize=(4.5 * len(groups), 3.6), squeeze=False)
    for ax, ((shift, quality), rows) in zip(axes[0], groups.items()):
        x = np.arange(len(rows))
        means = [r.mean if r.n_seeds else 0.0 for r in rows]
        errs = [0.0 if not np.isfinite(r.ci95) else r.ci95 for r in rows]
        colors = ["tab:red" if r.best else ("tab:gray" if Arm(r.arm) not in FEASIBLE else "tab:blue") for r in rows]
        ax.bar(x, means, yerr=errs, color=colors, capsize=3)
        ax.set_xticks(x, [r.arm for r in rows], rotation=30, ha="right")
        ax.set_title(f"{shift} {quality}")
        ax.set_ylabel("normalized score")
        ax.axhline(0.0, color="k", lw=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def summarize(output_dir, figures=True):
    """Write results.{csv,json,txt} (and scores.png) under ``output_dir``."""
    table = collect(output_dir)
    atomic_write(os.path.join(output_dir, "results.csv"), table.to_csv().encode())
    atomic_write(os.path.join(output_dir, "results.json"), table.to_json().encode())
    atomic_write(os.path.join(output_dir, "results.txt"), table.to_text().encode())
    if table.classifier_rows:
        atomic_write(os.path.join(output_dir, "classifier.csv"), table.classifier_csv().encode())
    if figures:
        plot_scores(table, os.path.join(output_dir, "scores.png"))
    return table
