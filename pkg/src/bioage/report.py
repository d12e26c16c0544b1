"""Result artifacts: cumulative outlier curves per group, signed deviation
distributions with normal fits, and detection quality against ground truth.

This is the only module that reads ``Subject.group`` / ``Subject.true_offset``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .cohort import Group, Subject
from .consolidate import consolidate_arrays
from .iterate import FlagLedger, HetRegressor, Regressor

ATYPICAL_ALL = "atypical"


def _group_members(cohort: Sequence[Subject]) -> dict[str, list[Subject]]:
    groups: dict[str, list[Subject]] = {g.value: [] for g in Group}
    for s in cohort:
        if s.group is None:
            raise ValueError(f"subject {s.id} has no ground-truth group")
        groups[s.group.value].append(s)
    return groups


@dataclass
class CumulativeCurve:
    group: str
    size: int
    # (iteration, cumulative distinct flagged, percent of group)
    series: list[tuple[int, int, float]]


def cumulative_curves(ledger: FlagLedger, cohort: Sequence[Subject]) -> list[CumulativeCurve]:
    """Per group: distinct subjects flagged in iterations 1..t, for every t."""
    groups = _group_members(cohort)
    group_of = {s.id: s.group.value for s in cohort}
    for rec in ledger.history:
        for sid in rec.flagged_ids:
            if sid not in group_of:
                raise KeyError(f"ledger flags unknown subject {sid!r}")
    curves = []
    for name, members in groups.items():
        if not members:
            continue
        seen: set[str] = set()
        series = []
        for rec in ledger.history:
            seen.update(sid for sid in rec.flagged_ids if group_of[sid] == name)
            series.append((rec.index, len(seen), 100.0 * len(seen) / len(members)))
        curves.append(CumulativeCurve(name, len(members), series))
    return curves


@dataclass
class DeviationSummary:
    group: str
    tag: str
    subject_ids: list[str]
    deviations: list[float]  # predicted - CA, signed
    fit_mean: float
    fit_std: float


def sample_moments(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    mean = float(v.mean())
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return mean, std


def deviation_summary(
    model: Any,
    subjects: Sequence[Subject],
    tag: str,
    regressor: Regressor | None = None,
) -> dict[str, DeviationSummary]:
    """Signed consolidated deviations per group, plus all atypical groups pooled."""
    if not subjects:
        raise ValueError("no subjects")
    regressor = regressor if regressor is not None else HetRegressor()
    preds = regressor.predict(model, [s.blind() for s in subjects])
    devs = {}
    for s, (means, logvars) in zip(subjects, preds):
        devs[s.id] = consolidate_arrays(means, logvars)[0] - s.chronological_age

    out = {}
    groups = _group_members(subjects)
    groups[ATYPICAL_ALL] = [s for s in subjects if s.group.atypical]
    for name, members in groups.items():
        if not members:
            continue
        d = [devs[s.id] for s in members]
        mean, std = sample_moments(d)
        out[name] = DeviationSummary(name, tag, [s.id for s in members], d, mean, std)
    return out


@dataclass
class DetectionQuality:
    recall: dict[str, float | None]  # per atypical group; None if the group is empty
    atypical_recall: float | None
    typical_fpr: float | None
    recall_fpr_ratio: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def detection_quality(removed: Sequence[str], cohort: Sequence[Subject]) -> DetectionQuality:
    ids = {s.id for s in cohort}
    removed = set(removed)
    unknown = removed - ids
    if unknown:
        raise KeyError(f"removed ids not in cohort: {sorted(unknown)[:3]}")
    groups = _group_members(cohort)

    def rate(members):
        return sum(s.id in removed for s in members) / len(members) if members else None

    recall = {g.value: rate(groups[g.value]) for g in Group if g.atypical}
    atypical = [s for s in cohort if s.group.atypical]
    fpr = rate(groups[Group.TYPICAL.value])
    overall = rate(atypical)
    ratio = overall / fpr if (overall is not None and fpr) else None
    return DetectionQuality(recall, overall, fpr, ratio)


# -- writers ------------------------------------------------------------------

def write_curves_csv(curves: Sequence[CumulativeCurve], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "group_size", "iteration", "cumulative_flagged", "percent"])
        for c in curves:
            for it, count, pct in c.series:
                w.writerow([c.group, c.size, it, count, repr(pct)])


def write_deviations_csv(summaries: Sequence[DeviationSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "group", "subject_id", "deviation"])
        for s in summaries:
            for sid, d in zip(s.subject_ids, s.deviations):
                w.writerow([s.tag, s.group, sid, repr(d)])


def write_deviation_fits_csv(summaries: Sequence[DeviationSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "group", "n", "fit_mean", "fit_std"])
        for s in summaries:
            w.writerow([s.tag, s.group, len(s.deviations), repr(s.fit_mean), repr(s.fit_std)])


def write_json(doc: Any, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- figures ------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed element ids, no timestamp: byte-stable SVG output
    matplotlib.rcParams["svg.hashsalt"] = "bioage"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def plot_cumulative_curves(curves: Sequence[CumulativeCurve], path: str | Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for c in curves:
        its = [p[0] for p in c.series]
        pct = [p[2] for p in c.series]
        ax.plot(its, pct, marker="o", ms=3, lw=1.8, label=f"{c.group} (n={c.size})")
        if c.series:
            last = c.series[-1]
            ax.annotate(f"{last[1]}/{c.size} = {last[2]:.0f}%", (last[0], last[2]),
                        xytext=(4, 0), textcoords="offset points", fontsize=8, va="center")
    ax.set_xlabel("Iteration")
    ax.set_ylabel("Cumulative outliers [%]")
    ax.set_ylim(0, 105)
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_deviations(
    summaries: Sequence[DeviationSummary], path: str | Path, groups=("typical", ATYPICAL_ALL)
) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(len(groups), 1, figsize=(6.4, 3.2 * len(groups)), squeeze=False)
    for ax, group in zip(axes[:, 0], groups):
        for s in (s for s in summaries if s.group == group):
            d = np.asarray(s.deviations)
            line = ax.hist(d, bins=20, density=True, alpha=0.35, label=f"{s.tag} deviations")
            color = line[2][0].get_facecolor()[:3] if len(line[2]) else None
            if s.fit_std > 0:
                x = np.linspace(d.min() - s.fit_std, d.max() + s.fit_std, 200)
                pdf = np.exp(-0.5 * ((x - s.fit_mean) / s.fit_std) ** 2) / (s.fit_std * math.sqrt(2 * math.pi))
                ax.plot(x, pdf, color=color, lw=2,
                        label=f"{s.tag} fit: mean {s.fit_mean:.1f}, sd {s.fit_std:.1f}")
        ax.set_title(group)
        ax.set_xlabel("Predicted age - CA [years]")
        ax.set_ylabel("Density")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
