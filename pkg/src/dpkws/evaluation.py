"""Detection metrics and data-parameter distribution reports."""

import csv
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

DEFAULT_FA_PER_HOUR = 10.0


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionTrial:
    utterance_id: int
    score: float
    is_positive: bool
    duration_seconds: float

    def __post_init__(self):
        if not self.duration_seconds > 0:
            raise EvalError(f"trial {self.utterance_id}: duration must be positive")
        if np.isnan(self.score) or self.score == np.inf:
            raise EvalError(f"trial {self.utterance_id}: score must be finite or -inf")


@dataclass(frozen=True)
class OperatingPoint:
    frr: float
    threshold: float
    fa_per_hour: float
    unreachable: bool = False


def _split(trials):
    pos = np.sort([t.score for t in trials if t.is_positive])
    neg = np.sort([t.score for t in trials if not t.is_positive])
    hours = sum(t.duration_seconds for t in trials if not t.is_positive) / 3600.0
    if pos.size == 0 or neg.size == 0:
        raise EvalError("need at least one positive and one negative trial")
    if hours <= 0:
        raise EvalError("negative trials have no duration")
    return pos, neg, hours


def _operating_points(pos, neg, hours, fa_targets):
    """Smallest observed score whose FA rate fits each target (vectorised)."""
    cand = np.unique(np.concatenate([pos, neg]))
    n_fa = neg.size - np.searchsorted(neg, cand, side="left")
    rate = n_fa / hours
    out = []
    for fa in np.atleast_1d(fa_targets):
        ok = rate <= fa
        if not ok.any():
            out.append(OperatingPoint(1.0, np.inf, float(fa), True))
            continue
        i = int(np.argmax(ok))
        thr = cand[i]
        frr = np.searchsorted(pos, thr, side="left") / pos.size
        out.append(OperatingPoint(float(frr), float(thr), float(fa)))
    return out


def frr_at_fa_rate(trials, fa_per_hour=DEFAULT_FA_PER_HOUR):
    """False reject ratio at the loosest threshold allowed by ``fa_per_hour``.

    A trial is accepted when ``score >= threshold``.  If even the highest
    observed score lets through too many negatives, the threshold is
    ``inf``, every positive is rejected and ``unreachable`` is set.
    """
    pos, neg, hours = _split(trials)
    return _operating_points(pos, neg, hours, [fa_per_hour])[0]


def det_curve(trials, n_points=50, include=(DEFAULT_FA_PER_HOUR,)):
    """Operating points over log-spaced FA rates plus the ``include`` rates."""
    pos, neg, hours = _split(trials)
    lo = 1.0 / hours
    hi = max(neg.size / hours, lo * 10)
    grid = np.unique(np.concatenate([np.geomspace(lo / 2, hi, n_points), np.asarray(include, float)]))
    return _operating_points(pos, neg, hours, grid)


def write_det_csv(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("fa_per_hour", "frr", "threshold"))
        for p in points:
            w.writerow((repr(p.fa_per_hour), repr(p.frr), repr(p.threshold)))


# -- data-parameter distributions -------------------------------------------

REPORT_COLUMNS = (
    "epoch", "class_n", "class_median", "class_mean", "class_std", "class_min", "class_max",
    "band1_lo", "band1_hi", "band2_lo", "band2_hi", "band3_lo", "band3_hi",
    "instance_clean_n", "instance_clean_mean", "instance_clean_std",
    "instance_noisy_n", "instance_noisy_mean", "instance_noisy_std",
)


def _stats(values):
    # sorting first makes the sums independent of input row order
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        return None
    return {"n": v.size, "median": float(np.median(v)), "mean": float(v.mean()),
            "std": float(v.std()), "min": float(v[0]), "max": float(v[-1])}


def sigma_distribution_report(snapshot_rows, manifest_rows):
    """Per-epoch class-sigma bands and clean/noisy instance-sigma statistics.

    ``snapshot_rows`` are ``(epoch, kind, id, sigma)``; instance ids are
    utterance ids and are looked up in ``manifest_rows`` for provenance.
    Band ``k`` spans ``median +/- k * std / 2`` (width ``k`` standard
    deviations).  Empty groups are reported as ``None``.
    """
    if not snapshot_rows:
        raise EvalError("no snapshots")
    noisy_of = {int(r["id"]): r["provenance"].get("kind") == "noisy" for r in manifest_rows}
    per_epoch = defaultdict(lambda: {"class": [], "clean": [], "noisy": []})
    for epoch, kind, ident, value in snapshot_rows:
        slot = per_epoch[int(epoch)]
        if kind == "class":
            slot["class"].append(value)
        elif kind == "instance":
            if int(ident) not in noisy_of:
                raise EvalError(f"instance id {ident} not found in manifest")
            slot["noisy" if noisy_of[int(ident)] else "clean"].append(value)
        else:
            raise EvalError(f"unknown snapshot kind {kind!r}")
    report = []
    for epoch in sorted(per_epoch):
        slot = per_epoch[epoch]
        row = dict.fromkeys(REPORT_COLUMNS)
        row["epoch"] = epoch
        cs = _stats(slot["class"])
        if cs:
            row.update(class_n=cs["n"], class_median=cs["median"], class_mean=cs["mean"],
                       class_std=cs["std"], class_min=cs["min"], class_max=cs["max"])
            for k in (1, 2, 3):
                row[f"band{k}_lo"] = cs["median"] - k * cs["std"] / 2
                row[f"band{k}_hi"] = cs["median"] + k * cs["std"] / 2
        for group in ("clean", "noisy"):
            st = _stats(slot[group])
            row[f"instance_{group}_n"] = st["n"] if st else 0
            if st:
                row[f"instance_{group}_mean"] = st["mean"]
                row[f"instance_{group}_std"] = st["std"]
        report.append(row)
    return report


def write_report_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for row in report:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})


def render_svg(report, det_points, path):
    """SVG with class-sigma bands, instance-sigma means and the DET curve."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3 if report else 1, figsize=(14 if report else 5, 4))
    axes = np.atleast_1d(axes)
    if report:
        ep = [r["epoch"] for r in report]
        ax = axes[0]
        if report[0]["class_median"] is not None:
            for k, alpha in ((3, 0.15), (2, 0.25), (1, 0.4)):
                ax.fill_between(ep, [r[f"band{k}_lo"] for r in report],
                                [r[f"band{k}_hi"] for r in report], alpha=alpha, color="C0")
            ax.plot(ep, [r["class_median"] for r in report], color="C0")
            ax.plot(ep, [r["class_min"] for r in report], "k", lw=0.8)
            ax.plot(ep, [r["class_max"] for r in report], "k", lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("class sigma")
        ax = axes[1]
        for group, color in (("clean", "C1"), ("noisy", "C2")):
            mean = [r[f"instance_{group}_mean"] for r in report]
            if all(m is not None for m in mean):
                std = np.array([r[f"instance_{group}_std"] for r in report])
                ax.plot(ep, mean, color=color, label=group)
                ax.fill_between(ep, np.array(mean) - std, np.array(mean) + std, color=color, alpha=0.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("instance sigma")
        if ax.get_legend_handles_labels()[0]:
            ax.legend()
    ax = axes[-1]
    ax.step([p.fa_per_hour for p in det_points], [p.frr for p in det_points], where="post")
    ax.set_xscale("log")
    ax.set_xlabel("false alarms per hour")
    ax.set_ylabel("false reject ratio")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
