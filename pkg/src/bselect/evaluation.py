"""Post-hoc analysis of finished runs: epochs-to-target-accuracy, selection
composition (noisy / already-correct fractions), and method comparison tables.
Pure functions over immutable run artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MismatchedTargets
from .trainer import SelectionTrace


def epochs_to_target(accuracies, target: float):
    """First 1-based epoch whose test accuracy reaches `target`; None if never.

    `accuracies` is the per-epoch series; dict entries with a "test_acc"
    field are accepted too.
    """
    for epoch, value in enumerate(accuracies, start=1):
        if isinstance(value, dict):
            value = value["test_acc"]
        if value is not None and value >= target:
            return epoch
    return None


def _per_epoch_fraction(trace: SelectionTrace, flag_of_record):
    hits = {}
    totals = {}
    for rec in trace.records:
        epoch = trace.epoch_of(rec.step)
        flags = flag_of_record(rec)
        hits[epoch] = hits.get(epoch, 0) + int(np.sum(flags))
        totals[epoch] = totals.get(epoch, 0) + int(np.size(flags))
    epochs = sorted(hits)
    series = np.array([hits[e] / totals[e] for e in epochs])
    if not epochs:
        return series, float("nan")
    return series, float(series.mean())


def noisy_fraction(trace: SelectionTrace, noise_flags=None):
    """Per-epoch fraction of selected examples that carry a noise flag, and its mean.

    With `noise_flags` given, flags are looked up from the dataset by selected
    id; otherwise the trace's own recorded flags are used.
    """
    if noise_flags is not None:
        noise_flags = np.asarray(noise_flags)

        def flags(rec):
            return noise_flags[rec.selected_ids]

    else:

        def flags(rec):
            return rec.noisy[rec.selected_mask]

    return _per_epoch_fraction(trace, flags)


def redundant_fraction(trace: SelectionTrace):
    """Per-epoch fraction of selected examples already classified correctly."""
    return _per_epoch_fraction(trace, lambda rec: rec.correct_before[rec.selected_mask])


@dataclass(frozen=True)
class RunReport:
    name: str
    targets: tuple
    epochs: dict  # target -> 1-based epoch or None
    final_accuracy: float
    noisy_mean: float
    redundant_mean: float
    config_digest: str = ""

    def __post_init__(self):
        reached = [(t, e) for t, e in sorted(self.epochs.items()) if e is not None]
        for (_, e1), (_, e2) in zip(reached, reached[1:]):
            if e2 < e1:
                raise ValueError("epochs-to-target must be nondecreasing in the target")


def make_report(name, history, targets, config_digest="") -> RunReport:
    """Build a RunReport from a trainer metrics history (list of dicts)."""
    accs = [h["test_acc"] for h in history]
    noisy = [h["noisy_frac_selected"] for h in history]
    redundant = [h["redundant_frac_selected"] for h in history]
    targets = tuple(float(t) for t in targets)
    return RunReport(
        name=name,
        targets=targets,
        epochs={t: epochs_to_target(accs, t) for t in targets},
        final_accuracy=float(accs[-1]) if accs else float("nan"),
        noisy_mean=float(np.mean(noisy)) if noisy else float("nan"),
        redundant_mean=float(np.mean(redundant)) if redundant else float("nan"),
        config_digest=config_digest,
    )


def compare_runs(reports):
    """Comparison table over methods: epochs to each target, final accuracy.

    Returns (text, csv) renderings; unreached targets show as "-".
    """
    reports = list(reports)
    if not reports:
        raise MismatchedTargets("no reports to compare")
    targets = reports[0].targets
    for rep in reports[1:]:
        if rep.targets != targets:
            raise MismatchedTargets(
                f"report {rep.name!r} has targets {rep.targets}, expected {targets}"
            )

    def cell(rep, t):
        e = rep.epochs[t]
        return "-" if e is None else str(e)

    header = ["method"] + [f"target {t:g}" for t in targets] + ["final"]
    rows = [
        [rep.name]
        + [cell(rep, t) for t in targets]
        + [f"({100 * rep.final_accuracy:.1f}%)"]
        for rep in reports
    ]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    text = "\n".join(lines) + "\n"

    csv_lines = [
        "method,"
        + ",".join(f"target_{t:g}" for t in targets)
        + ",final_acc,noisy_frac,redundant_frac"
    ]
    for rep in reports:
        csv_lines.append(
            f"{rep.name},"
            + ",".join(cell(rep, t) for t in targets)
            + f",{rep.final_accuracy!r},{rep.noisy_mean!r},{rep.redundant_mean!r}"
        )
    return text, "\n".join(csv_lines) + "\n"
