"""Accuracy and worst-group accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import predict

__all__ = ["GroupReport", "EmptyGroupError", "accuracy", "group_report", "report_from_predictions"]


class EmptyGroupError(ValueError):
    pass


@dataclass(frozen=True)
class GroupReport:
    accuracies: dict  # group id -> accuracy
    counts: dict  # group id -> sample count
    names: dict  # group id -> (attribute, label)
    overall: float
    worst: float
    worst_group: int

    def as_dict(self):
        return {
            "overall": self.overall,
            "wga": self.worst,
            "worst_group": list(self.names[self.worst_group]),
            "groups": [{"group": list(self.names[g]), "acc": self.accuracies[g],
                        "n": self.counts[g]} for g in sorted(self.accuracies)],
        }


def accuracy(model, data) -> float:
    if len(data.y) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    pred = np.atleast_1d(predict(model, data.X))
    return float(np.mean(pred == data.y))


def report_from_predictions(pred, y, groups, group_table, require_all=True) -> GroupReport:
    """Per-group accuracy over the groups of ``group_table``.

    With ``require_all`` every declared group must have samples; otherwise
    groups without samples are left out of the report.
    """
    pred, y, groups = np.asarray(pred), np.asarray(y), np.asarray(groups)
    if y.size == 0:
        raise ValueError("group report of an empty dataset is undefined")
    correct = pred == y
    accs, counts, names = {}, {}, {}
    for g, name in enumerate(group_table):
        sel = groups == g
        n = int(sel.sum())
        if n == 0:
            if require_all:
                raise EmptyGroupError(f"group {tuple(name)} has no samples")
            continue
        accs[g] = float(correct[sel].mean())
        counts[g] = n
        names[g] = tuple(name)
    worst_group = min(accs, key=lambda g: (accs[g], g))
    return GroupReport(accs, counts, names, float(correct.mean()), accs[worst_group], worst_group)


def group_report(model, data, require_all=True) -> GroupReport:
    if data.groups is None:
        raise ValueError("dataset has no group ids")
    pred = np.atleast_1d(predict(model, data.X))
    return report_from_predictions(pred, data.y, data.groups, data.group_table, require_all)
