"""Ranking metrics for multi-label predictions.

AP is non-interpolated: the mean over positives of precision at the
positive's rank. Samples with equal scores are ranked by ascending index.
Labels without positives have undefined AP and are left out of every
aggregate; callers get them back in ``EvalReport.undefined``.
"""

from dataclasses import dataclass, field

import numpy as np

from .. import _kernels


class MetricError(ValueError):
    pass


def _check(scores, truths):
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if scores.shape != truths.shape:
        raise MetricError(f"scores {scores.shape} and truths {truths.shape} differ")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    if not np.all((truths == 0) | (truths == 1)):
        raise MetricError("truths must be 0/1")
    return scores, truths


def average_precision(scores, truths):
    scores, truths = _check(scores, truths)
    if scores.ndim != 1:
        raise MetricError("average_precision expects vectors")
    if truths.sum() == 0:
        raise MetricError("AP is undefined without positives")
    return float(_kernels.ap_columns(scores[:, None], truths[:, None])[0])


def per_label_ap(scores, truths):
    """``(n_samples, n_labels)`` matrices -> per-label AP (nan where undefined)."""
    scores, truths = _check(scores, truths)
    if scores.ndim != 2:
        raise MetricError("expected (samples, labels) matrices")
    return _kernels.ap_columns(scores, truths)


def mean_ap(scores, truths):
    ap = per_label_ap(scores, truths)
    ok = ~np.isnan(ap)
    if not ok.any():
        raise MetricError("no label has a positive sample")
    return float(ap[ok].mean())


def macro_ap(scores, truths, groups=None):
    """Mean over label groups of the mean AP within each group.

    ``groups`` maps each label column to a group key; by default every label
    is its own group, which reduces to the unweighted mean over labels.
    Groups whose labels are all undefined are skipped.
    """
    ap = per_label_ap(scores, truths)
    if groups is None:
        groups = list(range(ap.size))
    if len(groups) != ap.size:
        raise MetricError("one group key per label column is required")
    by_group = {}
    for key, value in zip(groups, ap):
        if not np.isnan(value):
            by_group.setdefault(key, []).append(value)
    if not by_group:
        raise MetricError("no label has a positive sample")
    return float(np.mean([np.mean(v) for _, v in sorted(by_group.items(), key=lambda kv: str(kv[0]))]))


def top_k(scores, truths, k):
    """Per-sample precision of the ``k`` highest-scoring labels, averaged.

    When ``k`` exceeds the label count the missing slots count as wrong.
    Equal scores are ranked by ascending label index.
    """
    scores, truths = _check(scores, truths)
    if k < 1:
        raise MetricError("k must be >= 1")
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise MetricError("expected a non-empty (samples, labels) matrix")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    hits = np.take_along_axis(truths, order, axis=1).sum(axis=1)
    return float((hits / k).mean())


@dataclass
class EvalReport:
    names: list
    per_class: dict
    map: float
    macro: float
    topk: dict
    undefined: list = field(default_factory=list)

    def rows(self):
        yield ("mAP", self.map)
        yield ("MacroAP", self.macro)
        for k in sorted(self.topk):
            yield (f"top-{k}", self.topk[k])

    def to_text(self, header=""):
        lines = [header.rstrip("\n")] if header else []
        lines += [f"{k}\t{v!r}" for k, v in self.rows()]
        lines.append("# class\tAP")
        for name in self.names:
            if name in self.per_class:
                lines.append(f"{name}\t{self.per_class[name]!r}")
        for name in self.undefined:
            lines.append(f"{name}\tundefined")
        return "\n".join(lines) + "\n"


def evaluate(scores, truths, names, ks=(1, 5), groups=None):
    ap = per_label_ap(scores, truths)
    per_class = {n: float(v) for n, v in zip(names, ap) if not np.isnan(v)}
    undefined = [n for n, v in zip(names, ap) if np.isnan(v)]
    return EvalReport(
        names=list(names),
        per_class=per_class,
        map=mean_ap(scores, truths),
        macro=macro_ap(scores, truths, groups),
        topk={k: top_k(scores, truths, k) for k in ks},
        undefined=undefined,
    )
