"""Binary feature-label correlation and the feature taxonomy.

A feature is represented by a predicate w(sample) -> {0, 1}. Its
association with a class is the phi coefficient of the two indicator
variables, and a feature is "discriminative" for a class when its
correlation beats every other class's by an additive margin tau.
Crossing that check over a single task, the pooled task stream, and the
clean test set sorts features into good / spurious / local-spurious.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .scenario import Sample, Scenario

GOOD = "good"
SPURIOUS = "spurious"
LOCAL = "local"
LOCAL_SPURIOUS = "local_spurious"
NON_DISCRIMINATIVE = "non_discriminative"


@dataclass(frozen=True)
class FeaturePredicate:
    id: int
    fn: Callable[[Sample], int]

    def __call__(self, sample: Sample) -> int:
        return 1 if self.fn(sample) else 0


@dataclass
class FeatureReport:
    feature_id: int
    class_y: int
    kind: str
    margin_tau: float
    correlations: dict[str, dict[int, float]]  # dataset -> class -> phi

    def to_json_dict(self) -> dict:
        return {
            "feature_id": self.feature_id,
            "class_y": self.class_y,
            "kind": self.kind,
            "margin_tau": self.margin_tau,
            "correlations": {
                ds: {str(c): v for c, v in per_class.items()}
                for ds, per_class in self.correlations.items()
            },
        }


def correlation(samples: list[Sample], predicate: FeaturePredicate, y: int) -> float:
    """Phi coefficient between 1[w(x)=1] and 1[label=y].

    Returns 0.0 when either indicator is constant (a constant feature
    discriminates nothing and the ratio would be 0/0).
    """
    if not samples:
        raise ValueError("correlation over an empty dataset")
    a = np.array([predicate(s) for s in samples], dtype=np.int64)
    b = np.array([1 if s.y == y else 0 for s in samples], dtype=np.int64)
    n = a.size
    n11 = int(np.sum((a == 1) & (b == 1)))
    n10 = int(np.sum((a == 1) & (b == 0)))
    n01 = int(np.sum((a == 0) & (b == 1)))
    n00 = n - n11 - n10 - n01
    a1, a0 = n11 + n10, n01 + n00
    b1, b0 = n11 + n01, n10 + n00
    if a1 == 0 or a0 == 0 or b1 == 0 or b0 == 0:
        return 0.0
    denom = np.sqrt(float(a1) * a0 * b1 * b0)
    return float((n11 * n00 - n10 * n01) / denom)


def per_class_correlations(samples: list[Sample], predicate: FeaturePredicate) -> dict[int, float]:
    classes = sorted({s.y for s in samples})
    return {c: correlation(samples, predicate, c) for c in classes}


def is_discriminative(samples: list[Sample], predicate: FeaturePredicate, y: int, tau: float) -> bool:
    """True iff the feature's correlation with y beats every other class's
    correlation by at least tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    corr = per_class_correlations(samples, predicate)
    if y not in corr:
        raise ValueError(f"class {y} not present in dataset")
    others = [c for c in corr if c != y]
    if not others:
        raise ValueError("dataset has a single class; nothing to compare against")
    return all(corr[y] >= corr[c] + tau for c in others)


def classify_feature(
    predicate: FeaturePredicate,
    y: int,
    task_samples: list[Sample],
    scenario_train: list[Sample],
    clean_test: list[Sample],
    tau: float = 0.2,
    task_only: bool = False,
) -> str:
    """Sort a feature by where its class correlation survives.

    Fails on the task itself -> non_discriminative. With ``task_only`` the
    stream/test checks are skipped and a task-discriminative feature is
    reported as merely local. Otherwise: discriminative on the pooled
    stream and the clean test -> good; on the stream but not the test ->
    spurious; on the task but not the stream -> local_spurious.
    """
    if not is_discriminative(task_samples, predicate, y, tau):
        return NON_DISCRIMINATIVE
    if task_only:
        return LOCAL
    on_stream = is_discriminative(scenario_train, predicate, y, tau)
    if not on_stream:
        return LOCAL_SPURIOUS
    on_test = is_discriminative(clean_test, predicate, y, tau)
    return GOOD if on_test else SPURIOUS


def feature_report(
    predicate: FeaturePredicate,
    y: int,
    task_samples: list[Sample],
    scenario_train: list[Sample],
    clean_test: list[Sample],
    tau: float = 0.2,
) -> FeatureReport:
    kind = classify_feature(predicate, y, task_samples, scenario_train, clean_test, tau)
    return FeatureReport(
        feature_id=predicate.id,
        class_y=y,
        kind=kind,
        margin_tau=tau,
        correlations={
            "task": per_class_correlations(task_samples, predicate),
            "scenario": per_class_correlations(scenario_train, predicate),
            "clean_test": per_class_correlations(clean_test, predicate),
        },
    )


def injected_feature_predicate(task_id: int, y: int, n_classes: int = 2) -> FeaturePredicate:
    """Ground-truth detector for the shortcut injected for (task, class)."""
    sid = task_id * n_classes + y
    return FeaturePredicate(id=sid, fn=lambda s: s.spurious_present and s.spurious_id == sid)


def threshold_predicate(feature_id: int, dim: int, threshold: float) -> FeaturePredicate:
    """Content detector: fires when one input dimension exceeds a threshold."""
    return FeaturePredicate(id=feature_id, fn=lambda s: s.flat_x()[dim] > threshold)


def analyze_scenario(scenario: Scenario, tau: float = 0.2) -> list[FeatureReport]:
    """Reports for every injected (task, class) shortcut in the scenario."""
    pooled = [s for t in scenario.tasks for s in t.train]
    reports = []
    for task in scenario.tasks:
        for y in task.classes:
            pred = injected_feature_predicate(task.task_id, y, n_classes=len(task.classes))
            if not any(pred(s) for s in task.train):
                continue  # p = 0: nothing was injected
            reports.append(feature_report(pred, y, task.train, pooled, scenario.clean_test, tau))
    return reports
