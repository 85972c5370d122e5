"""Accuracy metrics, the averaged post-task accuracy, and the
multi-head vs single-head gap protocol.

The gap protocol trains one linear and one weightnorm head on a frozen
trunk, task by task, with the softmax restricted to the current task's
classes; rows belonging to finished tasks are frozen. A nearest-mean
head is fitted incrementally on the same latents. Per-task-masked
accuracy minus all-classes accuracy is then reported per head kind: the
nearest-mean gap calibrates how much harder the all-classes evaluation
is by itself, and any linear/weightnorm excess over it is feature
selection that did not generalize beyond its task.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .scenario import Sample, Scenario, stack_xy


@dataclass(frozen=True)
class Entry:
    task_idx: int
    epoch: int
    split: str
    metric: str
    value: float


@dataclass
class RunRecord:
    run_id: str
    seed: int
    config: dict = field(default_factory=dict)
    entries: list[Entry] = field(default_factory=list)

    def add(self, task_idx: int, epoch: int, split: str, metric: str, value: float) -> None:
        self.entries.append(Entry(task_idx, epoch, split, metric, float(value)))

    def values(self, split: str, metric: str = "accuracy") -> list[tuple[int, int, float]]:
        return [(e.task_idx, e.epoch, e.value) for e in self.entries
                if e.split == split and e.metric == metric]

    def post_task_accuracies(self, split: str = "clean_test") -> list[float]:
        """One accuracy per task, in task order, from the after-task entries."""
        rows = [e for e in self.entries if e.split == split and e.metric == "accuracy"]
        by_task: dict[int, float] = {}
        for e in rows:
            by_task[e.task_idx] = e.value  # later entries overwrite earlier ones
        return [by_task[t] for t in sorted(by_task)]

    def to_csv(self) -> str:
        lines = ["run_id,task_idx,epoch,split,metric,value"]
        for e in self.entries:
            lines.append(f"{self.run_id},{e.task_idx},{e.epoch},{e.split},{e.metric},{e.value!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str) -> "RunRecord":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "run_id,task_idx,epoch,split,metric,value":
            raise ValueError("not a run-record CSV")
        record = RunRecord(run_id="", seed=-1)
        for ln in lines[1:]:
            run_id, task_idx, epoch, split, metric, value = ln.split(",")
            record.run_id = run_id
            record.entries.append(Entry(int(task_idx), int(epoch), split, metric, float(value)))
        return record


def accuracy(
    params: nn.ModelParams,
    samples: list[Sample],
    head: int = 0,
    class_mask: np.ndarray | None = None,
) -> float:
    """Fraction of samples whose (masked) argmax equals the label.

    Ties break toward the lowest class index for every head kind.
    """
    if not samples:
        raise ValueError("accuracy over an empty dataset")
    X, y = stack_xy(samples)
    return accuracy_xy(params, X, y, head=head, class_mask=class_mask)


def accuracy_xy(params, X, y, head: int = 0, class_mask=None) -> float:
    cache = nn.forward(params, X, train_mode=False)
    logits = cache.logits[head]
    if class_mask is not None:
        masked = np.full_like(logits, -np.inf)
        masked[:, class_mask] = logits[:, class_mask]
        logits = masked
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == y))


def omega(post_task_accuracies: list[float]) -> float:
    """Mean of the clean-test accuracies measured after each task."""
    if len(post_task_accuracies) == 0:
        raise ValueError("omega of an empty accuracy list")
    return float(np.mean(post_task_accuracies))


def overfit_report(record: RunRecord) -> list[tuple[float, float]]:
    """Per task: (own eval-with-shortcuts accuracy, clean-test accuracy),
    both measured right after training that task."""
    out = []
    clean = {e.task_idx: e.value for e in record.entries
             if e.split == "clean_test" and e.metric == "accuracy"}
    for t in sorted(clean):
        spur = [e.value for e in record.entries
                if e.split == f"eval_spurious_{t}" and e.metric == "accuracy" and e.task_idx == t]
        if not spur:
            raise ValueError(f"record is missing split eval_spurious_{t}")
        out.append((spur[-1], clean[t]))
    return out


# --- the gap protocol ---

@dataclass
class HeadGap:
    a_local: float
    a_global: float
    per_task_local: list[float]
    per_task_global: list[float]

    @property
    def gap(self) -> float:
        return self.a_local - self.a_global


@dataclass
class GapReport:
    heads: dict[str, HeadGap]
    seed: int
    frozen_rows_intact: bool
    freeze_digests: dict[str, list[str]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "frozen_rows_intact": self.frozen_rows_intact,
            "heads": {
                kind: {
                    "a_local": hg.a_local,
                    "a_global": hg.a_global,
                    "gap": hg.gap,
                    "per_task_local": hg.per_task_local,
                    "per_task_global": hg.per_task_global,
                }
                for kind, hg in self.heads.items()
            },
        }


@dataclass
class ProtocolConfig:
    epochs_per_task: int = 15
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0


def make_random_projection_trunk(input_dim: int, latent_dim: int, seed: int):
    """Frozen random features: one affine+ReLU layer, seeded."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    return nn.init_trunk(input_dim, (latent_dim,), rng)


def _row_digest(head: nn.Head, rows: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(head.weight[rows].tobytes())
    if head.bias is not None:
        h.update(head.bias[rows].tobytes())
    return h.hexdigest()


def local_spurious_protocol(
    scenario: Scenario,
    trunk: list[tuple[np.ndarray, np.ndarray]],
    config: ProtocolConfig,
) -> GapReport:
    """Train per-task-masked linear + weightnorm heads on a frozen trunk,
    freeze each task's rows when the task ends, fit the nearest-mean head
    incrementally, then compare per-task-masked and all-classes accuracy."""
    seen: set[int] = set()
    for task in scenario.tasks:
        overlap = seen & set(task.classes)
        if overlap:
            raise ValueError(f"task {task.task_id} reuses classes {sorted(overlap)}")
        seen |= set(task.classes)
    n_classes = max(seen) + 1
    latent_dim = trunk[-1][0].shape[0] if trunk else scenario.input_dim

    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(8,)))
    params = nn.ModelParams(
        trunk=[(w.copy(), b.copy()) for w, b in trunk],
        heads=[
            nn.make_linear_head(n_classes, latent_dim, rng),
            nn.make_weightnorm_head(n_classes, latent_dim, rng),
            nn.make_meanlayer_head(n_classes, latent_dim),
        ],
        trunk_frozen=True,
    )
    state = nn.make_sgd_state(params)
    freeze_digests: dict[str, list[str]] = {nn.LINEAR: [], nn.WEIGHTNORM: []}

    for task in scenario.tasks:
        X, y = stack_xy(task.train)
        mask = np.zeros(n_classes, dtype=bool)
        mask[list(task.classes)] = True
        n = X.shape[0]
        for _ in range(config.epochs_per_task):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                cache = nn.forward(params, X[idx], train_mode=True, rng=rng)
                dlogits = []
                for hi, head in enumerate(params.heads):
                    if head.kind == nn.MEANLAYER:
                        dlogits.append(None)
                        continue
                    _, dl = nn.masked_softmax_ce(cache.logits[hi], y[idx], mask)
                    dlogits.append(dl / idx.size)
                grads = nn.backward(params, cache, dlogits)
                nn.sgd_step(params, grads, state, config.lr, config.momentum)
        latents = nn.forward(params, X, train_mode=False).z
        nn.meanlayer_fit(params.heads[2], latents, y)
        rows = np.zeros(n_classes, dtype=bool)
        rows[list(task.classes)] = True
        for hi in (0, 1):
            nn.freeze_head_rows(params.heads[hi], list(task.classes), state, hi)
            freeze_digests[params.heads[hi].kind].append(_row_digest(params.heads[hi], rows))

    intact = True
    for hi, kind in ((0, nn.LINEAR), (1, nn.WEIGHTNORM)):
        for task in scenario.tasks:
            rows = np.zeros(n_classes, dtype=bool)
            rows[list(task.classes)] = True
            if _row_digest(params.heads[hi], rows) != freeze_digests[kind][task.task_id]:
                intact = False

    head_kinds = [h.kind for h in params.heads]
    gaps: dict[str, HeadGap] = {}
    sizes = [len(t.eval_spurious) for t in scenario.tasks]
    for hi, kind in enumerate(head_kinds):
        per_local, per_global = [], []
        for task in scenario.tasks:
            mask = np.zeros(n_classes, dtype=bool)
            mask[list(task.classes)] = True
            per_local.append(accuracy(params, task.eval_spurious, head=hi, class_mask=mask))
            per_global.append(accuracy(params, task.eval_spurious, head=hi))
        a_local = float(np.mean(per_local))
        a_global = float(np.average(per_global, weights=sizes))
        gaps[kind] = HeadGap(a_local=a_local, a_global=a_global,
                             per_task_local=per_local, per_task_global=per_global)
    return GapReport(heads=gaps, seed=config.seed, frozen_rows_intact=intact,
                     freeze_digests=freeze_digests)
