"""Continual training loops: finetune, class-balanced replay, and
replay-driven invariance regularizers.

Replayed samples keep their task of origin, and those tags group a
mixed batch into environments. The regularizers act per environment:

* ``irm``                  -- squared derivative of each environment's CE
                              with respect to a global logit scaling
* ``ib_erm`` / ``ib_irm``  -- latent-variance penalty (plus the IRM term)
* ``group_dro``            -- exponentiated-gradient environment weights
* ``spectral_decoupling``  -- L2 on the active logits

With zero penalty weights every method follows the replay trajectory
bit for bit (the penalty code paths are skipped entirely, not merely
scaled to zero).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import nn, persist
from .metrics import RunRecord, accuracy_xy
from .scenario import Sample, Scenario, TaskData, stack_xy

FINETUNE = "finetune"
REPLAY = "replay"
IRM = "irm"
IB_ERM = "ib_erm"
IB_IRM = "ib_irm"
GROUP_DRO = "group_dro"
SPECTRAL_DECOUPLING = "spectral_decoupling"
METHODS = (FINETUNE, REPLAY, IRM, IB_ERM, IB_IRM, GROUP_DRO, SPECTRAL_DECOUPLING)


@dataclass
class TrainerConfig:
    method: str = FINETUNE
    epochs_per_task: int = 20
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    penalty_weight: float = 1.0        # lambda for irm / ib_irm / spectral_decoupling
    penalty_warmup_epochs: int = 1
    dro_eta: float = 1.0
    ib_weight: float = 0.0             # latent-variance weight for ib_erm / ib_irm
    buffer_per_class: int = 100
    dropout_rate: float = 0.0
    pretrained_trunk: str | None = None
    hidden_dims: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.epochs_per_task < 1:
            raise ValueError("epochs_per_task must be >= 1")
        if self.penalty_weight < 0 or self.dro_eta < 0 or self.ib_weight < 0:
            raise ValueError("penalty weights must be nonnegative")


def default_hidden_dims(input_dim: int) -> tuple[int, ...]:
    # wide-but-shallow for image-sized inputs, 2x128 otherwise
    return (256,) if input_dim >= 1024 else (128, 128)


# --- replay buffer ---

@dataclass
class ReplayBuffer:
    capacity: int
    per_class: dict[int, list[tuple[Sample, int]]] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def samples(self) -> list[tuple[Sample, int]]:
        out = []
        for cls in sorted(self.per_class):
            out.extend(self.per_class[cls])
        return out


def buffer_update(buffer: ReplayBuffer, task_data: TaskData, rng: np.random.Generator) -> ReplayBuffer:
    """Uniformly draw new samples per class, tagged with the task of origin,
    but only up to the class store's remaining capacity: samples stored by
    earlier tasks are never evicted (first-seen wins per class)."""
    by_class: dict[int, list[Sample]] = {}
    for s in task_data.train:
        by_class.setdefault(s.y, []).append(s)
    for cls in sorted(by_class):
        pool = by_class[cls]
        store = buffer.per_class.setdefault(cls, [])
        k = min(buffer.capacity - len(store), len(pool))
        if k <= 0:
            continue
        picked = rng.choice(len(pool), size=k, replace=False)
        store.extend((pool[i], task_data.task_id) for i in sorted(picked))
    return buffer


def balanced_sampler_weights(labels: np.ndarray) -> np.ndarray:
    """Per-sample weight 1/count(label): drawing with replacement under
    these weights makes every class equally likely."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("no labels to weight")
    counts = np.bincount(labels)
    return 1.0 / counts[labels].astype(np.float64)


# --- per-method losses ---

@dataclass
class MethodLossResult:
    loss: float
    dlogits: np.ndarray
    dz: np.ndarray | None = None


def irm_penalty(logits: np.ndarray, labels: np.ndarray, active_mask=None) -> float:
    """Squared derivative of the mean CE with respect to a scalar scaling
    of the logits, evaluated at scale 1."""
    g = _scaling_grad(logits, labels, active_mask)
    return float(g * g)


def _scaling_grad(logits, labels, active_mask):
    losses, dl = nn.masked_softmax_ce(logits, labels, active_mask)
    del losses
    lb = np.atleast_2d(logits)
    return float(np.sum(dl * lb) / lb.shape[0])


def _scaling_grad_dlogits(logits, labels, active_mask):
    """d/dlogits of the scaling derivative g = mean_i <p_i - y_i, l_i>."""
    _, dl = nn.masked_softmax_ce(logits, labels, active_mask)
    lb = np.atleast_2d(logits)
    n = lb.shape[0]
    if active_mask is None:
        active_mask = np.ones(lb.shape[1], dtype=bool)
    probs = dl.copy()
    probs[np.arange(n), np.atleast_1d(labels)] += 1.0
    inner = np.sum(probs * lb, axis=1, keepdims=True)
    extra = probs * (lb - inner)
    extra[:, ~active_mask] = 0.0
    return (dl + extra) / n


@dataclass
class DroState:
    q: dict[int, float]

    def as_probability_vector(self) -> np.ndarray:
        return np.array([self.q[k] for k in sorted(self.q)])


def make_dro_state(env_ids: list[int]) -> DroState:
    envs = sorted(set(env_ids))
    return DroState(q={e: 1.0 / len(envs) for e in envs})


def dro_update(state: DroState, env_losses: dict[int, float], eta: float) -> None:
    """Multiplicative weights on environment mean losses, renormalized."""
    for e, loss in env_losses.items():
        state.q[e] = state.q[e] * float(np.exp(eta * loss))
    total = sum(state.q.values())
    for e in state.q:
        state.q[e] /= total


def method_loss(
    method: str,
    logits: np.ndarray,
    labels: np.ndarray,
    env_ids: np.ndarray,
    cfg: TrainerConfig,
    active_mask: np.ndarray | None = None,
    z: np.ndarray | None = None,
    penalty_scale: float = 1.0,
    dro_state: DroState | None = None,
) -> MethodLossResult:
    """Scalar loss and its exact gradient w.r.t. logits (and the latent,
    for the variance penalty), for one mixed batch grouped by env_ids."""
    B = np.atleast_2d(logits).shape[0]
    if B == 0:
        raise ValueError("empty batch")
    env_ids = np.asarray(env_ids)
    envs = sorted(set(env_ids.tolist()))
    if not envs:
        raise ValueError("batch has no environments")
    losses, dl = nn.masked_softmax_ce(logits, labels, active_mask)
    base_loss = float(np.mean(losses))
    lam = cfg.penalty_weight * penalty_scale
    lam_ib = cfg.ib_weight * penalty_scale

    if method in (FINETUNE, REPLAY):
        return MethodLossResult(loss=base_loss, dlogits=dl / B)

    if method == GROUP_DRO:
        if cfg.dro_eta == 0.0:
            return MethodLossResult(loss=base_loss, dlogits=dl / B)
        if dro_state is None:
            raise ValueError("group_dro needs a DroState")
        env_losses = {e: float(np.mean(losses[env_ids == e])) for e in envs}
        dro_update(dro_state, env_losses, cfg.dro_eta)
        n_groups = len(dro_state.q)
        weights = np.empty(B)
        for e in envs:
            weights[env_ids == e] = dro_state.q[e] * n_groups
        loss = float(np.sum(weights * losses) / B)
        return MethodLossResult(loss=loss, dlogits=dl * weights[:, None] / B)

    if method == SPECTRAL_DECOUPLING:
        if lam == 0.0:
            return MethodLossResult(loss=base_loss, dlogits=dl / B)
        lb = np.atleast_2d(logits)
        active = np.ones(lb.shape[1], dtype=bool) if active_mask is None else np.asarray(active_mask, dtype=bool)
        sq = np.sum(lb[:, active] ** 2, axis=1)
        loss = base_loss + (lam / 2.0) * float(np.mean(sq))
        dlog = dl / B
        dlog = dlog.copy()
        dlog[:, active] += lam * lb[:, active] / B
        return MethodLossResult(loss=loss, dlogits=dlog)

    if method in (IRM, IB_ERM, IB_IRM):
        loss = base_loss
        dlog = dl / B
        dz = None
        if method in (IRM, IB_IRM) and lam != 0.0:
            dlog = dlog.copy()
            for e in envs:
                sel = env_ids == e
                g = _scaling_grad(np.atleast_2d(logits)[sel], np.atleast_1d(labels)[sel], active_mask)
                loss += lam * g * g
                dlog[sel] += lam * 2.0 * g * _scaling_grad_dlogits(
                    np.atleast_2d(logits)[sel], np.atleast_1d(labels)[sel], active_mask)
        if method in (IB_ERM, IB_IRM) and lam_ib != 0.0:
            if z is None:
                raise ValueError("variance penalty needs the latent batch")
            zb = np.atleast_2d(z)
            mu = zb.mean(axis=0, keepdims=True)
            var = np.mean((zb - mu) ** 2)  # mean over batch and dims
            loss += lam_ib * float(var)
            dz = lam_ib * 2.0 * (zb - mu) / zb.size
        return MethodLossResult(loss=loss, dlogits=dlog, dz=dz)

    raise ValueError(f"unknown method {method!r}")


def interference(grad_a: np.ndarray, grad_b: np.ndarray) -> float:
    """Dot product of two flat gradients; negative values flag conflict."""
    a = np.asarray(grad_a, dtype=np.float64).ravel()
    b = np.asarray(grad_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"gradient length mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


def task_gradient(params: nn.ModelParams, samples: list[Sample], active_mask=None) -> np.ndarray:
    """Flat gradient of the mean CE over a task, for interference probes."""
    X, y = stack_xy(samples)
    cache = nn.forward(params, X, train_mode=False)
    dlogits = []
    for head, lg in zip(params.heads, cache.logits):
        if head.kind == nn.MEANLAYER:
            dlogits.append(None)
            continue
        _, dl = nn.masked_softmax_ce(lg, y, active_mask)
        dlogits.append(dl / X.shape[0])
    grads = nn.backward(params, cache, dlogits)
    flat = [g.ravel() for name, g in nn.grads_by_name(params, grads)]
    return np.concatenate(flat) if flat else np.zeros(0)


# --- the continual loop ---

@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    train_accuracy: float


def _mixed_arrays(task_data: TaskData, buffer: ReplayBuffer | None, use_buffer: bool):
    samples = list(task_data.train)
    envs = [task_data.task_id] * len(samples)
    if use_buffer and buffer is not None:
        for s, origin in buffer.samples():
            samples.append(s)
            envs.append(origin)
    X, y = stack_xy(samples)
    return X, y, np.asarray(envs, dtype=np.int64)


def train_task(
    model: nn.ModelParams,
    state: nn.SGDState,
    task_data: TaskData,
    buffer: ReplayBuffer | None,
    config: TrainerConfig,
    rng: np.random.Generator,
    epoch_callback=None,
) -> list[EpochLog]:
    """One task's epochs: balanced sampling over current-task plus buffer,
    the per-method loss, SGD updates, then a buffer refresh."""
    if not task_data.train:
        raise ValueError(f"task {task_data.task_id} has an empty train set")
    use_buffer = config.method != FINETUNE
    X, y, envs = _mixed_arrays(task_data, buffer, use_buffer)
    weights = balanced_sampler_weights(y)
    probs = weights / weights.sum()
    n_current = len(task_data.train)
    steps_per_epoch = max(1, int(np.ceil(n_current / config.batch_size)))
    warmup_steps = max(1, config.penalty_warmup_epochs * steps_per_epoch)
    dro_state = make_dro_state(envs.tolist()) if (config.method == GROUP_DRO and config.dro_eta > 0.0) else None

    logs = []
    step = 0
    for epoch in range(config.epochs_per_task):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            idx = rng.choice(X.shape[0], size=config.batch_size, replace=True, p=probs)
            cache = nn.forward(model, X[idx], train_mode=True, rng=rng)
            scale = min(1.0, (step + 1) / warmup_steps)
            result = method_loss(
                config.method, cache.logits[0], y[idx], envs[idx], config,
                z=cache.z, penalty_scale=scale, dro_state=dro_state,
            )
            dlogits: list[np.ndarray | None] = [None] * len(model.heads)
            dlogits[0] = result.dlogits
            grads = nn.backward(model, cache, dlogits, dz_extra=result.dz)
            nn.sgd_step(model, grads, state, config.lr, config.momentum)
            epoch_losses.append(result.loss)
            step += 1
        logs.append(EpochLog(epoch=epoch, mean_loss=float(np.mean(epoch_losses)),
                             train_accuracy=accuracy_xy(model, X[:n_current], y[:n_current])))
        if epoch_callback is not None:
            epoch_callback(epoch, logs[-1])
    if buffer is not None:
        buffer_update(buffer, task_data, rng)
    return logs


def build_model(config: TrainerConfig, input_dim: int, n_classes: int, rng: np.random.Generator) -> nn.ModelParams:
    hidden = config.hidden_dims or default_hidden_dims(input_dim)
    model = nn.init_model(input_dim, tuple(hidden), n_classes, rng,
                          head_kinds=(nn.LINEAR,), dropout_rate=config.dropout_rate)
    if config.pretrained_trunk:
        loaded = persist.load_checkpoint(config.pretrained_trunk)
        model.trunk = loaded.trunk
        model.trunk_frozen = True
        latent = loaded.trunk[-1][0].shape[0] if loaded.trunk else input_dim
        if model.heads[0].weight.shape[1] != latent:
            model.heads = [nn.make_linear_head(n_classes, latent, rng)]
    return model


def run_scenario(
    scenario: Scenario,
    config: TrainerConfig,
    run_id: str = "run",
    per_epoch_eval: bool = False,
) -> tuple[RunRecord, nn.ModelParams]:
    """Train the task stream in order; after each task, evaluate the clean
    test set and every seen task's shortcut eval split."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(16,)))
    n_classes = scenario.n_classes
    model = build_model(config, scenario.input_dim, n_classes, rng)
    state = nn.make_sgd_state(model)
    buffer = ReplayBuffer(capacity=config.buffer_per_class)
    record = RunRecord(run_id=run_id, seed=config.seed)

    clean_X, clean_y = stack_xy(scenario.clean_test)
    eval_sets = [stack_xy(t.eval_spurious) for t in scenario.tasks]

    for task in scenario.tasks:
        def on_epoch(epoch: int, log: EpochLog, task=task) -> None:
            record.add(task.task_id, epoch, "train", "loss", log.mean_loss)
            if per_epoch_eval:
                record.add(task.task_id, epoch, "clean_test", "epoch_accuracy",
                           accuracy_xy(model, clean_X, clean_y))
                for seen in range(task.task_id + 1):
                    ex, ey = eval_sets[seen]
                    record.add(task.task_id, epoch, f"eval_spurious_{seen}", "epoch_accuracy",
                               accuracy_xy(model, ex, ey))

        logs = train_task(model, state, task, buffer, config, rng, epoch_callback=on_epoch)
        last = config.epochs_per_task - 1
        record.add(task.task_id, last, "train", "accuracy", logs[-1].train_accuracy)
        record.add(task.task_id, last, "clean_test", "accuracy",
                   accuracy_xy(model, clean_X, clean_y))
        for seen in range(task.task_id + 1):
            ex, ey = eval_sets[seen]
            record.add(task.task_id, last, f"eval_spurious_{seen}", "accuracy",
                       accuracy_xy(model, ex, ey))
    return record, model


def trajectory_digest(model: nn.ModelParams) -> str:
    h = hashlib.sha256()
    for name, arr in nn.all_param_arrays(model):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
