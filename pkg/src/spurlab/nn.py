"""Small dense-network engine with explicit backprop.

The trunk is a stack of affine layers with ReLU after each one; one or
more classifier heads read the shared latent vector:

* ``linear``     -- o_i = <z, A_i> + b_i
* ``weightnorm`` -- o_i = cos(z, A_i), norm- and bias-free at inference
* ``meanlayer``  -- o_i = -||z - mu_i||, a nearest-class-mean layer that
                    is fitted from latents rather than trained by SGD

Inverted dropout is applied to the latent only, and only in train mode.
All arithmetic is float64; file storage downcasts to float32 (persist).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LINEAR = "linear"
WEIGHTNORM = "weightnorm"
MEANLAYER = "meanlayer"
HEAD_KINDS = (LINEAR, WEIGHTNORM, MEANLAYER)


@dataclass
class Head:
    kind: str
    weight: np.ndarray | None = None       # (n_classes, latent_dim)
    bias: np.ndarray | None = None         # (n_classes,), linear only
    mean_sums: np.ndarray | None = None    # (n_classes, latent_dim), meanlayer
    mean_counts: np.ndarray | None = None  # (n_classes,), meanlayer
    frozen: bool = False
    frozen_rows: np.ndarray | None = None  # bool (n_classes,), row-level freeze

    @property
    def n_classes(self) -> int:
        ref = self.weight if self.weight is not None else self.mean_sums
        return ref.shape[0]

    def class_means(self) -> np.ndarray:
        """Fitted means; rows of unfitted classes are NaN."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.mean_sums / self.mean_counts[:, None]


def make_linear_head(n_classes: int, latent_dim: int, rng: np.random.Generator) -> Head:
    bound = 1.0 / np.sqrt(latent_dim)
    return Head(
        kind=LINEAR,
        weight=rng.uniform(-bound, bound, size=(n_classes, latent_dim)),
        bias=rng.uniform(-bound, bound, size=n_classes),
        frozen_rows=np.zeros(n_classes, dtype=bool),
    )


def make_weightnorm_head(n_classes: int, latent_dim: int, rng: np.random.Generator) -> Head:
    bound = 1.0 / np.sqrt(latent_dim)
    weight = rng.uniform(-bound, bound, size=(n_classes, latent_dim))
    check_nonzero_rows(weight)
    return Head(kind=WEIGHTNORM, weight=weight, frozen_rows=np.zeros(n_classes, dtype=bool))


def make_meanlayer_head(n_classes: int, latent_dim: int) -> Head:
    return Head(
        kind=MEANLAYER,
        mean_sums=np.zeros((n_classes, latent_dim)),
        mean_counts=np.zeros(n_classes),
        frozen_rows=np.zeros(n_classes, dtype=bool),
    )


def check_nonzero_rows(weight: np.ndarray) -> None:
    norms = np.linalg.norm(weight, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"weightnorm head has zero rows at {np.flatnonzero(norms == 0.0).tolist()}")


@dataclass
class ModelParams:
    trunk: list[tuple[np.ndarray, np.ndarray]]  # [(W out x in, b out)]
    heads: list[Head]
    dropout_rate: float = 0.0
    trunk_frozen: bool = False

    @property
    def param_count(self) -> int:
        n = sum(w.size + b.size for w, b in self.trunk)
        for h in self.heads:
            if h.weight is not None:
                n += h.weight.size
            if h.bias is not None:
                n += h.bias.size
        return n


def init_trunk(input_dim: int, hidden_dims: tuple[int, ...], rng: np.random.Generator):
    """Affine+ReLU stack, weights and biases uniform in +-1/sqrt(fan_in)."""
    layers = []
    fan_in = input_dim
    for width in hidden_dims:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(width, fan_in))
        b = rng.uniform(-bound, bound, size=width)
        layers.append((w, b))
        fan_in = width
    return layers


def init_model(
    input_dim: int,
    hidden_dims: tuple[int, ...],
    n_classes: int,
    rng: np.random.Generator,
    head_kinds: tuple[str, ...] = (LINEAR,),
    dropout_rate: float = 0.0,
) -> ModelParams:
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    trunk = init_trunk(input_dim, hidden_dims, rng)
    latent_dim = hidden_dims[-1] if hidden_dims else input_dim
    heads = []
    for kind in head_kinds:
        if kind == LINEAR:
            heads.append(make_linear_head(n_classes, latent_dim, rng))
        elif kind == WEIGHTNORM:
            heads.append(make_weightnorm_head(n_classes, latent_dim, rng))
        elif kind == MEANLAYER:
            heads.append(make_meanlayer_head(n_classes, latent_dim))
        else:
            raise ValueError(f"unknown head kind {kind!r}")
    return ModelParams(trunk=trunk, heads=heads, dropout_rate=dropout_rate)


@dataclass
class ForwardCache:
    x: np.ndarray                     # (B, D) input as fed to the trunk
    pre: list[np.ndarray]             # per trunk layer, (B, width)
    act: list[np.ndarray]             # post-ReLU, (B, width)
    z_raw: np.ndarray                 # latent before dropout
    z: np.ndarray                     # latent heads see
    dropout_mask: np.ndarray | None   # (B, h) float 0/1, None in eval mode
    logits: list[np.ndarray]          # per head, (B, n_classes)


def forward(
    params: ModelParams,
    x: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardCache:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if params.trunk and x.shape[1] != params.trunk[0][0].shape[1]:
        raise ValueError(f"input dim {x.shape[1]} != first layer fan-in {params.trunk[0][0].shape[1]}")
    pre, act = [], []
    h = x
    for w, b in params.trunk:
        p = h @ w.T + b
        h = np.maximum(p, 0.0)
        pre.append(p)
        act.append(h)
    z_raw = h
    mask = None
    if train_mode and params.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        keep = 1.0 - params.dropout_rate
        mask = (rng.random(z_raw.shape) < keep).astype(np.float64)
        z = z_raw * mask / keep
    else:
        z = z_raw
    logits = [head_logits(head, z) for head in params.heads]
    return ForwardCache(x=x, pre=pre, act=act, z_raw=z_raw, z=z, dropout_mask=mask, logits=logits)


def head_logits(head: Head, z: np.ndarray) -> np.ndarray:
    if head.kind == LINEAR:
        return linear_logits(head, z)
    if head.kind == WEIGHTNORM:
        return weightnorm_logits(head, z)
    if head.kind == MEANLAYER:
        return meanlayer_logits(head, z)
    raise ValueError(f"unknown head kind {head.kind!r}")


def _as_batch(z: np.ndarray) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[None, :], True
    return z, False


def linear_logits(head: Head, z: np.ndarray) -> np.ndarray:
    zb, single = _as_batch(z)
    out = zb @ head.weight.T + head.bias
    return out[0] if single else out


def weightnorm_logits(head: Head, z: np.ndarray) -> np.ndarray:
    """Cosine of the angle between z and each class row; 0 for z = 0."""
    zb, single = _as_batch(z)
    check_nonzero_rows(head.weight)
    zn = np.linalg.norm(zb, axis=1)
    an = np.linalg.norm(head.weight, axis=1)
    out = np.zeros((zb.shape[0], head.weight.shape[0]))
    nz = zn > 0.0
    out[nz] = (zb[nz] @ head.weight.T) / (zn[nz, None] * an[None, :])
    return out[0] if single else out


def meanlayer_logits(head: Head, z: np.ndarray) -> np.ndarray:
    """Negative euclidean distance to each fitted class mean (-inf if unfitted)."""
    zb, single = _as_batch(z)
    means = head.class_means()
    out = np.full((zb.shape[0], means.shape[0]), -np.inf)
    fitted = head.mean_counts > 0
    if fitted.any():
        diff = zb[:, None, :] - means[None, fitted, :]
        out[:, fitted] = -np.sqrt(np.sum(diff * diff, axis=2))
    return out[0] if single else out


def meanlayer_fit(head: Head, latents: np.ndarray, labels: np.ndarray, require_complete: bool = False) -> None:
    """Accumulate running class means; incremental calls over batches are
    exactly equivalent to one call over their concatenation."""
    if head.kind != MEANLAYER:
        raise ValueError("meanlayer_fit on a non-meanlayer head")
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if latents.shape[0] != labels.shape[0]:
        raise ValueError("latents/labels length mismatch")
    n_classes = head.mean_sums.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("label out of range for meanlayer head")
    for c in np.unique(labels):
        sel = labels == c
        head.mean_sums[c] += latents[sel].sum(axis=0)
        head.mean_counts[c] += sel.sum()
    if require_complete and np.any(head.mean_counts == 0):
        missing = np.flatnonzero(head.mean_counts == 0).tolist()
        raise ValueError(f"meanlayer fit left classes without samples: {missing}")


def masked_softmax_ce(logits: np.ndarray, labels, active_mask: np.ndarray | None = None):
    """Cross-entropy with the softmax restricted to ``active_mask`` classes.

    Returns per-sample losses and per-sample dlogits (softmax minus one-hot,
    zero on masked-out entries). 1-D logits with a scalar label give scalars
    back. Log-sum-exp is stabilised against overflow.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    lb = logits[None, :] if single else logits
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_classes = lb.shape[1]
    if active_mask is None:
        active_mask = np.ones(n_classes, dtype=bool)
    active_mask = np.asarray(active_mask, dtype=bool)
    if active_mask.shape != (n_classes,):
        raise ValueError("active_mask must have one entry per class")
    if not active_mask.any():
        raise ValueError("active_mask selects no classes")
    if np.any(~active_mask[labels]):
        bad = labels[~active_mask[labels]]
        raise ValueError(f"labels {bad.tolist()} outside the active mask")
    sub = lb[:, active_mask]
    shift = sub.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.exp(sub - shift).sum(axis=1))
    losses = lse - lb[np.arange(lb.shape[0]), labels]
    probs = np.zeros_like(lb)
    probs[:, active_mask] = np.exp(sub - lse[:, None])
    dlogits = probs.copy()
    dlogits[np.arange(lb.shape[0]), labels] -= 1.0
    if single:
        return losses[0], dlogits[0]
    return losses, dlogits


@dataclass
class Grads:
    trunk: list[tuple[np.ndarray, np.ndarray]]
    heads: list[dict[str, np.ndarray]]


def backward(
    params: ModelParams,
    cache: ForwardCache,
    dlogits: list[np.ndarray | None],
    dz_extra: np.ndarray | None = None,
) -> Grads:
    """Exact gradients for the given per-head dlogits.

    Frozen heads and meanlayer heads get empty grads; frozen rows are
    zeroed. ``dz_extra`` adds a direct gradient on the latent (for
    regularisers that act on z rather than on logits).
    """
    if len(dlogits) != len(params.heads):
        raise ValueError("one dlogits entry per head required")
    B = cache.x.shape[0]
    dz = np.zeros_like(cache.z)
    if dz_extra is not None:
        dz = dz + dz_extra
    head_grads: list[dict[str, np.ndarray]] = []
    for head, dl in zip(params.heads, dlogits):
        if dl is None or head.kind == MEANLAYER:
            head_grads.append({})
            continue
        dl = np.atleast_2d(np.asarray(dl, dtype=np.float64))
        if dl.shape != (B, head.n_classes):
            raise ValueError(f"dlogits shape {dl.shape} != {(B, head.n_classes)}")
        if head.kind == LINEAR:
            g = {} if head.frozen else {"weight": dl.T @ cache.z, "bias": dl.sum(axis=0)}
            dz += dl @ head.weight
        else:  # weightnorm
            g = {} if head.frozen else {"weight": _weightnorm_dweight(head, cache.z, dl)}
            dz += _weightnorm_dz(head, cache.z, dl)
        if g and head.frozen_rows is not None and head.frozen_rows.any():
            for arr in g.values():
                arr[head.frozen_rows] = 0.0
        head_grads.append(g)
    if params.trunk_frozen or not params.trunk:
        trunk_grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.trunk]
        return Grads(trunk=trunk_grads, heads=head_grads)
    if cache.dropout_mask is not None:
        delta = dz * cache.dropout_mask / (1.0 - params.dropout_rate)
    else:
        delta = dz
    trunk_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.trunk)
    for li in range(len(params.trunk) - 1, -1, -1):
        w, _ = params.trunk[li]
        delta = delta * (cache.pre[li] > 0.0)  # ReLU subgradient, 0 at the kink
        below = cache.act[li - 1] if li > 0 else cache.x
        trunk_grads[li] = (delta.T @ below, delta.sum(axis=0))
        if li > 0:
            delta = delta @ w
    return Grads(trunk=trunk_grads, heads=head_grads)


def _weightnorm_dweight(head: Head, z: np.ndarray, dl: np.ndarray) -> np.ndarray:
    zn = np.linalg.norm(z, axis=1)
    an = np.linalg.norm(head.weight, axis=1)
    nz = zn > 0.0
    zun = np.zeros_like(z)
    zun[nz] = z[nz] / zn[nz, None]
    cos = (zun @ head.weight.T) / an[None, :]
    term1 = (dl.T @ zun) / an[:, None]
    coef = (dl * cos).sum(axis=0) / (an * an)
    return term1 - coef[:, None] * head.weight


def _weightnorm_dz(head: Head, z: np.ndarray, dl: np.ndarray) -> np.ndarray:
    zn = np.linalg.norm(z, axis=1)
    an = np.linalg.norm(head.weight, axis=1)
    dz = np.zeros_like(z)
    nz = zn > 0.0
    if not nz.any():
        return dz
    cos = np.zeros((z.shape[0], head.weight.shape[0]))
    cos[nz] = (z[nz] @ head.weight.T) / (zn[nz, None] * an[None, :])
    dz[nz] = (dl[nz] / an[None, :]) @ head.weight / zn[nz, None]
    dz[nz] -= ((dl[nz] * cos[nz]).sum(axis=1) / (zn[nz] ** 2))[:, None] * z[nz]
    return dz


@dataclass
class SGDState:
    trunk_v: list[tuple[np.ndarray, np.ndarray]]
    head_v: list[dict[str, np.ndarray]]


def make_sgd_state(params: ModelParams) -> SGDState:
    trunk_v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.trunk]
    head_v = []
    for h in params.heads:
        v = {}
        if h.kind in (LINEAR, WEIGHTNORM):
            v["weight"] = np.zeros_like(h.weight)
        if h.kind == LINEAR:
            v["bias"] = np.zeros_like(h.bias)
        head_v.append(v)
    return SGDState(trunk_v=trunk_v, head_v=head_v)


def sgd_step(params: ModelParams, grads: Grads, state: SGDState, lr: float, momentum: float = 0.0) -> None:
    """Momentum SGD, in place. Frozen heads, frozen rows and a frozen trunk
    are left bit-identical (their velocities are pinned to zero)."""
    if not params.trunk_frozen:
        for (w, b), (gw, gb), (vw, vb) in zip(params.trunk, grads.trunk, state.trunk_v):
            vw *= momentum
            vw += gw
            vb *= momentum
            vb += gb
            w -= lr * vw
            b -= lr * vb
    for head, g, v in zip(params.heads, grads.heads, state.head_v):
        if head.frozen or head.kind == MEANLAYER or not g:
            continue
        for key, grad in g.items():
            vel = v[key]
            vel *= momentum
            vel += grad
            if head.frozen_rows is not None and head.frozen_rows.any():
                vel[head.frozen_rows] = 0.0
            tgt = head.weight if key == "weight" else head.bias
            tgt -= lr * vel


def freeze_head_rows(head: Head, classes, state: SGDState | None = None, head_index: int | None = None) -> None:
    """Mark class rows frozen and clear their momentum so they never drift."""
    classes = np.asarray(list(classes), dtype=np.int64)
    if head.frozen_rows is None:
        head.frozen_rows = np.zeros(head.n_classes, dtype=bool)
    head.frozen_rows[classes] = True
    if state is not None and head_index is not None:
        for vel in state.head_v[head_index].values():
            vel[classes] = 0.0


# --- flat parameter views (finite differences, trajectory digests) ---

def trainable_arrays(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    out = []
    if not params.trunk_frozen:
        for i, (w, b) in enumerate(params.trunk):
            out.append((f"trunk{i}.w", w))
            out.append((f"trunk{i}.b", b))
    for i, h in enumerate(params.heads):
        if h.frozen or h.kind == MEANLAYER:
            continue
        out.append((f"head{i}.weight", h.weight))
        if h.kind == LINEAR:
            out.append((f"head{i}.bias", h.bias))
    return out


def all_param_arrays(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, (w, b) in enumerate(params.trunk):
        out.append((f"trunk{i}.w", w))
        out.append((f"trunk{i}.b", b))
    for i, h in enumerate(params.heads):
        for key in ("weight", "bias", "mean_sums", "mean_counts"):
            arr = getattr(h, key)
            if arr is not None:
                out.append((f"head{i}.{key}", arr))
    return out


@dataclass
class FiniteDiffResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int


def _ce_loss_all_heads(params: ModelParams, x, y, active_mask):
    cache = forward(params, x, train_mode=False)
    total = 0.0
    for head, lg in zip(params.heads, cache.logits):
        if head.kind == MEANLAYER:
            continue
        losses, _ = masked_softmax_ce(lg, y, active_mask)
        total += float(np.mean(losses))
    return total, cache


def finite_diff_check(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float = 1e-5,
    rng: np.random.Generator | None = None,
    n_coords: int = 64,
    active_mask: np.ndarray | None = None,
) -> FiniteDiffResult:
    """Central-difference check of ``backward`` on the summed head CE loss.

    Probes a random subset of trainable coordinates (>= n_coords when
    available), with dropout disabled. Trunk coordinates whose downstream
    layers contain a preactivation within 10*epsilon of a ReLU kink are
    skipped: a perturbation there may flip the kink and the two-sided
    difference stops being a derivative.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = rng or np.random.default_rng(0)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)

    base_loss, cache = _ce_loss_all_heads(params, x, y, active_mask)
    dlogits = []
    for head, lg in zip(params.heads, cache.logits):
        if head.kind == MEANLAYER:
            dlogits.append(None)
            continue
        _, dl = masked_softmax_ce(lg, y, active_mask)
        dlogits.append(dl / x.shape[0])
    grads = backward(params, cache, dlogits)
    analytic = {name: arr for name, arr in grads_by_name(params, grads)}

    # Perturbing a coordinate in trunk layer l moves that unit's own
    # preactivations and everything downstream. A coordinate is safe when
    # its own unit's preactivations stay clear of the kink and every
    # strictly-downstream layer does too.
    n_layers = len(params.trunk)
    unit_ok: list[np.ndarray] = []
    layer_all_ok = np.ones(n_layers, dtype=bool)
    for li in range(n_layers):
        scale = max(1.0, float(np.abs(cache.act[li - 1] if li > 0 else cache.x).max(initial=0.0)))
        ok = np.abs(cache.pre[li]).min(axis=0) >= 10.0 * epsilon * scale
        unit_ok.append(ok)
        layer_all_ok[li] = bool(ok.all())
    downstream_ok = np.ones(n_layers, dtype=bool)
    for li in range(n_layers - 2, -1, -1):
        downstream_ok[li] = downstream_ok[li + 1] and layer_all_ok[li + 1]

    arrays = trainable_arrays(params)
    coords = []
    for name, arr in arrays:
        for flat in range(arr.size):
            coords.append((name, arr, flat))
    order = rng.permutation(len(coords))

    checked = skipped = 0
    max_rel = 0.0
    for idx in order:
        if checked >= n_coords:
            break
        name, arr, flat = coords[idx]
        if name.startswith("trunk"):
            layer = int(name[5:].split(".")[0])
            row = flat // arr.shape[1] if arr.ndim == 2 else flat
            if not (unit_ok[layer][row] and downstream_ok[layer]):
                skipped += 1
                continue
        orig = arr.flat[flat]
        arr.flat[flat] = orig + epsilon
        lp, _ = _ce_loss_all_heads(params, x, y, active_mask)
        arr.flat[flat] = orig - epsilon
        lm, _ = _ce_loss_all_heads(params, x, y, active_mask)
        arr.flat[flat] = orig
        numeric = (lp - lm) / (2.0 * epsilon)
        an = analytic[name].flat[flat]
        rel = abs(an - numeric) / max(abs(an), abs(numeric), 1e-3)
        max_rel = max(max_rel, rel)
        checked += 1
    return FiniteDiffResult(max_rel_error=max_rel, n_checked=checked, n_skipped=skipped)


def grads_by_name(params: ModelParams, grads: Grads):
    if not params.trunk_frozen:
        for i, (gw, gb) in enumerate(grads.trunk):
            yield f"trunk{i}.w", gw
            yield f"trunk{i}.b", gb
    for i, (h, g) in enumerate(zip(params.heads, grads.heads)):
        if h.frozen or h.kind == MEANLAYER or not g:
            continue
        yield f"head{i}.weight", g["weight"]
        if h.kind == LINEAR:
            yield f"head{i}.bias", g["bias"]
