"""Task-stream generators with controllable shortcut features.

Two sources feed the same scenario shape:

* CIFAR-10 binary files, binarized into transport-vs-rest, with a small
  colored square stamped onto a controllable fraction of each task's
  images (fresh per-task colors);
* a synthetic Gaussian-mode generator where each binary class owns a set
  of modes and the shortcut is an additive task-and-class-specific
  pattern on a fixed block of dimensions.

Everything is a pure function of (spec, seed); tasks derive independent
sub-streams so the construction order never matters.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

CIFAR_RECORD_BYTES = 3073
CIFAR_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
# transport-vs-rest binarization over the standard class ordering
TRANSPORT_MODES = (0, 1, 7, 8, 9)
OTHER_MODES = (2, 3, 4, 5, 6)


class FormatError(ValueError):
    """Raised for malformed binary inputs."""


@dataclass
class Sample:
    x: np.ndarray              # (dim,) vector or (H, W, 3) image in [0, 1]
    y: int                     # class label
    mode_id: int               # originating mode (original 10-way class); -1 unknown
    spurious_present: bool = False
    spurious_id: int = -1      # task_id * n_classes + y of the injected feature
    task_id: int = -1          # -1 means "not task-bound" (clean test)

    def flat_x(self) -> np.ndarray:
        return np.asarray(self.x, dtype=np.float64).reshape(-1)


@dataclass
class SynthSpec:
    dim: int = 20
    modes_per_class: int = 5
    mode_std: float = 1.0
    # 0.5 keeps the binary content real but slow to learn, so the additive
    # shortcut (magnitude 4) dominates training whenever it is present
    mean_scale: float = 0.5
    spurious_block: tuple[int, int] = (0, 4)   # half-open index range
    spurious_magnitude: float = 4.0
    n_train: int = 1000
    n_test: int = 1000
    mode_means: np.ndarray | None = None       # (2 * modes_per_class, dim)

    def __post_init__(self):
        if self.mode_std <= 0:
            raise ValueError("mode_std must be positive")
        lo, hi = self.spurious_block
        if not (0 <= lo < hi <= self.dim):
            raise ValueError(f"spurious_block {self.spurious_block} out of range for dim {self.dim}")


@dataclass
class SpuriousSpec:
    n_tasks: int = 10
    correlation_p: float = 1.0
    support_s: float = 1.0
    square_size: int = 2
    seed: int = 0
    source: str = "synth"                      # "synth" | "cifar10"
    synth: SynthSpec | None = None
    cifar_train_paths: tuple[str, ...] = ()
    cifar_test_paths: tuple[str, ...] = ()
    colors: np.ndarray | None = None           # (n_tasks, 2, 3) uint8

    def __post_init__(self):
        if not 0.0 <= self.correlation_p <= 1.0:
            raise ValueError(f"correlation_p must be in [0, 1], got {self.correlation_p}")
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        if self.source not in ("synth", "cifar10"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == "synth" and self.synth is None:
            self.synth = SynthSpec()


@dataclass
class TaskData:
    task_id: int
    train: list[Sample]
    eval_spurious: list[Sample]
    classes: tuple[int, ...]
    class_modes: dict[int, tuple[int, ...]]    # realized support per class
    feature_params: np.ndarray                 # (2, 3) colors or (2, block) patterns


@dataclass
class Scenario:
    tasks: list[TaskData]
    clean_test: list[Sample]
    spec: SpuriousSpec | None = None
    synth_mode_means: np.ndarray | None = None

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def input_dim(self) -> int:
        return self.tasks[0].train[0].flat_x().size

    @property
    def n_classes(self) -> int:
        return max(s.y for t in self.tasks for s in t.train) + 1


def subrng(seed: int, *key: int) -> np.random.Generator:
    """Independent sub-stream: same (seed, key) always gives the same stream."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


# --- CIFAR-10 binary ingestion ---

def read_cifar10_batch(data: bytes) -> list[tuple[int, np.ndarray]]:
    """Parse 3073-byte records: 1 label byte + 3072 channel-planar pixels.

    Pixels come back as a (32, 32, 3) float32 image scaled to [0, 1].
    """
    if len(data) % CIFAR_RECORD_BYTES != 0:
        raise FormatError(f"byte length {len(data)} is not a multiple of {CIFAR_RECORD_BYTES}")
    n = len(data) // CIFAR_RECORD_BYTES
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = raw[:, 0]
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"record {bad} has label byte {labels[bad]} > 9")
    pixels = raw[:, 1:].reshape(n, 3, 32, 32).transpose(0, 2, 3, 1)
    images = pixels.astype(np.float32) / 255.0
    return [(int(labels[i]), images[i]) for i in range(n)]


def binarize_label(class_id: int) -> int:
    """1 for transportation means, 0 otherwise."""
    if not 0 <= class_id <= 9:
        raise ValueError(f"class_id {class_id} out of range 0..9")
    return 1 if class_id in TRANSPORT_MODES else 0


def inject_square(image: np.ndarray, color: tuple[int, int, int], pos: tuple[int, int], size: int = 2) -> np.ndarray:
    """Return a copy with a size x size square of ``color`` at ``pos``."""
    image = np.asarray(image)
    row, col = pos
    h, w = image.shape[0], image.shape[1]
    if row < 0 or col < 0 or row + size > h or col + size > w:
        raise ValueError(f"square of size {size} at {pos} does not fit a {h}x{w} image")
    out = image.copy()
    out[row:row + size, col:col + size, :] = np.asarray(color, dtype=np.float32) / 255.0
    return out


def sample_support(support_s: float, modes_per_class: int, rng: np.random.Generator) -> dict[int, tuple[int, ...]]:
    """Uniform subset of mode slots per binary class; slot count = s * modes."""
    k = support_s * modes_per_class
    if abs(k - round(k)) > 1e-9:
        raise ValueError(f"support_s * modes_per_class = {k} is not an integer")
    k = int(round(k))
    if k < 1:
        raise ValueError("support must keep at least one mode per class")
    out = {}
    for cls in (0, 1):
        slots = rng.choice(modes_per_class, size=k, replace=False)
        out[cls] = tuple(sorted(int(s) for s in slots))
    return out


def draw_task_colors(n_tasks: int, rng: np.random.Generator) -> np.ndarray:
    """Per-task, per-class colors: the two colors of a task differ by >= 64
    (max channel), and a class's color stays >= 32 away from the same
    class's colors in every earlier task."""
    colors = np.zeros((n_tasks, 2, 3), dtype=np.uint8)
    for t in range(n_tasks):
        while True:
            cand = rng.integers(0, 256, size=(2, 3), dtype=np.uint8)
            if _linf(cand[0], cand[1]) < 64:
                continue
            ok = all(
                _linf(cand[c], colors[u, c]) >= 32
                for c in (0, 1) for u in range(t)
            )
            if ok:
                colors[t] = cand
                break
    return colors


def _linf(a, b) -> int:
    return int(np.max(np.abs(a.astype(np.int64) - b.astype(np.int64))))


# --- synthetic Gaussian-mode generator ---

def synth_mode_means(spec: SynthSpec, seed: int) -> np.ndarray:
    """One mean per mode, drawn once; modes m // modes_per_class = class."""
    if spec.mode_means is not None:
        return np.asarray(spec.mode_means, dtype=np.float64)
    rng = subrng(seed, 0)
    return spec.mean_scale * rng.standard_normal((2 * spec.modes_per_class, spec.dim))


def synth_patterns(spec: SynthSpec, n_tasks: int, seed: int) -> np.ndarray:
    """Task-and-class-specific additive patterns on the shortcut block,
    each scaled to the configured magnitude."""
    lo, hi = spec.spurious_block
    rng = subrng(seed, 1)
    raw = rng.standard_normal((n_tasks, 2, hi - lo))
    raw /= np.linalg.norm(raw, axis=2, keepdims=True)
    return spec.spurious_magnitude * raw


def synth_sample(
    spec: SynthSpec,
    means: np.ndarray,
    y: int,
    task_id: int,
    support_slots: tuple[int, ...],
    rng: np.random.Generator,
    spurious_pattern: np.ndarray | None = None,
) -> Sample:
    """Draw one sample: a supported mode mean of class y plus Gaussian noise,
    optionally shifted by the task's class pattern on the shortcut block."""
    if y not in (0, 1):
        raise ValueError(f"binary label expected, got {y}")
    slot = int(rng.choice(np.asarray(support_slots)))
    mode = y * spec.modes_per_class + slot
    x = means[mode] + spec.mode_std * rng.standard_normal(spec.dim)
    spurious = spurious_pattern is not None
    if spurious:
        lo, hi = spec.spurious_block
        x = x.copy()
        x[lo:hi] += spurious_pattern
    return Sample(
        x=x, y=y, mode_id=mode,
        spurious_present=spurious,
        spurious_id=(task_id * 2 + y) if spurious else -1,
        task_id=task_id,
    )


def _mark_spurious(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Exactly floor(p * n) marked indices, uniform without replacement."""
    k = int(np.floor(p * n))
    flags = np.zeros(n, dtype=bool)
    if k:
        flags[rng.choice(n, size=k, replace=False)] = True
    return flags


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    ys = np.zeros(n, dtype=np.int64)
    ys[n // 2:] = 1
    return rng.permutation(ys)


def build_synth_task(spec: SpuriousSpec, means: np.ndarray, patterns: np.ndarray, task_id: int) -> TaskData:
    sspec = spec.synth
    rng = subrng(spec.seed, 2, task_id)
    support = sample_support(spec.support_s, sspec.modes_per_class, rng)

    def draw_split(n: int) -> list[Sample]:
        ys = _balanced_labels(n, rng)
        flags = _mark_spurious(n, spec.correlation_p, rng)
        out = []
        for y, f in zip(ys, flags):
            pat = patterns[task_id, y] if f else None
            out.append(synth_sample(sspec, means, int(y), task_id, support[int(y)], rng, pat))
        return out

    train = draw_split(sspec.n_train)
    eval_spurious = draw_split(sspec.n_test)
    class_modes = {c: tuple(c * sspec.modes_per_class + s for s in slots) for c, slots in support.items()}
    return TaskData(
        task_id=task_id, train=train, eval_spurious=eval_spurious,
        classes=(0, 1), class_modes=class_modes,
        feature_params=patterns[task_id].copy(),
    )


def build_synth_clean_test(spec: SpuriousSpec, means: np.ndarray) -> list[Sample]:
    sspec = spec.synth
    rng = subrng(spec.seed, 3)
    ys = _balanced_labels(sspec.n_test, rng)
    all_slots = tuple(range(sspec.modes_per_class))
    out = []
    for y in ys:
        s = synth_sample(sspec, means, int(y), -1, all_slots, rng, None)
        s.task_id = -1
        out.append(s)
    return out


# --- CIFAR source pools ---

@dataclass
class CifarSource:
    train_by_mode: dict[int, np.ndarray]   # mode -> (n, 32, 32, 3) float32
    eval_by_mode: dict[int, np.ndarray]
    test: list[tuple[int, np.ndarray]]     # (mode, image)


def load_cifar_source(spec: SpuriousSpec) -> CifarSource:
    """Read the binary batches and split train 90/10 per mode, seeded."""
    if not spec.cifar_train_paths:
        raise ValueError("cifar10 source needs cifar_train_paths")
    records: list[tuple[int, np.ndarray]] = []
    for path in spec.cifar_train_paths:
        with open(path, "rb") as fh:
            records.extend(read_cifar10_batch(fh.read()))
    test: list[tuple[int, np.ndarray]] = []
    for path in spec.cifar_test_paths:
        with open(path, "rb") as fh:
            test.extend(read_cifar10_batch(fh.read()))
    rng = subrng(spec.seed, 4)
    train_by_mode: dict[int, np.ndarray] = {}
    eval_by_mode: dict[int, np.ndarray] = {}
    for mode in range(10):
        imgs = [img for lab, img in records if lab == mode]
        if not imgs:
            continue
        stack = np.stack(imgs)
        stack.flags.writeable = False
        order = rng.permutation(len(imgs))
        n_eval = max(1, len(imgs) // 10)
        eval_by_mode[mode] = stack[order[:n_eval]]
        train_by_mode[mode] = stack[order[n_eval:]]
    return CifarSource(train_by_mode=train_by_mode, eval_by_mode=eval_by_mode, test=test)


def build_cifar_task(spec: SpuriousSpec, source: CifarSource, colors: np.ndarray, task_id: int) -> TaskData:
    rng = subrng(spec.seed, 2, task_id)
    support = sample_support(spec.support_s, 5, rng)
    class_modes = {
        0: tuple(OTHER_MODES[s] for s in support[0]),
        1: tuple(TRANSPORT_MODES[s] for s in support[1]),
    }

    def build_split(by_mode: dict[int, np.ndarray]) -> list[Sample]:
        pool: list[tuple[int, np.ndarray]] = []
        for cls in (0, 1):
            for mode in class_modes[cls]:
                for img in by_mode.get(mode, ()):
                    pool.append((mode, img))
        if not pool:
            raise ValueError(f"task {task_id}: no source images for support {class_modes}")
        flags = _mark_spurious(len(pool), spec.correlation_p, rng)
        out = []
        for (mode, img), f in zip(pool, flags):
            y = binarize_label(mode)
            if f:
                row = int(rng.integers(0, img.shape[0] - spec.square_size + 1))
                col = int(rng.integers(0, img.shape[1] - spec.square_size + 1))
                img = inject_square(img, tuple(colors[task_id, y]), (row, col), spec.square_size)
            out.append(Sample(
                x=img, y=y, mode_id=mode,
                spurious_present=bool(f),
                spurious_id=(task_id * 2 + y) if f else -1,
                task_id=task_id,
            ))
        return out

    return TaskData(
        task_id=task_id,
        train=build_split(source.train_by_mode),
        eval_spurious=build_split(source.eval_by_mode),
        classes=(0, 1), class_modes=class_modes,
        feature_params=colors[task_id].copy(),
    )


def build_scenario(spec: SpuriousSpec, source: CifarSource | None = None) -> Scenario:
    """Materialize the full task stream plus the shortcut-free test set.

    Deterministic: the same spec (same seed) rebuilds an identical scenario.
    """
    if spec.source == "synth":
        means = synth_mode_means(spec.synth, spec.seed)
        patterns = synth_patterns(spec.synth, spec.n_tasks, spec.seed)
        tasks = [build_synth_task(spec, means, patterns, t) for t in range(spec.n_tasks)]
        clean = build_synth_clean_test(spec, means)
        return Scenario(tasks=tasks, clean_test=clean, spec=spec, synth_mode_means=means)

    source = source or load_cifar_source(spec)
    colors = spec.colors
    if colors is None:
        colors = draw_task_colors(spec.n_tasks, subrng(spec.seed, 1))
    spec = replace(spec, colors=colors)
    tasks = [build_cifar_task(spec, source, colors, t) for t in range(spec.n_tasks)]
    clean = [
        Sample(x=img, y=binarize_label(mode), mode_id=mode, task_id=-1)
        for mode, img in source.test
    ]
    return Scenario(tasks=tasks, clean_test=clean, spec=spec)


def build_class_incremental_scenario(
    sspec: SynthSpec,
    n_tasks: int,
    seed: int,
    classes_per_task: int = 2,
) -> Scenario:
    """Disjoint-class task stream over the raw modes (no shortcut injection):
    the Gaussian modes themselves are the classes, split across tasks."""
    n_classes = 2 * sspec.modes_per_class
    if n_tasks * classes_per_task != n_classes:
        raise ValueError(f"{n_tasks} tasks x {classes_per_task} classes != {n_classes} modes")
    means = synth_mode_means(sspec, seed)
    tasks = []
    clean_test: list[Sample] = []
    for t in range(n_tasks):
        rng = subrng(seed, 2, t)
        classes = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))

        def draw(n: int, rng=rng, classes=classes, task=t) -> list[Sample]:
            out = []
            for i in range(n):
                c = classes[i % len(classes)]
                x = means[c] + sspec.mode_std * rng.standard_normal(sspec.dim)
                out.append(Sample(x=x, y=c, mode_id=c, task_id=task))
            return out

        train = draw(sspec.n_train)
        heldout = draw(sspec.n_test)
        tasks.append(TaskData(
            task_id=t, train=train, eval_spurious=heldout,
            classes=classes,
            class_modes={c: (c,) for c in classes},
            feature_params=np.zeros((2, 0)),
        ))
        clean_test.extend(heldout)
    return Scenario(tasks=tasks, clean_test=clean_test, spec=None, synth_mode_means=means)


# --- dense views for training ---

def stack_xy(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.flat_x() for s in samples])
    y = np.array([s.y for s in samples], dtype=np.int64)
    return X, y
