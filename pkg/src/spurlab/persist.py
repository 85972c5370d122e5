"""Bit-exact file formats: SPFV feature files, scenario manifests,
model checkpoints, and run-record CSVs.

SPFV layout (all little-endian):

    magic  "SPFV"          4 bytes
    version u32 = 1
    n       u32
    dim     u32
    payload n * dim float32
    labels  n * u16
    task_ids n * u16       (0xFFFF encodes "no task", i.e. task_id -1)
    spurious n * u8

Total length is 16 + 4*n*dim + 2n + 2n + n bytes. Writers are pure
functions of their inputs; no timestamps live inside any payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import nn
from .scenario import FormatError, Sample, SpuriousSpec, SynthSpec

SPFV_MAGIC = b"SPFV"
SPFV_VERSION = 1
NO_TASK = 0xFFFF

CKPT_MAGIC = b"SPCK"
CKPT_VERSION = 1


class ManifestError(ValueError):
    """Raised for schema violations; the message names the field path."""


# --- SPFV ---

def write_spfv(samples: list[Sample]) -> bytes:
    if samples:
        dim = samples[0].flat_x().size
    else:
        dim = 0
    n = len(samples)
    if n >= 2 ** 32 or dim >= 2 ** 32:
        raise FormatError("n or dim does not fit in u32")
    xs = np.zeros((n, dim), dtype="<f4")
    labels = np.zeros(n, dtype="<u2")
    tasks = np.zeros(n, dtype="<u2")
    flags = np.zeros(n, dtype="u1")
    for i, s in enumerate(samples):
        x = s.flat_x()
        if x.size != dim:
            raise FormatError(f"sample {i} has dim {x.size} != {dim}")
        if not 0 <= s.y < 2 ** 16:
            raise FormatError(f"sample {i} label {s.y} does not fit in u16")
        if s.task_id != -1 and not 0 <= s.task_id < NO_TASK:
            raise FormatError(f"sample {i} task_id {s.task_id} does not fit in u16")
        xs[i] = x.astype(np.float32)
        labels[i] = s.y
        tasks[i] = NO_TASK if s.task_id == -1 else s.task_id
        flags[i] = 1 if s.spurious_present else 0
    header = SPFV_MAGIC + struct.pack("<III", SPFV_VERSION, n, dim)
    return header + xs.tobytes() + labels.tobytes() + tasks.tobytes() + flags.tobytes()


def read_spfv(data: bytes) -> list[Sample]:
    if len(data) < 16:
        raise FormatError(f"file too short ({len(data)} bytes) for the 16-byte header")
    if data[:4] != SPFV_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    version, n, dim = struct.unpack("<III", data[4:16])
    if version != SPFV_VERSION:
        raise FormatError(f"unsupported version {version}")
    expected = 16 + 4 * n * dim + 2 * n + 2 * n + n
    if len(data) != expected:
        raise FormatError(f"length {len(data)} != expected {expected} for n={n}, dim={dim}")
    off = 16
    xs = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    off += 4 * n * dim
    labels = np.frombuffer(data, dtype="<u2", count=n, offset=off)
    off += 2 * n
    tasks = np.frombuffer(data, dtype="<u2", count=n, offset=off)
    off += 2 * n
    flags = np.frombuffer(data, dtype="u1", count=n, offset=off)
    out = []
    for i in range(n):
        out.append(Sample(
            x=xs[i].copy(),
            y=int(labels[i]),
            mode_id=-1,
            spurious_present=bool(flags[i]),
            spurious_id=-1,
            task_id=-1 if tasks[i] == NO_TASK else int(tasks[i]),
        ))
    return out


def save_spfv(samples: list[Sample], path) -> None:
    Path(path).write_bytes(write_spfv(samples))


def load_spfv(path) -> list[Sample]:
    return read_spfv(Path(path).read_bytes())


# --- scenario manifest ---

_TOP_KEYS = {
    "seed", "n_tasks", "correlation_p", "support_s", "square_size",
    "colors", "source", "synth", "cifar_train_paths", "cifar_test_paths",
}
_SYNTH_KEYS = {
    "dim", "modes_per_class", "mode_std", "mean_scale", "spurious_block",
    "spurious_magnitude", "n_train", "n_test",
}


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise ManifestError(f"missing required field '{_join(path, key)}'")
    return obj[key]


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _reject_unknown(obj: dict, allowed: set, path: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ManifestError(f"unknown field '{_join(path, unknown[0])}'")


def write_manifest(spec: SpuriousSpec) -> str:
    doc = {
        "seed": spec.seed,
        "n_tasks": spec.n_tasks,
        "correlation_p": spec.correlation_p,
        "support_s": spec.support_s,
        "square_size": spec.square_size,
        "source": spec.source,
        "colors": None if spec.colors is None else np.asarray(spec.colors).tolist(),
        "synth": None if spec.synth is None else {
            "dim": spec.synth.dim,
            "modes_per_class": spec.synth.modes_per_class,
            "mode_std": spec.synth.mode_std,
            "mean_scale": spec.synth.mean_scale,
            "spurious_block": list(spec.synth.spurious_block),
            "spurious_magnitude": spec.synth.spurious_magnitude,
            "n_train": spec.synth.n_train,
            "n_test": spec.synth.n_test,
        },
        "cifar_train_paths": list(spec.cifar_train_paths),
        "cifar_test_paths": list(spec.cifar_test_paths),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def read_manifest(text: str) -> SpuriousSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ManifestError("manifest root must be an object")
    _reject_unknown(doc, _TOP_KEYS, "")
    seed = _check_int(_require(doc, "seed", ""), "seed")
    n_tasks = _check_int(_require(doc, "n_tasks", ""), "n_tasks")
    p = _check_num(_require(doc, "correlation_p", ""), "correlation_p")
    support = _check_num(_require(doc, "support_s", ""), "support_s")
    square = _check_int(_require(doc, "square_size", ""), "square_size")
    source = _require(doc, "source", "")
    if source not in ("synth", "cifar10"):
        raise ManifestError(f"field 'source' must be 'synth' or 'cifar10', got {source!r}")
    colors = doc.get("colors")
    colors_arr = None
    if colors is not None:
        arr = np.asarray(colors)
        if arr.shape != (n_tasks, 2, 3):
            raise ManifestError(f"field 'colors' must have shape [{n_tasks}][2][3], got {list(arr.shape)}")
        if arr.min() < 0 or arr.max() > 255:
            raise ManifestError("field 'colors' entries must be in 0..255")
        colors_arr = arr.astype(np.uint8)
    synth = doc.get("synth")
    synth_spec = None
    if synth is not None:
        if not isinstance(synth, dict):
            raise ManifestError("field 'synth' must be an object")
        _reject_unknown(synth, _SYNTH_KEYS, "synth")
        block = _require(synth, "spurious_block", "synth")
        if not (isinstance(block, list) and len(block) == 2):
            raise ManifestError("field 'synth.spurious_block' must be a [lo, hi] pair")
        synth_spec = SynthSpec(
            dim=_check_int(_require(synth, "dim", "synth"), "synth.dim"),
            modes_per_class=_check_int(_require(synth, "modes_per_class", "synth"), "synth.modes_per_class"),
            mode_std=_check_num(_require(synth, "mode_std", "synth"), "synth.mode_std"),
            mean_scale=_check_num(_require(synth, "mean_scale", "synth"), "synth.mean_scale"),
            spurious_block=(int(block[0]), int(block[1])),
            spurious_magnitude=_check_num(_require(synth, "spurious_magnitude", "synth"), "synth.spurious_magnitude"),
            n_train=_check_int(_require(synth, "n_train", "synth"), "synth.n_train"),
            n_test=_check_int(_require(synth, "n_test", "synth"), "synth.n_test"),
        )
    if source == "synth" and synth_spec is None:
        raise ManifestError("missing required field 'synth' for source 'synth'")
    try:
        return SpuriousSpec(
            n_tasks=n_tasks, correlation_p=p, support_s=support,
            square_size=square, seed=seed, source=source, synth=synth_spec,
            cifar_train_paths=tuple(doc.get("cifar_train_paths") or ()),
            cifar_test_paths=tuple(doc.get("cifar_test_paths") or ()),
            colors=colors_arr,
        )
    except ValueError as e:
        raise ManifestError(str(e)) from e


def _check_int(value, path: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ManifestError(f"field '{path}' must be an integer, got {value!r}")
    return value


def _check_num(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ManifestError(f"field '{path}' must be a number, got {value!r}")
    return float(value)


def save_manifest(spec: SpuriousSpec, path) -> None:
    Path(path).write_text(write_manifest(spec))


def load_manifest(path) -> SpuriousSpec:
    return read_manifest(Path(path).read_text())


# --- scenario directories (SPFV per task, as written by `generate`) ---

def load_scenario_dir(path):
    """Rebuild a scenario from materialized SPFV files: task_XX_train.spfv,
    task_XX_eval.spfv, clean_test.spfv. Samples come back as flat feature
    vectors; mode ids are not stored in SPFV and read back as -1."""
    from .scenario import Scenario, TaskData

    path = Path(path)
    train_files = sorted(path.glob("task_*_train.spfv"))
    if not train_files:
        raise FormatError(f"no task_*_train.spfv files under {path}")
    tasks = []
    for tf in train_files:
        task_id = int(tf.name.split("_")[1])
        train = load_spfv(tf)
        eval_file = path / f"task_{task_id:02d}_eval.spfv"
        heldout = load_spfv(eval_file) if eval_file.exists() else []
        for s in train + heldout:
            s.task_id = task_id
        classes = tuple(sorted({s.y for s in train}))
        tasks.append(TaskData(task_id=task_id, train=train, eval_spurious=heldout,
                              classes=classes, class_modes={},
                              feature_params=np.zeros((2, 0))))
    clean_file = path / "clean_test.spfv"
    clean = load_spfv(clean_file) if clean_file.exists() else []
    return Scenario(tasks=tasks, clean_test=clean, spec=None)


# --- model checkpoints ---

def write_checkpoint(params: nn.ModelParams, seed: int | None = None) -> bytes:
    """JSON header (shapes, kinds, frozen flags, seed) + float32 LE payload."""
    header = {
        "trunk_shapes": [[int(w.shape[0]), int(w.shape[1])] for w, _ in params.trunk],
        "trunk_frozen": params.trunk_frozen,
        "dropout_rate": params.dropout_rate,
        "seed": seed,
        "heads": [],
    }
    chunks: list[np.ndarray] = []
    for w, b in params.trunk:
        chunks.append(w.astype("<f4").ravel())
        chunks.append(b.astype("<f4").ravel())
    for h in params.heads:
        entry = {"kind": h.kind, "frozen": h.frozen}
        if h.frozen_rows is not None:
            entry["frozen_rows"] = [bool(v) for v in h.frozen_rows]
        if h.kind in (nn.LINEAR, nn.WEIGHTNORM):
            entry["n_classes"] = int(h.weight.shape[0])
            entry["latent_dim"] = int(h.weight.shape[1])
            chunks.append(h.weight.astype("<f4").ravel())
            if h.kind == nn.LINEAR:
                chunks.append(h.bias.astype("<f4").ravel())
        else:
            entry["n_classes"] = int(h.mean_sums.shape[0])
            entry["latent_dim"] = int(h.mean_sums.shape[1])
            chunks.append(h.mean_sums.astype("<f4").ravel())
            chunks.append(h.mean_counts.astype("<f4").ravel())
        header["heads"].append(entry)
    head_json = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = np.concatenate(chunks).astype("<f4").tobytes() if chunks else b""
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head_json)) + head_json + payload


def read_checkpoint(data: bytes) -> nn.ModelParams:
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode())
    payload = np.frombuffer(data, dtype="<f4", offset=12 + hlen).astype(np.float64)
    pos = 0

    def take(*shape) -> np.ndarray:
        nonlocal pos
        size = int(np.prod(shape))
        if pos + size > payload.size:
            raise FormatError("checkpoint payload shorter than header demands")
        out = payload[pos:pos + size].reshape(shape).copy()
        pos += size
        return out

    trunk = []
    for out_dim, in_dim in header["trunk_shapes"]:
        trunk.append((take(out_dim, in_dim), take(out_dim)))
    heads = []
    for entry in header["heads"]:
        n, h = entry["n_classes"], entry["latent_dim"]
        frozen_rows = None
        if "frozen_rows" in entry:
            frozen_rows = np.array(entry["frozen_rows"], dtype=bool)
        if entry["kind"] == nn.LINEAR:
            heads.append(nn.Head(kind=nn.LINEAR, weight=take(n, h), bias=take(n),
                                 frozen=entry["frozen"], frozen_rows=frozen_rows))
        elif entry["kind"] == nn.WEIGHTNORM:
            weight = take(n, h)
            nn.check_nonzero_rows(weight)
            heads.append(nn.Head(kind=nn.WEIGHTNORM, weight=weight,
                                 frozen=entry["frozen"], frozen_rows=frozen_rows))
        elif entry["kind"] == nn.MEANLAYER:
            heads.append(nn.Head(kind=nn.MEANLAYER, mean_sums=take(n, h), mean_counts=take(n),
                                 frozen=entry["frozen"], frozen_rows=frozen_rows))
        else:
            raise FormatError(f"unknown head kind {entry['kind']!r}")
    if pos != payload.size:
        raise FormatError("checkpoint payload longer than header demands")
    return nn.ModelParams(
        trunk=trunk, heads=heads,
        dropout_rate=header["dropout_rate"], trunk_frozen=header["trunk_frozen"],
    )


def save_checkpoint(params: nn.ModelParams, path, seed: int | None = None) -> None:
    Path(path).write_bytes(write_checkpoint(params, seed=seed))


def load_checkpoint(path) -> nn.ModelParams:
    return read_checkpoint(Path(path).read_bytes())
