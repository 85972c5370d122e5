"""Run configuration: one JSON file drives generation, training, the gap
protocol, and reporting. Validation errors name the offending field path."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace
from pathlib import Path

from .persist import ManifestError, load_manifest
from .scenario import SpuriousSpec, SynthSpec
from .training import METHODS, TrainerConfig


class ConfigError(ValueError):
    """Bad run configuration; the message names the field path."""


_SCENARIO_KEYS = {
    "source", "manifest", "n_tasks", "correlation_p", "support_s",
    "square_size", "seed", "synth", "cifar_train_paths", "cifar_test_paths",
    "fixed",
}
_TRAINER_KEYS = {
    "method", "epochs_per_task", "batch_size", "lr", "momentum",
    "penalty_weight", "penalty_warmup_epochs", "dro_eta", "ib_weight",
    "buffer_per_class", "dropout_rate", "pretrained_trunk", "hidden_dims",
}
_EVAL_KEYS = {"per_epoch", "protocol"}
_PROTOCOL_KEYS = {"n_tasks", "classes_per_task", "latent_dim", "epochs_per_task",
                  "batch_size", "lr", "momentum", "trunk", "scenario_spfv_dir"}
_GRID_KEYS = {"correlation_p", "method", "penalty_weight", "lr", "buffer_per_class", "ib_weight", "dro_eta"}
_TOP_KEYS = {"scenario", "trainer", "eval", "seeds", "grid", "out"}


@dataclass
class RunConfig:
    scenario_spec: SpuriousSpec
    manifest_path: str | None
    scenario_fixed: bool
    trainer: TrainerConfig
    per_epoch: bool
    protocol: dict
    seeds: list[int]
    grid: dict[str, list]
    out: str | None

    def grid_cells(self) -> list[dict]:
        """Cross product of the grid lists; empty grid -> one empty cell."""
        keys = sorted(self.grid)
        if not keys:
            return [{}]
        cells = []
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            cells.append(dict(zip(keys, combo)))
        return cells


def _reject_unknown(obj: dict, allowed: set, path: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown field '{where}'")


def _get(obj: dict, key: str, default, path: str, kind=None):
    val = obj.get(key, default)
    if kind is not None and val is not None:
        if kind is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
            raise ConfigError(f"field '{path}.{key}' must be {kind.__name__}, got {val!r}")
    return val


def parse_run_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    _reject_unknown(doc, _TOP_KEYS, "")
    base_dir = base_dir or Path(".")

    sc = doc.get("scenario", {})
    _reject_unknown(sc, _SCENARIO_KEYS, "scenario")
    manifest_path = sc.get("manifest")
    if manifest_path is not None:
        manifest_path = str((base_dir / manifest_path))
        try:
            spec = load_manifest(manifest_path)
        except FileNotFoundError:
            raise ConfigError(f"field 'scenario.manifest': file not found: {manifest_path}")
        except ManifestError as e:
            raise ConfigError(f"field 'scenario.manifest': {e}")
        fixed = True
    else:
        synth_doc = sc.get("synth") or {}
        _reject_unknown(synth_doc, {"dim", "modes_per_class", "mode_std", "mean_scale",
                                    "spurious_block", "spurious_magnitude", "n_train", "n_test"},
                        "scenario.synth")
        try:
            synth = SynthSpec(
                dim=_get(synth_doc, "dim", 20, "scenario.synth", int),
                modes_per_class=_get(synth_doc, "modes_per_class", 5, "scenario.synth", int),
                mode_std=_get(synth_doc, "mode_std", 1.0, "scenario.synth", float),
                mean_scale=_get(synth_doc, "mean_scale", 0.5, "scenario.synth", float),
                spurious_block=tuple(synth_doc.get("spurious_block", (0, 4))),
                spurious_magnitude=_get(synth_doc, "spurious_magnitude", 4.0, "scenario.synth", float),
                n_train=_get(synth_doc, "n_train", 1000, "scenario.synth", int),
                n_test=_get(synth_doc, "n_test", 1000, "scenario.synth", int),
            )
            spec = SpuriousSpec(
                n_tasks=_get(sc, "n_tasks", 10, "scenario", int),
                correlation_p=_get(sc, "correlation_p", 1.0, "scenario", float),
                support_s=_get(sc, "support_s", 1.0, "scenario", float),
                square_size=_get(sc, "square_size", 2, "scenario", int),
                seed=_get(sc, "seed", 0, "scenario", int),
                source=_get(sc, "source", "synth", "scenario", str),
                synth=synth,
                cifar_train_paths=tuple(sc.get("cifar_train_paths") or ()),
                cifar_test_paths=tuple(sc.get("cifar_test_paths") or ()),
            )
        except (ValueError, TypeError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"field 'scenario': {e}")
        fixed = bool(sc.get("fixed", False))

    tr = doc.get("trainer", {})
    _reject_unknown(tr, _TRAINER_KEYS, "trainer")
    hidden = tr.get("hidden_dims")
    default_epochs = 5 if spec.source == "cifar10" else 20
    try:
        trainer = TrainerConfig(
            method=_get(tr, "method", "finetune", "trainer", str),
            epochs_per_task=_get(tr, "epochs_per_task", default_epochs, "trainer", int),
            batch_size=_get(tr, "batch_size", 64, "trainer", int),
            lr=_get(tr, "lr", 0.01, "trainer", float),
            momentum=_get(tr, "momentum", 0.9, "trainer", float),
            penalty_weight=_get(tr, "penalty_weight", 1.0, "trainer", float),
            penalty_warmup_epochs=_get(tr, "penalty_warmup_epochs", 1, "trainer", int),
            dro_eta=_get(tr, "dro_eta", 1.0, "trainer", float),
            ib_weight=_get(tr, "ib_weight", 0.0, "trainer", float),
            buffer_per_class=_get(tr, "buffer_per_class", 100, "trainer", int),
            dropout_rate=_get(tr, "dropout_rate", 0.0, "trainer", float),
            pretrained_trunk=tr.get("pretrained_trunk"),
            hidden_dims=None if hidden is None else tuple(hidden),
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"field 'trainer': {e}")

    ev = doc.get("eval", {})
    _reject_unknown(ev, _EVAL_KEYS, "eval")
    protocol = ev.get("protocol") or {}
    _reject_unknown(protocol, _PROTOCOL_KEYS, "eval.protocol")

    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("field 'seeds' must be a non-empty list of integers")

    grid = doc.get("grid", {})
    _reject_unknown(grid, _GRID_KEYS, "grid")
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"field 'grid.{key}' must be a non-empty list")
        if key == "method":
            bad = [m for m in values if m not in METHODS]
            if bad:
                raise ConfigError(f"field 'grid.method' has unknown methods {bad}; valid: {', '.join(METHODS)}")

    return RunConfig(
        scenario_spec=spec,
        manifest_path=manifest_path,
        scenario_fixed=fixed,
        trainer=trainer,
        per_epoch=bool(ev.get("per_epoch", False)),
        protocol=protocol,
        seeds=list(seeds),
        grid={k: list(v) for k, v in grid.items()},
        out=doc.get("out"),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    return parse_run_config(doc, base_dir=path.parent)


def run_id_for(cell: dict, seed: int) -> str:
    parts = [f"{k}={cell[k]}" for k in sorted(cell)]
    parts.append(f"seed={seed}")
    return "_".join(parts).replace("/", "-")


def apply_cell(trainer: TrainerConfig, spec: SpuriousSpec, cell: dict, seed: int):
    """Specialize the base trainer/scenario for one grid cell and seed."""
    tr_kwargs = {k: v for k, v in cell.items() if k != "correlation_p"}
    trainer = replace(trainer, seed=seed, **tr_kwargs)
    if "correlation_p" in cell:
        spec = replace(spec, correlation_p=cell["correlation_p"])
    return trainer, spec
