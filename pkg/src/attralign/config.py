"""Declarative run configuration: schema, validation, and dotted overrides.

A run config is a YAML key-value tree.  Validation is strict — unknown keys
are rejected and every message is qualified with the dotted path of the
offending field — so override typos fail loudly instead of silently
training the wrong thing.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .alignment import LossConfig, SamplingStrategy
from .attributes import AttributeKind
from .errors import ConfigError
from .synthetic import SyntheticDatasetConfig


@dataclass(frozen=True)
class CsvDatasetConfig:
    manifest: str
    descriptions: str
    dataset_tag: str
    features: str | None = None
    excluded_classes_file: str | None = None
    single_label_only: bool = True
    min_count: int = 100
    cap: int = 1500
    filter_seed: int = 0


@dataclass(frozen=True)
class BackboneConfig:
    audio: str = "affine"
    text: str = "hashing"
    classname_weight: float = 6.0


@dataclass(frozen=True)
class StageConfig:
    optimizer: str
    lr: float
    batch_size: int
    epochs: int
    schedule: str = "cosine"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass(frozen=True)
class SeedsConfig:
    split: int
    model: int
    sampling: int


@dataclass
class RunConfig:
    """Everything one experiment needs, resolved and validated."""

    dataset: SyntheticDatasetConfig | CsvDatasetConfig
    eval_fold: int
    seeds: SeedsConfig
    output_dir: str
    fold_k: int = 5
    fold_assignment_path: str | None = None
    backbones: BackboneConfig = field(default_factory=BackboneConfig)
    encoder_dim: int = 64
    proj_dim: int = 512
    loss: LossConfig = field(default_factory=LossConfig)
    sampling: SamplingStrategy = field(default_factory=SamplingStrategy)
    stage1: StageConfig = field(
        default_factory=lambda: StageConfig(optimizer="sgd", lr=0.1, batch_size=64, epochs=40)
    )
    stage2: StageConfig = field(
        default_factory=lambda: StageConfig(optimizer="adam", lr=1e-4, batch_size=256, epochs=20)
    )
    attribute_subset: tuple[AttributeKind, ...] | None = None
    confusion: bool = True

    def __post_init__(self):
        if not 0 <= self.eval_fold < self.fold_k:
            raise ValueError(f"eval_fold must lie in [0, {self.fold_k})")

    def sanitized_snapshot(self) -> dict:
        """Config as a plain dict with run-local paths removed.

        This is what gets embedded in checkpoints, reports, and the run
        manifest hash, so two runs differing only in output location are
        recognized as the same experiment.
        """
        raw = to_raw_dict(self)
        raw.pop("output_dir", None)
        return raw

    def config_hash(self) -> str:
        payload = json.dumps(self.sanitized_snapshot(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# raw-dict <-> dataclass plumbing --------------------------------------------------


def _check_keys(raw: Mapping, allowed: set[str], path: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(
            f"{path}.{sorted(unknown)[0]}" if path else sorted(unknown)[0],
            "unknown key",
        )


def _get(raw: Mapping, key: str, path: str, kind, default=..., required_type=None):
    if key not in raw:
        if default is ...:
            raise ConfigError(f"{path}.{key}" if path else key, "missing required key")
        return default
    value = raw[key]
    if value is None and default is None:
        return None  # explicit null is the same as an omitted optional key
    if required_type is not None and not isinstance(value, required_type):
        raise ConfigError(
            f"{path}.{key}" if path else key,
            f"expected {kind}, got {type(value).__name__}",
        )
    return value


def _int(raw, key, path, default=...):
    value = _get(raw, key, path, "integer", default)
    if value is default and default is not ...:
        return value
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}.{key}" if path else key, f"expected integer, got {value!r}")
    return value


def _num(raw, key, path, default=...):
    value = _get(raw, key, path, "number", default)
    if value is default and default is not ...:
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}.{key}" if path else key, f"expected number, got {value!r}")
    return float(value)


def _bool(raw, key, path, default=...):
    return _get(raw, key, path, "boolean", default, required_type=bool)


def _str(raw, key, path, default=...):
    return _get(raw, key, path, "string", default, required_type=str)


def _dataset_from_raw(raw: Mapping, path: str):
    kind = _str(raw, "kind", path)
    if kind == "synthetic":
        allowed = {
            "kind", "n_classes", "samples_per_class", "noise_sigma", "audio_dim",
            "text_dim", "include_definition", "attribute_noise", "collide_unseen_names",
            "collide_fraction", "classname_weight", "seed",
        }
        _check_keys(raw, allowed, path)
        try:
            return SyntheticDatasetConfig(
                n_classes=_int(raw, "n_classes", path, 50),
                samples_per_class=_int(raw, "samples_per_class", path, 100),
                noise_sigma=_num(raw, "noise_sigma", path, 0.3),
                audio_dim=_int(raw, "audio_dim", path, 64),
                text_dim=_int(raw, "text_dim", path, 256),
                include_definition=_bool(raw, "include_definition", path, False),
                attribute_noise=_num(raw, "attribute_noise", path, 0.0),
                collide_unseen_names=_bool(raw, "collide_unseen_names", path, False),
                collide_fraction=_num(raw, "collide_fraction", path, 0.5),
                classname_weight=_num(raw, "classname_weight", path, 6.0),
                seed=_int(raw, "seed", path, 7),
            )
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None
    if kind == "csv":
        allowed = {
            "kind", "manifest", "descriptions", "dataset_tag", "features",
            "excluded_classes_file", "single_label_only", "min_count", "cap", "filter_seed",
        }
        _check_keys(raw, allowed, path)
        return CsvDatasetConfig(
            manifest=_str(raw, "manifest", path),
            descriptions=_str(raw, "descriptions", path),
            dataset_tag=_str(raw, "dataset_tag", path),
            features=_str(raw, "features", path, None),
            excluded_classes_file=_str(raw, "excluded_classes_file", path, None),
            single_label_only=_bool(raw, "single_label_only", path, True),
            min_count=_int(raw, "min_count", path, 100),
            cap=_int(raw, "cap", path, 1500),
            filter_seed=_int(raw, "filter_seed", path, 0),
        )
    raise ConfigError(f"{path}.kind", f"must be 'synthetic' or 'csv', got {kind!r}")


def _stage_from_raw(raw: Mapping, path: str, defaults: StageConfig) -> StageConfig:
    allowed = {"optimizer", "lr", "batch_size", "epochs", "schedule"}
    _check_keys(raw, allowed, path)
    optimizer = _str(raw, "optimizer", path, defaults.optimizer)
    if optimizer not in ("sgd", "adam"):
        raise ConfigError(f"{path}.optimizer", f"must be 'sgd' or 'adam', got {optimizer!r}")
    schedule = _str(raw, "schedule", path, defaults.schedule)
    if schedule not in ("cosine", "constant"):
        raise ConfigError(f"{path}.schedule", f"must be 'cosine' or 'constant', got {schedule!r}")
    try:
        return StageConfig(
            optimizer=optimizer,
            lr=_num(raw, "lr", path, defaults.lr),
            batch_size=_int(raw, "batch_size", path, defaults.batch_size),
            epochs=_int(raw, "epochs", path, defaults.epochs),
            schedule=schedule,
        )
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


_TOP_KEYS = {
    "dataset", "fold", "eval_fold", "backbones", "encoder_dim", "proj_dim",
    "loss", "sampling", "stage1", "stage2", "attribute_subset", "seeds",
    "eval", "output_dir",
}


def from_raw_dict(raw: Mapping) -> RunConfig:
    """Build and validate a RunConfig; errors carry the offending dotted path."""
    if not isinstance(raw, Mapping):
        raise ConfigError("", "config root must be a mapping")
    _check_keys(raw, _TOP_KEYS, "")

    dataset_raw = _get(raw, "dataset", "", "mapping", required_type=Mapping)
    dataset = _dataset_from_raw(dataset_raw, "dataset")

    fold_raw = _get(raw, "fold", "", "mapping", {}, required_type=Mapping)
    _check_keys(fold_raw, {"k", "assignment_path"}, "fold")
    fold_k = _int(fold_raw, "k", "fold", 5)
    if fold_k < 2:
        raise ConfigError("fold.k", "must be >= 2")
    assignment_path = _str(fold_raw, "assignment_path", "fold", None)

    seeds_raw = _get(raw, "seeds", "", "mapping", required_type=Mapping)
    _check_keys(seeds_raw, {"split", "model", "sampling"}, "seeds")
    seeds = SeedsConfig(
        split=_int(seeds_raw, "split", "seeds"),
        model=_int(seeds_raw, "model", "seeds"),
        sampling=_int(seeds_raw, "sampling", "seeds"),
    )

    backbones_raw = _get(raw, "backbones", "", "mapping", {}, required_type=Mapping)
    _check_keys(backbones_raw, {"audio", "text", "classname_weight"}, "backbones")
    backbones = BackboneConfig(
        audio=_str(backbones_raw, "audio", "backbones", "affine"),
        text=_str(backbones_raw, "text", "backbones", "hashing"),
        classname_weight=_num(backbones_raw, "classname_weight", "backbones", 6.0),
    )

    loss_raw = _get(raw, "loss", "", "mapping", {}, required_type=Mapping)
    _check_keys(loss_raw, {"kind", "temperature", "margin"}, "loss")
    try:
        loss = LossConfig(
            kind=_str(loss_raw, "kind", "loss", "supcon"),
            temperature=_num(loss_raw, "temperature", "loss", 0.07),
            margin=_num(loss_raw, "margin", "loss", 1.0),
        )
    except ValueError as exc:
        raise ConfigError("loss", str(exc)) from None

    sampling_raw = _get(raw, "sampling", "", "mapping", {}, required_type=Mapping)
    _check_keys(sampling_raw, {"kind", "inclusion_probability"}, "sampling")
    try:
        sampling = SamplingStrategy(
            kind=_str(sampling_raw, "kind", "sampling", "with_class"),
            inclusion_probability=_num(sampling_raw, "inclusion_probability", "sampling", 0.5),
        )
    except ValueError as exc:
        raise ConfigError("sampling", str(exc)) from None

    stage1 = _stage_from_raw(
        _get(raw, "stage1", "", "mapping", {}, required_type=Mapping),
        "stage1",
        StageConfig(optimizer="sgd", lr=0.1, batch_size=64, epochs=40),
    )
    stage2 = _stage_from_raw(
        _get(raw, "stage2", "", "mapping", {}, required_type=Mapping),
        "stage2",
        StageConfig(optimizer="adam", lr=1e-4, batch_size=256, epochs=20),
    )

    subset_raw = raw.get("attribute_subset")
    subset: tuple[AttributeKind, ...] | None = None
    if subset_raw is not None:
        if not isinstance(subset_raw, (list, tuple)) or not subset_raw:
            raise ConfigError("attribute_subset", "must be null or a non-empty list of kinds")
        try:
            subset = tuple(AttributeKind(k) for k in subset_raw)
        except ValueError as exc:
            raise ConfigError("attribute_subset", str(exc)) from None

    eval_raw = _get(raw, "eval", "", "mapping", {}, required_type=Mapping)
    _check_keys(eval_raw, {"confusion"}, "eval")

    try:
        return RunConfig(
            dataset=dataset,
            eval_fold=_int(raw, "eval_fold", ""),
            seeds=seeds,
            output_dir=_str(raw, "output_dir", ""),
            fold_k=fold_k,
            fold_assignment_path=assignment_path,
            backbones=backbones,
            encoder_dim=_int(raw, "encoder_dim", "", 64),
            proj_dim=_int(raw, "proj_dim", "", 512),
            loss=loss,
            sampling=sampling,
            stage1=stage1,
            stage2=stage2,
            attribute_subset=subset,
            confusion=_bool(eval_raw, "confusion", "eval", True),
        )
    except ValueError as exc:
        raise ConfigError("eval_fold", str(exc)) from None


def to_raw_dict(config: RunConfig) -> dict:
    """Inverse of from_raw_dict, suitable for hashing and run manifests."""
    dataset: dict[str, Any] = asdict(config.dataset)
    dataset["kind"] = "synthetic" if isinstance(config.dataset, SyntheticDatasetConfig) else "csv"
    return {
        "dataset": dataset,
        "fold": {"k": config.fold_k, "assignment_path": config.fold_assignment_path},
        "eval_fold": config.eval_fold,
        "backbones": asdict(config.backbones),
        "encoder_dim": config.encoder_dim,
        "proj_dim": config.proj_dim,
        "loss": asdict(config.loss),
        "sampling": asdict(config.sampling),
        "stage1": asdict(config.stage1),
        "stage2": asdict(config.stage2),
        "attribute_subset": (
            [k.value for k in config.attribute_subset] if config.attribute_subset else None
        ),
        "seeds": asdict(config.seeds),
        "eval": {"confusion": config.confusion},
        "output_dir": config.output_dir,
    }


def apply_overrides(raw: dict, overrides: Mapping[str, str]) -> dict:
    """Apply dotted-key overrides, parsing values as YAML scalars.

    Intermediate keys must already exist as mappings; the final key may be
    new only where the schema accepts it (validation still runs afterwards).
    """
    result = copy.deepcopy(raw)
    for dotted, text in overrides.items():
        parts = dotted.split(".")
        node = result
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(dotted, "no such config section")
            node = node[part]
        if not isinstance(node, dict):
            raise ConfigError(dotted, "parent is not a mapping")
        try:
            node[parts[-1]] = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(dotted, f"unparseable value: {exc}") from None
    return result


def load_config(path: str | Path, overrides: Mapping[str, str] | None = None) -> tuple[RunConfig, dict]:
    """Read, override, and validate a config file.

    Returns the validated RunConfig plus the effective raw dict (overrides
    applied) for the run manifest.
    """
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from None
    if overrides:
        raw = apply_overrides(raw, overrides)
    config = from_raw_dict(raw)
    return config, to_raw_dict(config)
