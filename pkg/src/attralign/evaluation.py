"""Prototype-based zero-shot evaluation and single-axis ablation sweeps.

Inference builds one text prototype per held-out class from the full
attribute description (canonical order, all present kinds), scores each
test clip's encoder embedding against every prototype with the similarity
the model was trained under, and takes the argmax; exact ties break to the
lowest class id.  The ablation harness re-runs the two-stage pipeline over
config deltas that vary exactly one axis, sharing seeds across variants.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .alignment import (
    BilinearParams,
    ProjectionHeads,
    bilinear_similarity_matrix,
    cosine_similarity_matrix,
)
from .attributes import AttributeKind, DescriptionStore, render_description
from .config import RunConfig, apply_overrides, from_raw_dict, to_raw_dict
from .encoders import TextEncoder
from .errors import ConfigError, FoldError
from .serialization import Checkpoint
from .training import (
    RunContext,
    load_stage2_model,
    prepare_run,
    stage1_fingerprint,
    train_stage1,
    train_stage2,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassPrototype:
    """Text-side anchor of one class: the full-description embedding."""

    class_id: str
    embedding: np.ndarray


def build_prototypes(
    classes: Sequence[str],
    store: DescriptionStore,
    text_encoder: TextEncoder,
    subset: Iterable[AttributeKind] | None = None,
) -> list[ClassPrototype]:
    """One prototype per class, deterministic, sorted by class id."""
    prototypes = []
    for class_id in sorted(classes):
        desc = store.get(class_id)
        if subset is not None:
            desc = desc.restricted(subset)
        text = render_description(desc, desc.present_kinds())
        prototypes.append(ClassPrototype(class_id=class_id, embedding=text_encoder.encode(text)))
    return prototypes


def similarity_to_prototypes(
    audio_embeddings: np.ndarray,
    prototypes: Sequence[ClassPrototype],
    model: ProjectionHeads | BilinearParams,
) -> np.ndarray:
    """(N, C) similarity matrix under the model's own similarity function."""
    text = np.stack([p.embedding for p in prototypes])
    audio_embeddings = np.atleast_2d(np.asarray(audio_embeddings, dtype=np.float64))
    if isinstance(model, ProjectionHeads):
        return cosine_similarity_matrix(audio_embeddings, text, model)
    return bilinear_similarity_matrix(audio_embeddings, text, model)


def classify(
    audio_embedding: np.ndarray,
    prototypes: Sequence[ClassPrototype],
    model: ProjectionHeads | BilinearParams,
) -> str:
    """argmax over prototype similarities; ties break to the lowest class id."""
    return classify_batch(np.atleast_2d(audio_embedding), prototypes, model)[0]


def classify_batch(
    audio_embeddings: np.ndarray,
    prototypes: Sequence[ClassPrototype],
    model: ProjectionHeads | BilinearParams,
) -> list[str]:
    if not prototypes:
        raise ValueError("prototype list is empty")
    sims = similarity_to_prototypes(audio_embeddings, prototypes, model)
    ids = [p.class_id for p in prototypes]
    out = []
    for row in sims:
        best = np.flatnonzero(row == row.max())
        out.append(min(ids[i] for i in best))
    return out


@dataclass
class EvalReport:
    """Zero-shot accuracy per fold plus the reproducibility context."""

    accuracy_by_fold: dict[str, float]
    seeds: dict
    config: dict
    n_samples: int
    confusion: dict[str, dict[str, int]] | None = None
    per_seed: list[float] | None = None
    std: float | None = None

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy_by_fold.values())))

    def to_payload(self) -> dict:
        payload = {
            "accuracy_by_fold": self.accuracy_by_fold,
            "mean_accuracy": self.mean_accuracy,
            "seeds": self.seeds,
            "config": self.config,
            "n_samples": self.n_samples,
        }
        if self.confusion is not None:
            payload["confusion"] = self.confusion
        if self.per_seed is not None:
            payload["per_seed"] = self.per_seed
            payload["std"] = self.std
        return payload

    def to_json(self) -> str:
        return json.dumps(self.to_payload(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        return cls(
            accuracy_by_fold=data["accuracy_by_fold"],
            seeds=data["seeds"],
            config=data["config"],
            n_samples=data["n_samples"],
            confusion=data.get("confusion"),
            per_seed=data.get("per_seed"),
            std=data.get("std"),
        )


def evaluate_fold(ctx: RunContext, checkpoint: Checkpoint) -> EvalReport:
    """Accuracy of the checkpointed model on the held-out fold.

    The checkpoint must have been trained with this exact eval fold held
    out; the embedded config snapshot is the audit trail.
    """
    config = ctx.config
    if checkpoint.config.get("eval_fold") != config.eval_fold:
        raise FoldError(
            f"checkpoint was trained with eval_fold={checkpoint.config.get('eval_fold')}, "
            f"requested {config.eval_fold}"
        )
    provider = ctx.provider
    if provider is None:
        raise ConfigError("dataset.features", "evaluation needs clip features")
    encoder, model = load_stage2_model(checkpoint, config, provider.input_dim)
    prototypes = build_prototypes(
        ctx.test_view.class_ids, ctx.store, ctx.text_encoder, subset=config.attribute_subset
    )
    records = ctx.test_view.records
    confusion: dict[str, dict[str, int]] | None = {} if config.confusion else None
    hits = 0
    for start in range(0, len(records), 512):
        chunk = records[start : start + 512]
        embeddings = encoder.encode(provider.batch(chunk))
        preds = classify_batch(embeddings, prototypes, model)
        for record, pred in zip(chunk, preds):
            if pred == record.class_id:
                hits += 1
            if confusion is not None:
                row = confusion.setdefault(record.class_id, {})
                row[pred] = row.get(pred, 0) + 1
    accuracy = hits / len(records)
    return EvalReport(
        accuracy_by_fold={str(config.eval_fold): accuracy},
        seeds={"split": config.seeds.split, "model": config.seeds.model, "sampling": config.seeds.sampling},
        config=config.sanitized_snapshot(),
        n_samples=len(records),
        confusion=confusion,
    )


def run_pipeline(config: RunConfig, out_dir: str | Path | None = None) -> tuple[RunContext, Checkpoint, Checkpoint]:
    """Convenience: prepare, stage 1, stage 2."""
    ctx = prepare_run(config)
    stage1 = train_stage1(ctx, out_dir=out_dir)
    stage2 = train_stage2(ctx, stage1, out_dir=out_dir)
    return ctx, stage1, stage2


# Ablation ----------------------------------------------------------------------


_AXES = {
    "attribute_subset": "attributes",
    "sampling": "strategy",
    "loss": "loss",
    "backbones": "backbone",
    "encoder_dim": "backbone",
    "proj_dim": "backbone",
}


def _axis_of(overrides: dict) -> str:
    axes = set()
    for dotted in overrides:
        root = dotted.split(".", 1)[0]
        if root not in _AXES:
            raise ConfigError(dotted, "not an ablatable key")
        axes.add(_AXES[root])
    if len(axes) != 1:
        raise ConfigError(
            ",".join(sorted(overrides)), f"variant must vary exactly one axis, got {sorted(axes)}"
        )
    return axes.pop()


@dataclass(frozen=True)
class AblationVariant:
    name: str
    overrides: dict[str, str]


@dataclass
class AblationRow:
    variant: str
    mean_accuracy: float
    std: float
    per_seed: list[float]


@dataclass
class AblationReport:
    axis: str
    rows: list[AblationRow]
    seeds: list[int]
    base_config: dict

    def to_payload(self) -> dict:
        return {
            "axis": self.axis,
            "seeds": self.seeds,
            "base_config": self.base_config,
            "rows": [
                {
                    "variant": r.variant,
                    "mean_accuracy": r.mean_accuracy,
                    "std": r.std,
                    "per_seed": r.per_seed,
                }
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_payload(), sort_keys=True, indent=2) + "\n"


def run_ablation(
    base_raw: dict,
    variants: Sequence[AblationVariant],
    seeds: Sequence[int],
    out_dir: str | Path | None = None,
) -> AblationReport:
    """Train and evaluate every variant under every shared seed.

    Each variant's overrides must vary exactly one axis (attribute set,
    sampling strategy, loss, or backbone) relative to the base config; the
    seed list replaces the model and sampling seeds so all variants see the
    same randomness.  Stage-1 checkpoints are reused across variants that
    share a stage-1 fingerprint.
    """
    if not variants:
        raise ConfigError("variants", "ablation needs at least one variant")
    axes = {_axis_of(v.overrides) for v in variants if v.overrides}
    if len(axes) > 1:
        raise ConfigError("variants", f"suite mixes axes {sorted(axes)}")
    axis = axes.pop() if axes else "base"

    stage1_cache: dict[str, Checkpoint] = {}
    ctx_cache: dict[str, RunContext] = {}
    rows = []
    for variant in variants:
        per_seed = []
        for seed in seeds:
            raw = apply_overrides(base_raw, variant.overrides)
            raw = apply_overrides(
                raw, {"seeds.model": str(seed), "seeds.sampling": str(seed)}
            )
            config = from_raw_dict(raw)
            ctx_key = json.dumps(
                {k: to_raw_dict(config)[k] for k in ("dataset", "fold", "eval_fold", "backbones")},
                sort_keys=True,
            ) + f"|split={config.seeds.split}"
            if ctx_key not in ctx_cache:
                ctx_cache[ctx_key] = prepare_run(config)
            ctx = replace(ctx_cache[ctx_key], config=config)
            fp_key = json.dumps(stage1_fingerprint(config.sanitized_snapshot()), sort_keys=True)
            if fp_key not in stage1_cache:
                stage1_cache[fp_key] = train_stage1(ctx)
            stage2 = train_stage2(ctx, stage1_cache[fp_key])
            report = evaluate_fold(ctx, stage2)
            per_seed.append(report.mean_accuracy)
            logger.info(
                "ablation %s seed %d: accuracy %.4f", variant.name, seed, report.mean_accuracy
            )
        rows.append(
            AblationRow(
                variant=variant.name,
                mean_accuracy=float(np.mean(per_seed)),
                std=float(np.std(per_seed)),
                per_seed=[float(a) for a in per_seed],
            )
        )

    base_config = dict(base_raw)
    base_config.pop("output_dir", None)
    report = AblationReport(axis=axis, rows=rows, seeds=[int(s) for s in seeds], base_config=base_config)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(report.to_json(), encoding="utf-8")
    return report
