"""Two-stage training: classification pretraining, then audio-text alignment.

Stage 1 trains the audio encoder from scratch with a cross-entropy
classification head over the seen (non-eval-fold) classes; the head is
discarded afterwards.  Stage 2 loads the pretrained encoder and aligns it
with the frozen text encoder: ranking loss over bilinear similarities, or
supervised-contrastive loss over projected cosines, with the configured
attribute-sampling strategy redrawing descriptions every step.

Everything is driven by three explicit seeds (split, model, sampling) and
plain-numpy math, so two runs with identical configs produce byte-identical
checkpoints; the eval fold's samples and descriptions are never touched by
either stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .alignment import (
    BilinearParams,
    LossConfig,
    ProjectionHeads,
    SamplingStrategy,
    encode_batch_descriptions,
    ranking_forward_backward,
    supcon_forward_backward,
)
from .attributes import DescriptionStore, render_description
from .config import CsvDatasetConfig, RunConfig
from .datasets import (
    DatasetManifest,
    DatasetView,
    FilterRules,
    FoldAssignment,
    filter_dataset,
    load_excluded_classes,
    make_run_views,
    split_folds,
)
from .encoders import AffineAudioEncoder, HashingTextEncoder, TextEncoder, create_audio_encoder
from .errors import AttralignError, CheckpointError, ConfigError, FoldError
from .optim import AdamOptimizer, LrSchedule, make_optimizer
from .serialization import Checkpoint, load_checkpoint, save_checkpoint
from .synthetic import (
    Corpus,
    FeatureProvider,
    NpzFeatureProvider,
    SyntheticDatasetConfig,
    build_synthetic_corpus,
)

logger = logging.getLogger(__name__)


@dataclass
class RunContext:
    """A validated config bound to its data: views, features, encoders."""

    config: RunConfig
    manifest: DatasetManifest
    store: DescriptionStore
    provider: FeatureProvider | None
    text_encoder: TextEncoder
    assignment: FoldAssignment
    train_view: DatasetView
    test_view: DatasetView
    class_names: dict[str, str]

    def with_wrappers(self, store=None, provider=None) -> "RunContext":
        """Swap in instrumented store/provider (used by the hygiene audit)."""
        return replace(self, store=store or self.store, provider=provider or self.provider)


def build_text_encoder_for_store(
    store: DescriptionStore, text_dim: int, classname_weight: float
) -> HashingTextEncoder:
    """Hashing encoder whose dominant vocabulary is the distinctly name-like tokens."""
    from .attributes import AttributeKind

    attr_tokens: set[str] = set()
    name_tokens: set[str] = set()
    for _, desc in store.items():
        for kind, text in desc.attributes.items():
            tokens = HashingTextEncoder.tokenize(text)
            if kind is AttributeKind.CLASS_NAME:
                name_tokens.update(tokens)
            else:
                attr_tokens.update(tokens)
    return HashingTextEncoder(
        output_dim=text_dim,
        classname_vocab=frozenset(name_tokens - attr_tokens),
        classname_weight=classname_weight,
    )


def prepare_run(config: RunConfig) -> RunContext:
    """Materialize the corpus and fold views for one run."""
    if isinstance(config.dataset, SyntheticDatasetConfig):
        corpus = build_synthetic_corpus(
            config.dataset,
            split_seed=config.seeds.split,
            k=config.fold_k,
            eval_fold=config.eval_fold,
        )
        manifest, store = corpus.manifest, corpus.store
        provider: FeatureProvider | None = corpus.provider
        text_encoder: TextEncoder = corpus.text_encoder
        class_names = corpus.class_names
    elif isinstance(config.dataset, CsvDatasetConfig):
        ds = config.dataset
        manifest = DatasetManifest.from_csv(ds.manifest, ds.dataset_tag)
        excluded = (
            load_excluded_classes(ds.excluded_classes_file)
            if ds.excluded_classes_file
            else frozenset()
        )
        manifest = filter_dataset(
            manifest,
            FilterRules(
                excluded_classes=excluded,
                single_label_only=ds.single_label_only,
                min_count=ds.min_count,
                cap=ds.cap,
                seed=ds.filter_seed,
            ),
        )
        store = DescriptionStore.load_jsonl(ds.descriptions)
        provider = NpzFeatureProvider(ds.features) if ds.features else None
        text_encoder = build_text_encoder_for_store(
            store, text_dim=256, classname_weight=config.backbones.classname_weight
        )
        class_names = {cid: store.get(cid).class_name for cid in manifest.class_ids() if cid in store}
    else:  # pragma: no cover - config validation prevents this
        raise ConfigError("dataset.kind", "unsupported dataset kind")

    if config.fold_assignment_path and Path(config.fold_assignment_path).exists():
        assignment = FoldAssignment.from_json(config.fold_assignment_path)
        if assignment.k != config.fold_k:
            raise FoldError(
                f"assignment k={assignment.k} does not match fold.k={config.fold_k}"
            )
    else:
        assignment = split_folds(manifest.class_counts, k=config.fold_k, seed=config.seeds.split)

    train_view, test_view = make_run_views(manifest, assignment, config.eval_fold)
    return RunContext(
        config=config,
        manifest=manifest,
        store=store,
        provider=provider,
        text_encoder=text_encoder,
        assignment=assignment,
        train_view=train_view,
        test_view=test_view,
        class_names=class_names,
    )


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def _require_provider(ctx: RunContext) -> FeatureProvider:
    if ctx.provider is None:
        raise ConfigError("dataset.features", "training needs clip features")
    return ctx.provider


def _build_encoder(config: RunConfig, input_dim: int, rng: np.random.Generator) -> AffineAudioEncoder:
    encoder = create_audio_encoder(
        config.backbones.audio,
        input_dim=input_dim,
        output_dim=config.encoder_dim,
        rng=rng,
    )
    if not isinstance(encoder, AffineAudioEncoder):
        raise ConfigError(
            "backbones.audio",
            f"backbone '{config.backbones.audio}' lacks numpy-trainer integration",
        )
    return encoder


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def stage1_fingerprint(snapshot: dict) -> dict:
    """The config subset that determines a stage-1 result."""
    keys = ("dataset", "fold", "eval_fold", "backbones", "encoder_dim", "stage1")
    fp = {k: snapshot[k] for k in keys}
    fp["seeds"] = {"split": snapshot["seeds"]["split"], "model": snapshot["seeds"]["model"]}
    return fp


def train_stage1(ctx: RunContext, out_dir: str | Path | None = None) -> Checkpoint:
    """Pretrain the audio encoder by classifying the seen classes.

    SGD with the configured schedule; the classification head never leaves
    this function.  Returns the best-by-validation encoder checkpoint, where
    validation is a held-out 5% slice of the seen-class samples.
    """
    config = ctx.config
    provider = _require_provider(ctx)
    records = ctx.train_view.records
    if not records:
        raise FoldError("train view is empty")
    classes = list(ctx.train_view.class_ids)
    class_index = {c: i for i, c in enumerate(classes)}

    init_rng = _rng(config.seeds.model, 100)
    shuffle_rng = _rng(config.seeds.model, 101)
    split_rng = _rng(config.seeds.model, 102)

    encoder = _build_encoder(config, provider.input_dim, init_rng)
    n_classes = len(classes)
    head_w = init_rng.normal(0.0, 1.0 / np.sqrt(config.encoder_dim), size=(n_classes, config.encoder_dim))
    head_b = np.zeros(n_classes)

    order = split_rng.permutation(len(records))
    n_val = max(1, int(round(0.05 * len(records))))
    val_idx, train_idx = order[:n_val], order[n_val:]
    train_records = [records[i] for i in train_idx]
    val_records = [records[i] for i in val_idx]

    params = {
        "encoder/weight": encoder.weight,
        "encoder/bias": encoder.bias,
        "head/weight": head_w,
        "head/bias": head_b,
    }
    stage = config.stage1
    steps_per_epoch = max(1, len(train_records) // stage.batch_size)
    schedule = LrSchedule(stage.lr, steps_per_epoch * stage.epochs, stage.schedule)
    optimizer = make_optimizer(stage.optimizer, params, schedule)

    def accuracy(recs) -> float:
        hits = 0
        for start in range(0, len(recs), 512):
            chunk = recs[start : start + 512]
            feats = provider.batch(chunk)
            logits = encoder.encode(feats) @ head_w.T + head_b
            pred = logits.argmax(axis=1)
            truth = np.asarray([class_index[r.class_id] for r in chunk])
            hits += int((pred == truth).sum())
        return hits / len(recs)

    train_acc = [accuracy(train_records)]  # index 0: before any update
    val_acc = [accuracy(val_records)]
    best = {
        "val": val_acc[0],
        "epoch": 0,
        "params": {k: v.copy() for k, v in params.items() if k.startswith("encoder/")},
    }

    for epoch in range(1, stage.epochs + 1):
        perm = shuffle_rng.permutation(len(train_records))
        for start in range(0, len(perm) - stage.batch_size + 1, stage.batch_size):
            batch = [train_records[i] for i in perm[start : start + stage.batch_size]]
            feats = provider.batch(batch)
            hidden, cache = encoder.forward(feats)
            logits = hidden @ head_w.T + head_b
            labels = np.asarray([class_index[r.class_id] for r in batch])
            probs = _softmax_rows(logits)
            d_logits = probs.copy()
            d_logits[np.arange(len(batch)), labels] -= 1.0
            d_logits /= len(batch)
            grads = {
                "head/weight": d_logits.T @ hidden,
                "head/bias": d_logits.sum(axis=0),
            }
            d_hidden = d_logits @ head_w
            enc_grads = encoder.backward(cache, d_hidden)
            grads["encoder/weight"] = enc_grads["weight"]
            grads["encoder/bias"] = enc_grads["bias"]
            optimizer.update(grads)
        train_acc.append(accuracy(train_records))
        val_acc.append(accuracy(val_records))
        if val_acc[-1] > best["val"]:
            best = {
                "val": val_acc[-1],
                "epoch": epoch,
                "params": {k: v.copy() for k, v in params.items() if k.startswith("encoder/")},
            }
        if out_dir is not None:
            save_checkpoint(
                Path(out_dir) / f"stage1_epoch_{epoch:03d}.ckpt",
                _stage1_header(ctx, epoch, train_acc, val_acc, best["epoch"]),
                {k: v for k, v in params.items() if k.startswith("encoder/")},
            )

    header = _stage1_header(ctx, stage.epochs, train_acc, val_acc, best["epoch"])
    checkpoint = Checkpoint(header=header, arrays=dict(best["params"]))
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "stage1.ckpt", header, checkpoint.arrays)
    return checkpoint


def _stage1_header(ctx, epoch, train_acc, val_acc, best_epoch) -> dict:
    config = ctx.config
    return {
        "stage": "stage1",
        "backbone_name": config.backbones.audio,
        "input_dim": _require_provider(ctx).input_dim,
        "output_dim": config.encoder_dim,
        "epoch": epoch,
        "best_epoch": best_epoch,
        "label_space": list(ctx.train_view.class_ids),
        "config": config.sanitized_snapshot(),
        "metrics": {"train_acc": list(train_acc), "val_acc": list(val_acc)},
    }


def _check_stage1_compat(ctx: RunContext, ckpt: Checkpoint) -> None:
    ckpt.require_stage("stage1")
    config = ctx.config
    if ckpt.backbone_name != config.backbones.audio:
        raise CheckpointError(
            f"checkpoint backbone '{ckpt.backbone_name}' != config '{config.backbones.audio}'"
        )
    if ckpt.header["output_dim"] != config.encoder_dim:
        raise CheckpointError("checkpoint encoder dim does not match config")
    ours = stage1_fingerprint(config.sanitized_snapshot())
    theirs = stage1_fingerprint(ckpt.config)
    if ours != theirs:
        raise CheckpointError("stage-1 checkpoint was produced under a different data/fold setup")


def _alignment_params(config: RunConfig, text_dim: int, rng: np.random.Generator):
    if config.loss.kind == "supcon":
        heads = ProjectionHeads.init(config.encoder_dim, text_dim, config.proj_dim, rng)
        params = {f"heads/{k}": v for k, v in heads.parameters().items()}
        return heads, params
    bilinear = BilinearParams.init(config.encoder_dim, text_dim, rng)
    return bilinear, {"bilinear/weight": bilinear.weight}


def train_stage2(
    ctx: RunContext,
    stage1_ckpt: Checkpoint,
    out_dir: str | Path | None = None,
    resume_from: Checkpoint | None = None,
) -> Checkpoint:
    """Align the audio encoder with the frozen text encoder.

    Trains encoder + projection heads under the supervised-contrastive loss,
    or encoder + bilinear weights under the ranking loss.  The attribute
    sampling strategy redraws each sample's description every step.  Epoch
    checkpoints carry optimizer and RNG state, so a resumed run replays the
    uninterrupted one step for step.
    """
    config = ctx.config
    provider = _require_provider(ctx)
    _check_stage1_compat(ctx, stage1_ckpt)
    if config.loss.kind == "ranking" and config.sampling.kind != "deterministic":
        logger.warning(
            "ranking loss is conventionally trained with the deterministic strategy; "
            "got '%s'", config.sampling.kind,
        )

    records = ctx.train_view.records
    init_rng = _rng(config.seeds.model, 200)
    shuffle_rng = _rng(config.seeds.model, 201)
    split_rng = _rng(config.seeds.model, 202)
    sampling_rng = _rng(config.seeds.sampling, 300)

    encoder = _build_encoder(config, provider.input_dim, init_rng)
    encoder.set_parameters(
        {"weight": stage1_ckpt.arrays["encoder/weight"], "bias": stage1_ckpt.arrays["encoder/bias"]}
    )
    text_dim = ctx.text_encoder.output_dim
    model, align_params = _alignment_params(config, text_dim, init_rng)
    params = {"encoder/weight": encoder.weight, "encoder/bias": encoder.bias, **align_params}

    # frozen-text contract: the encoder output for fixed probes may not move
    probe_texts = [
        render_description(ctx.store.get(c), ctx.store.get(c).present_kinds())
        for c in list(ctx.train_view.class_ids)[:10]
    ]
    probes_before = np.stack([ctx.text_encoder.encode(t) for t in probe_texts])

    order = split_rng.permutation(len(records))
    n_val = max(2, int(round(0.05 * len(records))))
    val_records = [records[i] for i in order[:n_val]]
    train_records = [records[i] for i in order[n_val:]]

    stage = config.stage2
    steps_per_epoch = max(1, len(train_records) // stage.batch_size)
    schedule = LrSchedule(stage.lr, steps_per_epoch * stage.epochs, stage.schedule)
    optimizer = make_optimizer(stage.optimizer, params, schedule)
    text_cache: dict = {}
    deterministic = SamplingStrategy(kind="deterministic")

    def batch_loss(batch_records, strategy, rng) -> tuple[float, dict, np.ndarray, np.ndarray]:
        feats = provider.batch(batch_records)
        hidden, cache = encoder.forward(feats)
        labels = tuple(r.class_id for r in batch_records)
        text = encode_batch_descriptions(
            labels, ctx.store, strategy, ctx.text_encoder, rng,
            subset=config.attribute_subset, cache=text_cache,
        )
        if config.loss.kind == "supcon":
            loss, grads, d_hidden = supcon_forward_backward(
                hidden, text, labels, model, config.loss.temperature
            )
            grads = {f"heads/{k}": v for k, v in grads.items() if f"heads/{k}" in params}
        else:
            loss, grads, d_hidden = ranking_forward_backward(
                hidden, text, labels, model, config.loss.margin
            )
            grads = {"bilinear/weight": grads["weight"]}
        return loss, grads, d_hidden, cache

    def validation_loss() -> float:
        losses = []
        rng = np.random.default_rng(0)  # deterministic strategy consumes no draws
        for start in range(0, len(val_records) - 1, stage.batch_size):
            chunk = val_records[start : start + stage.batch_size]
            if len(chunk) < 2:
                break
            loss, _, _, _ = batch_loss(chunk, deterministic, rng)
            losses.append(loss)
        return float(np.mean(losses)) if losses else float("nan")

    step_losses: list[float] = []
    val_losses: list[float] = []
    start_epoch = 1
    best = {
        "val": float("inf"),
        "epoch": 0,
        "params": {k: v.copy() for k, v in params.items()},
    }

    if resume_from is not None:
        resume_from.require_stage("stage2-progress")
        if stage1_fingerprint(resume_from.config) != stage1_fingerprint(config.sanitized_snapshot()):
            raise CheckpointError("resume checkpoint does not match this run's setup")
        for key in params:
            params[key][...] = resume_from.arrays[key]
        if isinstance(optimizer, AdamOptimizer):
            optimizer.load_state_arrays(resume_from.arrays, resume_from.header["optimizer_step"])
        else:
            optimizer.step_count = resume_from.header["optimizer_step"]
        shuffle_rng.bit_generator.state = resume_from.header["rng"]["shuffle"]
        sampling_rng.bit_generator.state = resume_from.header["rng"]["sampling"]
        step_losses = list(resume_from.header["metrics"]["step_loss"])
        val_losses = list(resume_from.header["metrics"]["val_loss"])
        best = {
            "val": resume_from.header["best_val"],
            "epoch": resume_from.header["best_epoch"],
            "params": {
                k: resume_from.arrays[f"best/{k}"].copy() for k in params
            },
        }
        start_epoch = resume_from.header["epoch"] + 1

    for epoch in range(start_epoch, stage.epochs + 1):
        perm = shuffle_rng.permutation(len(train_records))
        for start in range(0, len(perm) - 1, stage.batch_size):
            idx = perm[start : start + stage.batch_size]
            if len(idx) < 2:
                break
            batch = [train_records[i] for i in idx]
            loss, grads, d_hidden, cache = batch_loss(batch, config.sampling, sampling_rng)
            enc_grads = encoder.backward(cache, d_hidden)
            grads["encoder/weight"] = enc_grads["weight"]
            grads["encoder/bias"] = enc_grads["bias"]
            optimizer.update(grads)
            step_losses.append(float(loss))
        val_losses.append(validation_loss())
        if val_losses[-1] < best["val"]:
            best = {
                "val": val_losses[-1],
                "epoch": epoch,
                "params": {k: v.copy() for k, v in params.items()},
            }
        if out_dir is not None:
            progress_arrays = dict(params)
            progress_arrays.update(optimizer.state_arrays() if isinstance(optimizer, AdamOptimizer) else {})
            progress_arrays.update({f"best/{k}": v for k, v in best["params"].items()})
            save_checkpoint(
                Path(out_dir) / f"stage2_epoch_{epoch:03d}.ckpt",
                _stage2_progress_header(ctx, epoch, optimizer.step_count, shuffle_rng, sampling_rng,
                                        step_losses, val_losses, best),
                progress_arrays,
            )

    probes_after = np.stack([ctx.text_encoder.encode(t) for t in probe_texts])
    if probes_before.tobytes() != probes_after.tobytes():
        raise AttralignError("text encoder outputs changed during stage 2")

    header = {
        "stage": "stage2",
        "backbone_name": config.backbones.audio,
        "input_dim": provider.input_dim,
        "output_dim": config.encoder_dim,
        "text_dim": text_dim,
        "loss_kind": config.loss.kind,
        "epoch": stage.epochs,
        "best_epoch": best["epoch"],
        "config": config.sanitized_snapshot(),
        "metrics": {"step_loss": step_losses, "val_loss": val_losses},
    }
    checkpoint = Checkpoint(header=header, arrays=dict(best["params"]))
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "stage2.ckpt", header, checkpoint.arrays)
    return checkpoint


def _stage2_progress_header(ctx, epoch, opt_step, shuffle_rng, sampling_rng, step_losses, val_losses, best) -> dict:
    config = ctx.config
    return {
        "stage": "stage2-progress",
        "backbone_name": config.backbones.audio,
        "output_dim": config.encoder_dim,
        "loss_kind": config.loss.kind,
        "epoch": epoch,
        "optimizer_step": opt_step,
        "best_val": best["val"],
        "best_epoch": best["epoch"],
        "rng": {
            "shuffle": shuffle_rng.bit_generator.state,
            "sampling": sampling_rng.bit_generator.state,
        },
        "config": config.sanitized_snapshot(),
        "metrics": {"step_loss": list(step_losses), "val_loss": list(val_losses)},
    }


def load_stage2_model(ckpt: Checkpoint, config: RunConfig, input_dim: int):
    """Rebuild encoder and alignment model from a final stage-2 checkpoint."""
    ckpt.require_stage("stage2")
    rng = np.random.default_rng(0)  # shapes only; parameters are overwritten
    encoder = _build_encoder(config, input_dim, rng)
    encoder.set_parameters(
        {"weight": ckpt.arrays["encoder/weight"], "bias": ckpt.arrays["encoder/bias"]}
    )
    if ckpt.header["loss_kind"] == "supcon":
        model = ProjectionHeads(
            audio_weight=ckpt.arrays["heads/audio_weight"].copy(),
            audio_bias=ckpt.arrays.get("heads/audio_bias", np.zeros(config.proj_dim)).copy(),
            text_weight=ckpt.arrays["heads/text_weight"].copy(),
            text_bias=ckpt.arrays.get("heads/text_bias", np.zeros(config.proj_dim)).copy(),
            use_bias="heads/audio_bias" in ckpt.arrays,
        )
    else:
        model = BilinearParams(weight=ckpt.arrays["bilinear/weight"].copy())
    return encoder, model
