"""Zero-shot audio classification by aligning audio with attribute descriptions."""

from .attributes import (
    AttributeKind,
    ClassDescription,
    DescriptionStore,
    render_description,
    validate,
)
from .alignment import (
    AlignmentBatch,
    BilinearParams,
    LossConfig,
    ProjectionHeads,
    SamplingStrategy,
    bilinear_similarity,
    cosine_similarity_projected,
    encode_batch_descriptions,
    ranking_loss,
    sample_attributes,
    supcon_loss,
)
from .config import RunConfig, load_config
from .datasets import (
    DatasetManifest,
    FilterRules,
    FoldAssignment,
    SampleRecord,
    filter_dataset,
    make_run_views,
    split_folds,
)
from .evaluation import ClassPrototype, EvalReport, build_prototypes, classify, evaluate_fold, run_ablation
from .training import prepare_run, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "AttributeKind",
    "ClassDescription",
    "DescriptionStore",
    "render_description",
    "validate",
    "AlignmentBatch",
    "BilinearParams",
    "LossConfig",
    "ProjectionHeads",
    "SamplingStrategy",
    "bilinear_similarity",
    "cosine_similarity_projected",
    "encode_batch_descriptions",
    "ranking_loss",
    "sample_attributes",
    "supcon_loss",
    "RunConfig",
    "load_config",
    "DatasetManifest",
    "FilterRules",
    "FoldAssignment",
    "SampleRecord",
    "filter_dataset",
    "make_run_views",
    "split_folds",
    "ClassPrototype",
    "EvalReport",
    "build_prototypes",
    "classify",
    "evaluate_fold",
    "run_ablation",
    "prepare_run",
    "train_stage1",
    "train_stage2",
    "__version__",
]
