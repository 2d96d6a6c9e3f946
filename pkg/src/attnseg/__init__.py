"""attnseg: diffusion attention dumps to semantic segmentation masks."""

from .attention import (
    AggregatedAttention,
    RefinedAttention,
    aggregate,
    class_slice,
    refine,
    self_power,
)
from .evaluate import ConfusionMatrix, LossReport, confusion, miou, uncertainty_ce
from .masks import (
    ObjectnessField,
    SegMask,
    adopt_pseudo_labels,
    decide,
    objectness,
    read_mask,
    write_mask,
)
from .pipeline import PipelineConfig, generate_mask, run_ablation, run_generate
from .prompts import (
    ClassEntry,
    ClassVocabulary,
    GenerationPlan,
    PromptSpec,
    append_classes,
    limit_classes,
    plan_dataset,
)
from .store import (
    AttentionRecord,
    ContainerReader,
    Kind,
    ManifestClass,
    RecordDescriptor,
    RunManifest,
    read_container,
    resize_spatial,
    write_container,
)

__version__ = "0.1.0"
