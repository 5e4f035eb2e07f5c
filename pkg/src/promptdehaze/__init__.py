"""promptdehaze: language-guided adaptation of pre-trained dehazing networks.

Pipeline in one breath: pretrain a small dehazing backbone on synthetic
hazy/clean pairs, then fine-tune it on unlabeled real hazy photos by
scoring its outputs against contrastive text prompts (sky, non-sky, and
whole-image enhancement sets) through a frozen vision-language encoder,
anchored by a multi-layer feature fidelity loss.
"""

from .backbone import (
    Checkpoint,
    CheckpointError,
    DehazeModel,
    TinyResidualDehazer,
    build_backbone,
    load_checkpoint,
    register_backbone,
    save_checkpoint,
    tiny_backbone,
)
from .encoders import (
    BackendError,
    Embedding,
    LayerFeatures,
    PatchFeatures,
    PretrainedClipEncoder,
    ToyEncoder,
    TruncationWarning,
    get_encoder,
)
from .evalcli import (
    MetricReport,
    cli_dispatch,
    contrast_statistic,
    evaluate,
    haze_density_proxy,
    register_metric,
    write_report,
)
from .imaging import (
    HazeParams,
    Image,
    ImageFormatError,
    RegionMask,
    composite,
    dark_channel,
    load_image,
    load_mask,
    save_image,
    save_mask,
    synthesize_haze,
    synthetic_depth,
    synthetic_scene,
    toy_hazy_pairs,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    clip_prompt_loss,
    composite_tensor,
    fidelity_loss,
    guidance_loss,
    total_loss,
)
from .prompts import (
    EnsembledPrompts,
    PromptSet,
    TemplateFormatError,
    build_default_prompt_sets,
    build_prompt_set,
    class_masses,
    ensemble_embedding,
    load_prompt_config,
    positive_probability,
)
from .regions import (
    PointPrompt,
    SimilarityMap,
    build_mask_cache,
    compute_sky_mask,
    heuristic_sky_mask,
    refine_mask,
    segment_sky,
    select_sky_points,
    similarity_map,
    sky_locator_embedding,
)
from .training import (
    Lion,
    TrainConfig,
    TrainRecord,
    encoder_checksum,
    finetune,
    finetune_config,
    lr_at,
    mean_nonsky_clip_loss,
    pretrain,
    pretrain_config,
    toy_finetune_config,
    toy_pretrain_config,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "Checkpoint",
    "CheckpointError",
    "DehazeModel",
    "Embedding",
    "EnsembledPrompts",
    "HazeParams",
    "Image",
    "ImageFormatError",
    "LayerFeatures",
    "Lion",
    "LossBreakdown",
    "LossWeights",
    "MetricReport",
    "PatchFeatures",
    "PointPrompt",
    "PretrainedClipEncoder",
    "PromptSet",
    "RegionMask",
    "SimilarityMap",
    "TemplateFormatError",
    "TinyResidualDehazer",
    "ToyEncoder",
    "TrainConfig",
    "TrainRecord",
    "TruncationWarning",
    "build_backbone",
    "build_default_prompt_sets",
    "build_mask_cache",
    "build_prompt_set",
    "class_masses",
    "cli_dispatch",
    "clip_prompt_loss",
    "composite",
    "composite_tensor",
    "compute_sky_mask",
    "contrast_statistic",
    "dark_channel",
    "encoder_checksum",
    "ensemble_embedding",
    "evaluate",
    "fidelity_loss",
    "finetune",
    "finetune_config",
    "get_encoder",
    "guidance_loss",
    "haze_density_proxy",
    "heuristic_sky_mask",
    "load_checkpoint",
    "load_image",
    "load_mask",
    "load_prompt_config",
    "lr_at",
    "mean_nonsky_clip_loss",
    "positive_probability",
    "pretrain",
    "pretrain_config",
    "refine_mask",
    "register_backbone",
    "register_metric",
    "save_checkpoint",
    "save_image",
    "save_mask",
    "segment_sky",
    "select_sky_points",
    "similarity_map",
    "sky_locator_embedding",
    "synthesize_haze",
    "synthetic_depth",
    "synthetic_scene",
    "tiny_backbone",
    "total_loss",
    "toy_finetune_config",
    "toy_hazy_pairs",
    "toy_pretrain_config",
    "write_report",
]
