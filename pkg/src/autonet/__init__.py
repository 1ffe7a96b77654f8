"""Auto-context convolutional cascades for whole-brain extraction."""

from .cascade import (
    CascadeConfig,
    CascadeState,
    TrainingCase,
    cascade_converged,
    first_layer_channel_norms,
    inference_trajectory,
    load_cascade,
    run_inference_cascade,
    run_training_cascade,
)
from .evaluation import (
    ConfusionCounts,
    EvalReport,
    aggregate_log_error,
    binarize,
    confusion_counts,
    dice,
    error_map,
    evaluate_case,
    sensitivity,
    specificity,
    summarize,
)
from .networks import (
    ModelParameters,
    NetworkSpec,
    Stage,
    TrainSchedule,
    UnetConfig,
    VoxelwiseConfig,
    build_unet_spec,
    build_voxelwise_spec,
    class_weights,
    count_parameters,
    cross_entropy,
    instantiate,
    predict_unet,
    predict_voxelwise,
    softmax,
    train,
    weighted_slice_loss,
)
from .patches import (
    PatchConfig,
    PatchSet,
    assemble_context_channel,
    extract_patch_2d,
    extract_patch_set,
    extract_slice_stack,
)
from .sampling import SamplingPlan, border_mask, sample_training_voxels
from .volumes import (
    BinaryMask,
    PhantomSpec,
    PosteriorVolume,
    Volume,
    generate_phantom,
    load_volume,
    mean_intensity,
    normalize_intensity,
    save_volume,
)

__version__ = "0.1.0"
