"""Multi-level differentiable zooming for multiple-instance learning on image pyramids."""

from .attention import GatedAttentionParams, ga_backward, ga_forward
from .core import (
    ArgumentError,
    AvailabilityError,
    CacheError,
    DimensionError,
    EmptyBagError,
    FeaturePyramid,
    FormatError,
    IndicatorMatrix,
    PatchPyramid,
    ScheduleError,
    TrainingError,
    ZoomError,
    children_of,
    load_pyramid,
    save_pyramid,
)
from .model import (
    FlopLedger,
    InferenceResult,
    ZoomModel,
    export_attention,
    infer,
    infer_batch,
    infer_full_grid,
    infer_full_grid_batch,
    load_checkpoint,
    save_checkpoint,
    train_backward,
    train_forward,
)
from .synth import SynthConfig, SynthEncoder, generate_dataset, load_dataset, save_dataset
from .topk import (
    PerturbedTopKConfig,
    expand_indicator,
    hard_topk,
    perturbed_topk_backward,
    perturbed_topk_forward,
)
from .train import TrainConfig, ablate, evaluate, fit, k_sweep, weighted_f1

__version__ = "0.1.0"
