"""Two-stage fine-tuning pipeline for multivariate time-series forecasting.

Stage 1 aligns a frozen causal-transformer backbone with patched time series
through a next-patch objective; stage 2 fine-tunes per prediction length with
linear probing followed by partial fine-tuning (layer norms, low-rank
adapters, encoders, head, and reversible-normalization affine).
"""

from .backbone import (
    Backbone,
    BackboneConfig,
    BackboneError,
    FreezePolicy,
    LoRAAdapter,
    PARAM_GROUPS,
    apply_freeze_policy,
    attach_lora,
    load_checkpoint,
    parameter_group,
    trainable_fraction,
)
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint_file, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .data import (
    DataError,
    CsvFormatError,
    PreparedData,
    RawSeries,
    Scaler,
    SplitSpec,
    SynthComponent,
    SynthSpec,
    Window,
    chronological_split,
    few_shot_prefix,
    generate_synthetic,
    load_csv,
    prepare_splits,
    save_csv,
    sliding_windows,
)
from .encode import (
    DEFAULT_ATTRIBUTES,
    EncodeError,
    EncoderConfig,
    PatchEncoder,
    TemporalAttributeSpec,
    extract_calendar,
)
from .evaluation import (
    EvalError,
    HorizonMetrics,
    MetricsReport,
    evaluate_forecast,
    linear_eval,
    multi_horizon_protocol,
)
from .train import (
    AlignmentHead,
    ForecastHead,
    ForecastModel,
    GradCheckReport,
    PatchSpec,
    TrainConfig,
    TrainingError,
    build_alignment_modules,
    build_forecast_modules,
    forecast_forward,
    gradient_check,
    load_forecast_model,
    mae,
    mse,
    run_alignment,
    run_gradient_check,
    run_lp_ft,
    seed_all,
    transfer_alignment_weights,
)
from .transform import (
    NORM_EPS,
    RevIN,
    TransformError,
    channel_independence,
    instance_normalize,
    make_shift_targets,
    patchify,
    restack_channels,
    unfold_patches,
)

__version__ = "0.1.0"
