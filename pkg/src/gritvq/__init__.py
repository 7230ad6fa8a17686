"""Hard-assignment vector quantization with a radius-based surrogate gradient
and an integrated, learnable codebook transform."""

from .codebook import (
    TransformSpec,
    apply_transform,
    batch_assign,
    build_cache,
    init_codebook,
    init_transform,
    nn_query,
    spectral_clip,
)
from .errors import ConfigError, DomainError, NaNAbort, ShapeError
from .gradcheck import FDConfig, check_pipeline_gradients, contraction_experiment, fd_gradient
from .harness import (
    ExperimentConfig,
    MethodConfig,
    RunResult,
    SyntheticTask,
    collapse_preset,
    compare_methods,
    run_experiment,
)
from .quantizer import surrogate_backward, surrogate_forward, transform_backward
from .radius import RadiusSpec, eval_radius, eval_radius_batch
from .training import TrainConfig, adam_update, init_state, train_step

__version__ = "0.1.0"
