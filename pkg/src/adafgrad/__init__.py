"""Lifelong learning for bag-of-features slide classification.

Core pieces: a two-level gated-attention aggregator with hand-derived
gradients, prototype-contrastive adaptation against a growing text-prototype
buffer, replay-time gradient distillation over a reservoir rehearsal buffer,
and a full class-incremental / task-incremental metric harness.
"""

from .buffer import RehearsalBuffer, load_buffer, save_buffer
from .data import (
    Manifest,
    SyntheticSpec,
    load_manifest,
    read_prototype_buffer,
    read_slide_features,
    synth_sequence,
    write_prototype_buffer,
    write_slide_features,
)
from .engine import (
    OptimizerState,
    RunConfig,
    RunReport,
    config_from_dict,
    evaluate_random_baseline,
    run_sequence,
    train_task,
)
from .errors import (
    AdafgradError,
    ConfigurationError,
    ConsistencyError,
    DegenerateGradientError,
    DimensionError,
    EmptyBufferError,
    FormatError,
    ManifestError,
    NonFiniteError,
    UndefinedMetricError,
)
from .losses import (
    LossWeights,
    cross_entropy,
    infonce,
    ovla,
    ppgd,
    self_similarity,
    total_objective,
)
from .metrics import (
    AccMatrix,
    TaskMaskRanges,
    backward_transfer,
    class_il_accuracy,
    forgetting,
    forward_transfer,
    macro_auc,
    masked_accuracy,
    mean_accuracy,
)
from .model import (
    ForwardTrace,
    ModelDims,
    ModelParams,
    ReplayTarget,
    SlideFeatures,
    StepTargets,
    backward,
    forward,
    init_params,
    logit_head_gradient,
    params_checksum,
    total_loss,
)
from .prototypes import (
    PrototypeBuffer,
    SentenceEmbedding,
    accumulate_task,
    build_class_prototype,
    build_negative_prototype,
)

__version__ = "0.1.0"
