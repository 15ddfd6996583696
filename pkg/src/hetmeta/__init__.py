"""Semi-supervised meta-learning across tasks with heterogeneous attribute
spaces: variable-feature self-attention over three-mode episode tensors,
prototypical and Gaussian-process heads, and an episodic training loop."""

from . import autodiff
from .attention import (
    MvsaParams,
    VsaParams,
    init_mvsa_params,
    init_vsa_params,
    mvsa_forward,
    vsa_flop_estimate,
    vsa_forward,
)
from .autodiff import Tape, Tensor, finite_checks, set_finite_checks
from .data import (
    CorpusSplit,
    SamplerConfig,
    TaskDataset,
    generate_circle_spiral_corpus,
    generate_circle_task,
    generate_linear_regression_task,
    generate_regression_corpus,
    generate_spiral_task,
    ingest_tabular,
    load_corpus,
    load_dataset,
    sample_episode,
    save_corpus,
    save_dataset,
    split_corpus,
)
from .heads import (
    GpHead,
    Prototypes,
    class_posterior,
    classification_loss,
    compute_prototypes,
    gp_predict,
    init_gp_head,
    rbf_kernel,
    regression_loss,
)
from .model import (
    BlockParams,
    Episode,
    ModelConfig,
    build_input_tensor,
    forward_embed,
    forward_embed_expanded_oracle,
    init_model_params,
    named_parameters,
    run_blocks,
)
from .training import (
    AdamState,
    EvalResult,
    TrainConfig,
    TrainReport,
    adam_step,
    episode_loss,
    evaluate,
    load_checkpoint,
    meta_train,
    restore_model,
    save_checkpoint,
)

__version__ = "0.1.0"
