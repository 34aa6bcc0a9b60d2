"""Sparse linear-chain CRF toolkit.

Trains sequence labelers under an elastic-net penalty with (blockwise)
coordinate descent and exploits the resulting parameter sparsity to
speed up forward-backward inference and Viterbi decoding.
"""

from .data import (
    Corpus,
    CorpusFormatError,
    HmmSpec,
    Sequence,
    bayes_error,
    default_hmm_spec,
    generate_hmm_corpus,
    read_corpus,
    token_error,
    write_corpus,
)
from .estimator import SparseElasticNetCRF, default_templates
from .features import (
    BlockIndex,
    Template,
    TemplateError,
    build_block_index,
    cutoff_filter,
    extract_key,
    parse_template,
)
from .inference import (
    InferenceError,
    Lattice,
    Scorer,
    compile_sequence,
    forward_backward_dense,
    forward_backward_sparse,
    label_sequence_potential,
    marginal_decode,
    truncated_forward_backward,
    viterbi,
)
from .model import (
    LabelAlphabet,
    Model,
    ModelFormatError,
    ObservationAlphabet,
    ParameterStore,
    active_counts,
    load_model,
    save_model,
)
from .objective import (
    PenaltyConfig,
    gradient,
    hessian_diag_approx,
    log_loss,
    penalized_objective,
)
from .optimizer import (
    TrainConfig,
    TrainHistory,
    blockwise_epoch,
    cd_epoch,
    coordinate_update,
    kkt_residuals,
    soft_threshold,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BlockIndex",
    "Corpus",
    "CorpusFormatError",
    "HmmSpec",
    "InferenceError",
    "LabelAlphabet",
    "Lattice",
    "Model",
    "ModelFormatError",
    "ObservationAlphabet",
    "ParameterStore",
    "PenaltyConfig",
    "Scorer",
    "Sequence",
    "SparseElasticNetCRF",
    "Template",
    "TemplateError",
    "TrainConfig",
    "TrainHistory",
    "active_counts",
    "bayes_error",
    "blockwise_epoch",
    "build_block_index",
    "cd_epoch",
    "compile_sequence",
    "coordinate_update",
    "cutoff_filter",
    "default_hmm_spec",
    "default_templates",
    "extract_key",
    "forward_backward_dense",
    "forward_backward_sparse",
    "generate_hmm_corpus",
    "gradient",
    "hessian_diag_approx",
    "kkt_residuals",
    "label_sequence_potential",
    "load_model",
    "log_loss",
    "marginal_decode",
    "parse_template",
    "penalized_objective",
    "read_corpus",
    "save_model",
    "soft_threshold",
    "token_error",
    "train",
    "truncated_forward_backward",
    "viterbi",
    "write_corpus",
]
