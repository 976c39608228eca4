"""End-to-end training of tensorized neural networks with automatic rank
determination.

Weight matrices are folded into tensors and stored in CP, Tucker,
tensor-train or tensor-train-matrix format with a Gaussian variational
posterior per factor entry.  Per-rank prior variances are updated in closed
form during training and pruned afterwards, so the tensor ranks are learned
rather than hand-picked.
"""

from .bayes import (
    HalfCauchy,
    LogUniform,
    kl_gaussian,
    optimal_rank_var_half_cauchy,
    optimal_rank_var_log_uniform,
    sample_factors,
)
from .checkpoint import load_network, save_network
from .datasets import LabeledDataset, batches, gen_synthetic, load_mnist_idx
from .dense import fold_matrix, fold_matrix_paired, khatri_rao, mode_n_product
from .factorized import (
    FactorizedLayer,
    GaussianFactor,
    RankCollapsedError,
    backprop_reconstruction,
    inferred_ranks,
    init_layer,
    param_count,
    prune,
    reconstruct,
)
from .network import (
    Embedding,
    Network,
    PlainLinear,
    TensorizedLinear,
    build_network,
    embedding_lookup,
    nll_multinomial,
    softmax,
)
from .training import (
    TrainConfig,
    TrainingDiverged,
    TrainReport,
    evaluate,
    kl_weight,
    predict_uncertainty,
    train,
)

__version__ = "0.1.0"
