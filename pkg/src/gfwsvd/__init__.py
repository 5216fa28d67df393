"""Fisher-weighted low-rank compression of linear layers.

The Fisher of a layer is approximated by a Kronecker product ``A (x) B``
extracted matrix-free from per-batch gradients; weights are then compressed
by a truncated SVD in the Cholesky-whitened coordinates of those factors.
"""

from .bench import BenchReport, bench_matvec
from .compress import (
    METHODS,
    CholeskyPair,
    CompressionPlan,
    LayerPlan,
    LowRankLayer,
    bert_base_inventory,
    compress,
    exact_quadratic_increase,
    fwsvd_compress,
    gfwsvd_compress,
    plan_ranks,
    svd_compress,
    weighted_error,
)
from .errors import *  # noqa: F401,F403
from .fisher import (
    DiagonalFisherWeights,
    GradientAccumulator,
    KroneckerFactors,
    accumulate,
    diagonal_fisher,
    explicit_fim,
    extract_kronecker_factors,
    rearrange,
    rearranged_apply,
    rearranged_apply_transpose,
    rearranged_operator,
)
from .linalg import (
    LinearOperator,
    SvdTriplet,
    cholesky_spd,
    full_svd,
    kron,
    solve_triangular,
    truncated_svd,
    unvec,
    vec,
)
from .tensor_io import read_report, read_tensor, write_report, write_tensor
from .toy import SweepConfig, ToyModel, ToyTask, eval_loss, make_task, run_sweep, train_and_collect

__version__ = "0.1.0"
