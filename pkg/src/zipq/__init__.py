"""Low-precision SGD training toolkit.

Stochastic quantization with unbiased gradient estimators for linear
models (double sampling), variance-optimal placement of quantization
levels, polynomial-approximation estimators for non-linear losses with
refetching, bit-packed dataset storage, and an experiment CLI.
"""

from .datasets import (
    ContainerError,
    DataFormatError,
    Dataset,
    compression_ratio,
    load_csv,
    load_libsvm,
    read_quantized,
    synth,
    synth_bimodal,
    write_quantized,
)
from .linear import (
    Regularizer,
    SampleQuantizer,
    TrainConfig,
    TrainTrace,
    double_sample_gradient,
    end_to_end_gradient,
    full_gradient_sample,
    model_quantized_gradient,
    naive_quantized_gradient,
    prox,
    train,
)
from .nonlinear import (
    ApproximationError,
    PolyApprox,
    RefetchDecision,
    RefetchPolicy,
    chebyshev_fit,
    load_poly,
    poly_gradient_estimate,
    refetch_l1_decide,
    refetch_l2_decide,
    save_poly,
    train_nonlinear,
)
from .optq import (
    Partition,
    PointSet,
    adaquant_greedy,
    approx_optimal_partition,
    brute_force_partition,
    interval_err,
    load_boundaries,
    optimal_partition_discretized,
    optimal_partition_dp,
    partition_err,
    partition_to_scheme,
    save_partition,
)
from .quantize import (
    PackedCopies,
    QuantScheme,
    QuantizedVector,
    ScaleError,
    StreamReuseError,
    column_scales,
    dequantize_draws,
    encode_copies,
    quantize_stochastic,
    row_scale,
    scheme_for_bits,
    uniform_scheme,
    variance_bound_uniform,
)
from .rng import new_rng, split

__version__ = "0.1.0"
