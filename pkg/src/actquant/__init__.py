"""actquant: post-training activation quantization toolkit.

Outlier-preserving group quantization for activations and attention-aware
logarithmic quantization for softmax scores, over calibration sets of dumped
tensors, with error/overhead/BOPs analytics.
"""

__version__ = "0.1.0"

from .analysis import (
    BopsModel,
    ErrorReport,
    bops,
    bops_rescale,
    drop_activations,
    error_metrics,
    find_outliers,
)
from .attention import (
    AttentionScores,
    QuantizedAttention,
    attention_scores,
    attention_value_product,
    dequantize_attention,
    load_quantized_attention,
    quantize_attention,
    save_quantized_attention,
    start_token_ablation,
)
from .errors import (
    ManifestError,
    PlanError,
    TensorDataError,
    TensorFormatError,
    UnsupportedTensorError,
    ValidationError,
)
from .groupquant import (
    GroupQuantConfig,
    GroupQuantScheme,
    DimensionStats,
    apply_group_quant,
    cluster_ranges,
    compute_dimension_score,
    fit_group_scheme,
    kmeans_objective,
    scheme_overhead_bytes,
    select_dimension,
)
from .pipeline import (
    PipelineConfig,
    QuantPlan,
    run_apply,
    run_calibrate,
    run_compare,
)
from .quantizers import (
    QuantParams,
    RunningMinMax,
    calibrate_minmax,
    calibrate_mse,
    calibrate_running_minmax,
    fake_quantize,
    linear_dequantize,
    linear_quantize,
    log_dequantize,
    log_quantize,
)
from .synthetic import generate_calibration_set, planted_outliers
from .tensorio import (
    CalibrationSet,
    LayerInfo,
    Tensor,
    axis_minmax,
    load_calibration_set,
    load_tensor,
    save_tensor,
)
