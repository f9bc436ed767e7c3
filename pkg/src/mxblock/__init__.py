"""Block floating-point quantization with a three-way error decomposition."""

__version__ = "0.1.0"

from .formats import (
    E2M1,
    ElementGrid,
    GridCode,
    ScaleCode,
    decode_grid,
    encode_scale_ceiling,
    nearest_grid_code,
)
from .quantize import (
    BlockQuant,
    BlockQuantConfig,
    QuantizedTensor,
    block_view,
    deadzone_mask,
    ideal_scale,
    qdq_tensor,
    quantize_block,
    quantize_block_ideal,
    quantize_tensor,
)
from .decompose import (
    DecompReport,
    ErrorDecomposition,
    decompose_tensor,
    orthogonality_check,
    scale_precision_sweep,
    tensor_stats,
    verify_identity,
)
from .corrections import (
    AqnSchedule,
    MbsConfig,
    OfConfig,
    OfResult,
    aqn_apply,
    aqn_schedule,
    dz_recovery_rate,
    mbs_qdq,
    mbs_select_mantissa,
    of_qdq,
)
from .analysis import (
    GammaStats,
    GemmPropagation,
    TempFit,
    aqn_total_noise,
    component_error_matrices,
    cross_term_vs_blocksize,
    cumulative_scale_bias,
    deadzone_truncate,
    effective_rank,
    effective_temperature_fit,
    effective_temperature_predict,
    gamma_stats,
    gemm_error_propagation,
)
from .tensorstore import (
    SynthSpec,
    TensorEntry,
    TensorSet,
    TensorStoreError,
    load_container,
    save_container,
    synth,
)
