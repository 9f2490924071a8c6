"""Two-stage quantised CNN cascades: a fast low-precision unit handles every
sample, a confidence test forwards the doubtful ones to a high-precision unit,
and a roofline model sizes both for a target device."""

from .model import (
    Conv,
    EvalSet,
    FullyConnected,
    MaxPool,
    ModelGraph,
    ReLU,
    Softmax,
    infer_shapes,
    load_eval_set,
    load_model,
    save_eval_set,
    save_model,
)
from .quantizer import (
    FixedPointFormat,
    LayerFormats,
    QuantScheme,
    QuantizedTensor,
    dequantize,
    derive_lpu_weights,
    profile_layer_ranges,
    quantize_tensor,
    search_scaling_factors,
    select_wordlengths,
)
from .engine import (
    AccumulatorSpec,
    MMConfig,
    QuantizedModel,
    evaluate_accuracy,
    im2col,
    mm,
    predict,
    tiled_mm,
)
from .ceu import CeuConfig, SortedProbVector, gbvsb, is_confident, tune_ceu
from .dse import (
    ArchConfig,
    DeviceModel,
    PerfEstimate,
    baseline_speedup,
    cascade_throughput,
    default_device,
    optimize_unit,
    roofline_perf,
    summarize_workload,
)
from .cascade import (
    CascadeSystem,
    RunStats,
    build_cascade,
    report,
    run_cascade,
    simulate_timeline,
)

__version__ = "0.1.0"
