"""Selective node-propagation graph network for transductive node
classification, with exact hand-derived gradients and experiment harnesses."""

__version__ = "0.1.0"

from .graph import (
    DatasetError,
    Graph,
    SplitMasks,
    augment_with_noise,
    load_graph,
    make_graph,
    make_splits,
    save_graph,
    synth_sbm,
)
from .kernels import AdamState, Param, adam_step, dropout, log_softmax_nll, logistic, matmul, neighbor_sum, relu
from .layers import (
    ComplexLayerParams,
    SimpleLayerParams,
    apply_gate,
    complex_layer_forward,
    compute_sensitivity,
    frontier_sets,
    gcn_baseline_forward,
    selective_aggregate,
    simple_layer_forward,
)
from .model import (
    ConfigError,
    Model,
    ModelConfig,
    TrainReport,
    evaluate,
    init_model,
    load_checkpoint,
    load_config,
    model_forward,
    param_count,
    save_checkpoint,
    train,
)
from .bench import (
    BenchReport,
    BenchRow,
    BenchSpec,
    SbmRecipe,
    layer_diagnostics,
    noise_bench,
    scale_bench,
    stacking_compare,
    sweep_layers,
    sweep_threshold,
)
from .gradcheck import GradcheckResult, run_gradcheck

__all__ = [
    "AdamState",
    "BenchReport",
    "BenchRow",
    "BenchSpec",
    "ComplexLayerParams",
    "ConfigError",
    "DatasetError",
    "GradcheckResult",
    "Graph",
    "Model",
    "ModelConfig",
    "Param",
    "SbmRecipe",
    "SimpleLayerParams",
    "SplitMasks",
    "TrainReport",
    "adam_step",
    "apply_gate",
    "augment_with_noise",
    "complex_layer_forward",
    "compute_sensitivity",
    "dropout",
    "evaluate",
    "frontier_sets",
    "gcn_baseline_forward",
    "init_model",
    "layer_diagnostics",
    "load_checkpoint",
    "load_config",
    "load_graph",
    "log_softmax_nll",
    "logistic",
    "make_graph",
    "make_splits",
    "matmul",
    "model_forward",
    "neighbor_sum",
    "noise_bench",
    "param_count",
    "relu",
    "run_gradcheck",
    "save_checkpoint",
    "save_graph",
    "scale_bench",
    "selective_aggregate",
    "simple_layer_forward",
    "stacking_compare",
    "sweep_layers",
    "sweep_threshold",
    "synth_sbm",
    "train",
]
