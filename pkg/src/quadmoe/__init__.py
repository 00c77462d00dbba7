"""Quadratic-gated mixture-of-experts regression laboratory."""
from .errors import DivergenceError, InvalidArgument, NumericalFailure, QuadMoEError, UnsupportedCellSize
from .kernels import BACKEND
from .model import (
    NONLINEARITIES,
    Atom,
    AttnGateParams,
    ExpertFamily,
    Gate,
    GateKind,
    LinearExpert,
    MixingMeasure,
    TwoLayerExpert,
    active_attention,
    att_moe_forward,
    attention,
    expert_eval,
    gate_probs,
    gate_scores,
    induced_quadratic,
    moe_forward,
    moe_predict,
)
from .gradients import GradientRecord, finite_diff_grad, grad_check, sq_loss, sq_loss_grad
from .synth import Dataset, SynthConfig, generate_dataset, sample_inputs, sample_true_measure
from .fit import FitConfig, fn_l2_distance, gd_fit, init_overspecified
from .voronoi import assign_cells, loss_L1, loss_L2r, loss_L3, per_param_errors
from .ident import (
    derivative_features,
    pde_residual_gate,
    pde_residual_linear_expert,
    polysys_residual,
    polysys_search,
    rbar,
    slow_sequence,
    strong_ident_report,
)
from .ratelab import ExperimentConfig, RateReport, loglog_slope, overhead_report, run_rate_experiment

__version__ = "0.1.0"
