"""Length-generalization lab for diagonal selective state-space models."""

__version__ = "0.1.0"

from .calibrate import (
    CalibrationConfig,
    ScalingFactors,
    constant_factors,
    eval_loss,
    grad_calibrate,
    init_factors,
    resolve_scales,
    spsa_calibrate,
)
from .model import (
    ToyModel,
    ToyModelConfig,
    build_model,
    forward,
    load_checkpoint,
    model_checksum,
    perplexity_by_length,
    save_checkpoint,
    train,
)
from .quad import adaptive_quad
from .scan import (
    DiscretizedStep,
    ScanOverflowError,
    ScanState,
    SsmLayerParams,
    cumulative_transition,
    discretize,
    materialize_mixing_matrix,
    selective_scan,
)
from .spectrum import SpectrumReport, layer_spectrum, model_spectrum, scale_spectrum
from .statenorm import (
    LambdaLaw,
    NormExperiment,
    NormResult,
    closed_form_norm,
    density_limit,
    divergence_slope,
    matvec_norm_bound,
    rate_mamba,
    rate_mamba2,
    simulate_state_norm,
    track_model_state_norms,
    vanishing_ratio,
)
from .tasks import (
    PasskeySample,
    gen_copy,
    gen_passkey,
    load_text_corpus,
    passkey_grid_eval,
    synthetic_corpus,
)
