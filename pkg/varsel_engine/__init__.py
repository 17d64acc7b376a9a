__version__ = '0.3.0'

from .errors import (
    VarselError,
    ConfigError,
    NumericError,
    SamplerFailure,
    InsufficientDrawsError,
    DegenerateVarianceError,
)
from .net_core import (
    NetworkArch,
    NetworkWeights,
    Dataset,
    FeatureBundle,
    forward,
    forward_batch,
    gradient,
    gradient_batch,
    activation_pattern,
    build_feature_bundle,
    check_constraints,
)
from .posterior_hmc import (
    PriorSpec,
    HmcConfig,
    PosteriorChain,
    OutputLayerPosterior,
    HamiltonianSampler,
    log_posterior_and_grad,
    leapfrog,
    adapt_step,
    hmc_sample,
    sample_chains,
)
from .importance import (
    ImportanceDraws,
    OmegaMatrix,
    psi_raw,
    trace_correction,
    psi_centered_direct,
    omega_matrix,
    psi_centered_omega,
    psi_centered_parallel,
    importance_draws,
)
from .selection import CredibleBand, SelectionResult, SelectionQuality, simultaneous_band, select_variables, selection_metrics
from .diagnostics import CvmNullBand, std_mse, standardize, cvm_statistic, cvm_null_band, bvm_reference_sd, bvm_covariance
from .synth import GeneratorSpec, SynthDataset, PREDEFINED_GENERATORS, f_complex, f_linear, f_neural, gen_dataset
from .runner import ExperimentConfig, ExperimentReport, CellRecord, run_cell, run_experiment, summarize

__all__ = [
    # errors
    'VarselError',
    'ConfigError',
    'NumericError',
    'SamplerFailure',
    'InsufficientDrawsError',
    'DegenerateVarianceError',
    # network
    'NetworkArch',
    'NetworkWeights',
    'Dataset',
    'FeatureBundle',
    'forward',
    'forward_batch',
    'gradient',
    'gradient_batch',
    'activation_pattern',
    'build_feature_bundle',
    'check_constraints',
    # posterior
    'PriorSpec',
    'HmcConfig',
    'PosteriorChain',
    'OutputLayerPosterior',
    'HamiltonianSampler',
    'log_posterior_and_grad',
    'leapfrog',
    'adapt_step',
    'hmc_sample',
    'sample_chains',
    # importance
    'ImportanceDraws',
    'OmegaMatrix',
    'psi_raw',
    'trace_correction',
    'psi_centered_direct',
    'omega_matrix',
    'psi_centered_omega',
    'psi_centered_parallel',
    'importance_draws',
    # selection
    'CredibleBand',
    'SelectionResult',
    'SelectionQuality',
    'simultaneous_band',
    'select_variables',
    'selection_metrics',
    # diagnostics
    'CvmNullBand',
    'std_mse',
    'standardize',
    'cvm_statistic',
    'cvm_null_band',
    'bvm_reference_sd',
    'bvm_covariance',
    # simulation
    'GeneratorSpec',
    'SynthDataset',
    'PREDEFINED_GENERATORS',
    'f_complex',
    'f_linear',
    'f_neural',
    'gen_dataset',
    # experiments
    'ExperimentConfig',
    'ExperimentReport',
    'CellRecord',
    'run_cell',
    'run_experiment',
    'summarize',
]
