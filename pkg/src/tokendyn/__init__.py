"""Token dynamics of deep random transformers on the sphere and their stochastic limits."""

from .attention import AttentionParams, attention, attention_field
from .config import ExperimentConfig, default_config, load_config, resolve_config
from .dynamics import (
    ModelConfig,
    RegularizationSpec,
    TrajectoryRecord,
    euler_step,
    run_common_noise,
    run_coupled_pair,
    run_euler,
    run_pure_noise,
    run_refinement_ladder,
    run_refinement_pair,
    run_transformer,
    transformer_step,
)
from .errors import ConfigError, NumericalFailure, TokenDynError
from .experiments import RateFit, fit_rate, run_experiment
from .kernel import (
    Activation,
    KernelSpec,
    KernelValues,
    dissipation_rate,
    gegenbauer_expand,
    gegenbauer_polynomial,
    kappa,
    kappa_ambient,
    kappa_prime_one,
    lyapunov_constants,
)
from .mlp import MlpParams, mlp_forward, sample_mlp
from .noise import FieldSample, GaussianCoupling, coupled_layer_fields, gaussian_ot_map, refine_field_pair, sample_field
from .observables import cosine_stats, decay_rate_fit, interaction_energy, lyapunov_estimate, w2_empirical
from .seeding import Role, TrialStreams, derive_stream
from .sphere import SphericalCloud, layer_normalize, ln_taylor_expand, sample_uniform_sphere, tangent_project

__version__ = "0.1.0"
