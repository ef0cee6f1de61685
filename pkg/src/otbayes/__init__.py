"""Wasserstein barycenters of Bayesian posteriors.

Closed-form optimal transport for four model families, deterministic and
(batch) stochastic descent on Wasserstein space, Metropolis posterior
sampling, classical model averages, and a reproducible experiment
harness with a CLI.
"""

from .errors import (
    CompatibilityError,
    MatrixNotPDError,
    OtBayesError,
    QuadratureError,
    ScheduleError,
    SizeCapError,
)
from .measures import (
    CopulaModel,
    DiscreteMeasure,
    Exponential,
    GaussianCopula,
    Generator,
    GridQuantile,
    GridUnivariate,
    Gumbel,
    IndependenceCopula,
    Laplace,
    LocationScatterModel,
    Logistic,
    Normal,
    QuantileMixModel,
    RadialProfile,
    SphericalModel,
    StudentT,
    UnivariateModel,
    default_levels,
    experiment_covariance,
    make_ls_model,
    mix_quantiles,
    model_from_dict,
    sample,
)
from .transport import (
    AffinePSDMap,
    ConvexCombinationMap,
    CoordinatewiseMap,
    CouplingPlan,
    IdentityMap,
    MonotoneRearrangementMap,
    RadialMap,
    TransportMap,
    discrete_ot,
    ot_map,
    ot_map_copula,
    ot_map_ls,
    ot_map_spherical,
    ot_map_univariate,
    w2,
    w2_ls,
    w2_spherical,
    wp_copula,
    wp_univariate,
)
from .barycenter import (
    DescentTrace,
    ModelDistribution,
    StepSchedule,
    StopRule,
    batch_sgd_step,
    empirical_barycenter,
    fixed_point_residual,
    gk_step,
    population_barycenter,
    risk,
    sgd_step,
    variance_of_gradient_estimator,
)
from .bayes import (
    BwbConfig,
    BwbDiagnostics,
    Dataset,
    DensityTable,
    McmcConfig,
    MixtureModel,
    ParamPrior,
    PosteriorChain,
    bwb_estimator,
    exponential_model_average,
    log_likelihood,
    metropolis_sample,
    model_average,
    posterior_models,
    square_model_average,
)
from .experiments import (
    ExperimentConfig,
    ExperimentRecord,
    ExperimentReport,
    emit_report,
    read_records_csv,
    run_all,
    run_bary_vs_bma,
    run_barycenter_vs_truth,
    run_posterior_consistency,
    run_sgd_experiment,
)

__version__ = "0.1.0"
