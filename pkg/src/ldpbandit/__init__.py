"""Locally differentially private linear contextual bandits.

A layered private regression oracle (noisy count/moment/Gram channels plus
principal-component recovery on a shell partition of feature space), an
action-elimination policy built on it, private and non-private baselines,
hard instance designs for lower-bound experiments, and an experiment runner
with privacy selftests.
"""

from .analysis import (
    CoverageReport,
    VerificationReport,
    concentration_report,
    coverage_audit,
    design_mad_exact,
    directional_mse,
    estimate_mad,
    fit_loglog_slope,
)
from .baselines import (
    InputPerturbationOracle,
    RidgeEpochFitter,
    RidgeOracle,
    SuffStatConfig,
    input_perturb_fit,
    ridge_fit,
    suffstat_fit,
    suffstat_private_policy,
)
from .elimination import (
    ConstantTable,
    EliminationAudit,
    EpochSchedule,
    ExactLinearTable,
    InactiveTable,
    PolicyState,
    RegretTrace,
    Table,
    active_set,
    record_outcome,
    run_elimination,
    run_elimination_stream,
    select_action,
)
from .environments import (
    HardDesign,
    LinearEnv,
    TwoPointDesign,
    hard_design_stream,
    mirror_env,
    random_finite_env,
    realize_reward,
    realize_reward_batch,
    sample_design,
    sample_period,
)
from .mechanisms import (
    DensityRatioCheck,
    NoiseSpec,
    PrivacyBudget,
    centered_wishart_noise,
    oracle_channel_certificates,
    sample_laplace,
    sample_wishart,
    verify_density_ratio,
)
from .oracle import (
    LayeredOracle,
    OracleConfig,
    OracleEstimate,
    lplr_aggregate,
    lplr_ci,
    lplr_pcr,
    lplr_update,
    run_oracle,
)
from .partition import (
    BinNode,
    LayerParams,
    PartitionTree,
    child_address,
    is_partitioning,
)
from .runner import (
    ConfigError,
    ExactTableFitter,
    ExperimentConfig,
    LplrEpochFitter,
    build_design,
    build_env,
    build_layer_params,
    run_experiment,
)

__version__ = "0.1.0"
