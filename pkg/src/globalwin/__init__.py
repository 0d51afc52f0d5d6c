"""Global win probability for cluster randomized trials with multiple endpoints.

Individual responses are converted to rank-based win fractions, averaged
across endpoints into global win fractions, and analysed with a
random-intercept linear mixed model fitted by REML.
"""

from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DegreesOfFreedomError,
    GlobalWinError,
    InputError,
    UnattainableTargetError,
)
from .data import (
    EndpointSpec,
    TrialDataset,
    ValidationReport,
    apply_directions,
    load_trial_tsv,
    summarize,
)
from .ranks import (
    GlobalWinFractionTable,
    RankTable,
    WinFractionTable,
    global_win_fractions,
    midranks,
    rank_tables,
    win_fractions,
    win_fractions_bruteforce,
    win_fractions_rank_form,
    win_loss_tie_proportions,
)
from .mixed import (
    LmmFit,
    VarianceComponents,
    balanced_anova_components,
    fit_reml,
    gls_arm_means,
)
from .inference import (
    GwpEstimate,
    IntervalEstimate,
    TestResult,
    cohen_to_theta,
    confidence_interval,
    estimate_gwp,
    hypothesis_test,
    rank_sum_equivalence,
    theta_to_cohen,
    to_win_difference,
    to_win_odds,
    u_statistic_theta,
)

__version__ = "0.1.0"
