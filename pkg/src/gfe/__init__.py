"""Grouped fixed-effects estimation for linear panel models.

Units belong to latent groups that share a time-varying intercept path; the
estimator finds the grouping, the group time profiles and the common covariate
effects jointly by least squares, after removing unit effects with the
within transformation.
"""

__version__ = "0.1.0"

from .panel import (  # noqa: E402
    CsvSchema,
    DemeanedPanel,
    PanelData,
    PanelError,
    demeaned_time_dummies,
    load_csv,
    within_transform,
    write_csv,
)
from .regression import (  # noqa: E402
    RankDeficiencyError,
    TimeEffectEstimate,
    fit_2wfe,
    fit_time_effects,
    least_squares,
)
from .estimator import (  # noqa: E402
    EmptyGroupError,
    GfeEstimate,
    GroupAssignment,
    GroupTimeProfiles,
    StartingValues,
    assignment_step,
    g_sweep,
    gfe_fit,
    gfe_fit_single,
    parameter_step,
    recompute_objective,
    unit_group_ssr,
    unmodified_parameter_step,
)
from .inference import (  # noqa: E402
    BootstrapResult,
    LabelPermutation,
    bootstrap,
    group_summaries,
    match_labels,
    proportional_effect,
    shift_profiles,
)
from .simulation import (  # noqa: E402
    DgpSpec,
    estimate_rho,
    load_dgp_spec,
    monte_carlo,
    simulate_panel,
)
