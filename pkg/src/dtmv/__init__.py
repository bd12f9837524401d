"""Discrete-time mean-variance portfolio selection with entropy-regularized RL."""

from dtmv.analytic import (
    GaussianPolicy,
    IterationFamily,
    MarketModel,
    ProblemSpec,
    ValueGrid,
    discount_factor,
    dp_oracle,
    gaussian_entropy,
    iterate,
    optimal_policy,
    optimal_value,
    seed_policy,
    seed_value,
)
from dtmv.market import (
    Historical,
    NormalIID,
    ReturnSeries,
    RngStream,
    SkewTIID,
    annualize_market,
    load_monthly_csv,
    sample_path,
    step_wealth,
)

__version__ = "0.1.0"
