"""Bayesian joint model for survival outcomes with a Poisson-counted biomarker.

The latent biomarker density carries a truncated Dirichlet-process
mixture of gammas; comparison estimators (naive and true-covariate Cox,
Poisson-gamma SIMEX) and a simulation harness sit alongside.
"""

from .data import (
    HazardGrid,
    ModelConfig,
    PriorSpec,
    SurvivalDataset,
    make_dataset,
    make_hazard_grid,
    read_dataset,
    validate_dataset,
)
from .mcmc import McmcDraws, run_chain, run_chains

__version__ = "0.1.0"

__all__ = [
    "HazardGrid",
    "McmcDraws",
    "ModelConfig",
    "PriorSpec",
    "SurvivalDataset",
    "make_dataset",
    "make_hazard_grid",
    "read_dataset",
    "run_chain",
    "run_chains",
    "validate_dataset",
]
