"""Federated LoRA simulation with round-matching and gradient-aligned client
initialisation, server-side full-rank aggregation, and baseline protocols."""
from .config import METHODS, RunConfig, config_from_dict, load_config
from .linalg import FactorPair, SvdResult, svd_approx, svd_exact, svd_randomized
from .orchestrator import boundary_jump, run_experiment, verify_proposition

__all__ = [
    "METHODS",
    "FactorPair",
    "RunConfig",
    "SvdResult",
    "boundary_jump",
    "config_from_dict",
    "load_config",
    "run_experiment",
    "svd_approx",
    "svd_exact",
    "svd_randomized",
    "verify_proposition",
]
