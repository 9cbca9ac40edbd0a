"""odescout: symbolic ODE discovery from sampled trajectories.

Candidate right-hand sides are proposed term by term, their coefficients are
fitted numerically, and each term is graded by ablation plus a semantic
review before the next round of proposals.
"""

from .benchmarks import (
    REGIMES,
    SYSTEMS,
    SystemSpec,
    TrajectoryDataset,
    generate_dataset,
    get_system,
    ground_truth_rhs,
    integrate_rk4,
    read_dataset,
    write_dataset,
)
from .evaluation import (
    NmseReport,
    TermTestConfig,
    evaluate_system,
    integral_nmse,
    nmse_success_test,
    residual_nmse,
    term_match_test,
    truth_system,
)
from .expression import ParamedEquation, build_skeleton, parse_term, render, skeleton_key
from .fitted import FittedSystem, read_equation_file, system_from_terms, write_equation_file
from .optimizer import (
    OptimizerConfig,
    OptResult,
    optimize_best_of_three,
    optimize_bfgs,
    optimize_de,
    optimize_hybrid,
)
from .scientist import AblationConfig, BanList, ablation_classify, decide_action
from .search import DiscoveryReport, SearchConfig, run_repeats, run_search

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
