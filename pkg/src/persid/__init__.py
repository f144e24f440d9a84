"""Perturbation-based reconstruction and functional-equivalence validation
of stochastic input-output systems."""

from . import discrepancy, domain, equivalence, informativeness, iohmm, lgss, policies, reconstruction, runner, systems
from .domain import (
    Dataset,
    ExperimentalDomain,
    OutputSpace,
    PerturbationSequence,
    PerturbationSplit,
    TrajectoryRecord,
    group_dataset,
    make_split,
    validate_domain,
)
from .equivalence import calibrate_delta, equivalence_test, intrinsic_error
from .errors import *  # noqa: F401,F403
from .informativeness import discriminatory_power, greedy_adaptive_design, select_optimal_family
from .iohmm import IoHmmParams
from .lgss import LgssParams
from .policies import PerturbationPolicy, adaptive_step, generate_open_loop
from .reconstruction import LossConfig, ModelClass, fit
from .runner import EnvironmentSpec, collect_dataset, run_closed_loop, run_pipeline

__version__ = "0.1.0"
