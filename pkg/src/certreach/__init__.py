"""Certified Hamilton-Jacobi reachability.

Learn a neural value function for a continuous-time control system, certify
a global bound on its HJ residuals with an interval branch-and-prune checker
inside a CEGIS loop, and convert the certified bound into sound over- and
under-approximations of the reachable set.
"""

from .expr import EnclosureError, EvalError, Expr, ExprPool, IntervalBox
from .formula import FormulaError, parse_formula
from .system import (ConfigError, ResidualPair, SystemSpec, UnsupportedSystemError,
                     build_hamiltonian, build_residuals, load_system)
from .valuenet import NetConfig, ValueNet, load_checkpoint, save_checkpoint
from .train import (BiasPoint, Phase, TrainConfig, TrainResult, empirical_max_losses,
                    loss_terms, run_curriculum, sample_batch, total_loss)
from .certify import (CertifierConfig, CertResult, DeltaSatWitness, Query,
                      branch_and_prune, build_queries, certify_network,
                      certify_residuals, empirical_violations)
from .cegis import CegisConfig, CegisReport, CegisRow, run_cegis
from .reach import (CertifiedValue, classify, classify_batch, epsilon_total,
                    export_grid, monotonicity_diagnostic, sample_monotonicity_triples)
from .oracle import (CflError, PointCloud, Trajectory, levelset_cfl_limit,
                     levelset_solve, sampled_reachable, simulate, simulate_ensemble)

__version__ = "0.1.0"
