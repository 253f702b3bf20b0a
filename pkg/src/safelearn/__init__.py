"""Safe active learning of controlled stochastic dynamics.

Simulate a controlled SDE, estimate densities and safety/reset
probabilities from sampled paths, fit kernel ridge regressors with
predictive uncertainty, and grow a certified set of safe controls by
sampling uncertain but provably feasible points.
"""
from .config import CampaignConfig, ConfigError, dump_config, load_config, parse_config
from .density import (ConfigurationError, KdeEstimate, ObservationRecord, bandwidth_rule,
                      bessel_kernel, kde_density, probability_from_density,
                      probability_from_samples)
from .explorer import (CandidateGrid, ExplorerState, Thresholds, certify_set, explore,
                       is_feasible, lcb_reset, lcb_safety, select_next)
from .kernels import (ConfidenceParams, KernelModel, MaternKernel, ModelStateError,
                      NumericalDegeneracyError, add_point, confidence_params, information_gain)
from .oracles import OracleMap, dense_reference_solve, mc_truth_map, ou_density
from .sde import (BenchmarkControl, ControlPoint, IntegrationError, RegionSpec, SystemSpec,
                  TrajectoryBatch, benchmark_control, benchmark_regions, benchmark_system,
                  integrate_paths)

__version__ = "0.1.0"
