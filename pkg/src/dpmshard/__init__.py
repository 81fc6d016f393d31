"""Parallel supercluster MCMC for Dirichlet process mixtures of product-Bernoulli clusters."""
from .chain import initialize, iterate_chain, run_parallel, run_serial, run_to_directory
from .config import RunConfig, config_from_dict, load_config
from .datagen import GeneratorSpec, GroundTruth, generate, true_heldout_ll
from .diagnostics import (ChainRecord, alpha_posterior_curve, average_predictive, convergence_report,
                          heldout_log_predictive)
from .errors import ConfigError, DataIOError, DpmError, IntegrityError, UsageError, WorkerError
from .ess import ess
from .geweke import GewekeConfig, geweke_test
from .hyper import AlphaPrior, sample_alpha, sample_beta_griddy
from .model import BinaryDataset, ClusterStats, log_marginal_cluster, log_predictive_row
from .parallel import MapPool, map_sweep, merge_shards, reduce_step, shard_state
from .prior import (ConcentrationSpec, PartitionAssignment, crp_sample, eppf_exact, joint_log_prior,
                    two_stage_crp_sample)
from .serial import gibbs_sweep_serial, serial_step
from .state import MixtureState, check_state, joint_log_score

__version__ = "0.1.0"
