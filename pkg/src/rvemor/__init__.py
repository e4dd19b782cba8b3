"""Projection-based model order reduction for elastoplastic RVEs with a
recurrent-network surrogate for the reduced coefficients.

Offline: periodic RVE simulations (``fem``) over generated macro load paths
(``loading``) feed a snapshot POD (``pod``); the reduced solver produces the
coefficient labels a gated recurrent network is trained on (``rnn``).
Online: the network replaces the Newton solve entirely (``surrogate``).
The ``cli`` module chains the stages into a reproducible pipeline.
"""

from .errors import (ConfigError, DataMismatchError, ElementInversionError,
                     NonconvergenceError, RankError, ReturnMappingError,
                     SimulationDivergedError, TrainingDivergedError)
from .material import MaterialParams, stress_update, stress_update_batch
from .fem import (MeshSpec, PeriodicMesh, SolverConfig, StateBatch,
                  build_rve_mesh, solve_dns, volume_average_stress)
from .loading import (LoadPath, MacroStretch, build_psi, complete_stretch,
                      cyclic_path, cyclic_target_fan, homogeneous_field,
                      random_path)
from .pod import (ReducedBasis, SnapshotSet, build_basis, collect_snapshots,
                  load_basis, load_snapshots, reconstruction_error,
                  save_basis, save_snapshots, solve_reduced)
from .rnn import (NormStats, RnnModel, RnnStepper, SequenceSample,
                  TrainConfig, compute_norm_stats, forward_sequence,
                  init_model, load_model, save_model, train)
from .surrogate import (OnlineResult, RunData, compare_fields,
                        homogenize_stress, read_stress_csv, run_online,
                        write_stress_csv)
from .config import RunConfig, load_config, parse_config_text

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataMismatchError", "ElementInversionError",
    "NonconvergenceError", "RankError", "ReturnMappingError",
    "SimulationDivergedError", "TrainingDivergedError",
    "MaterialParams", "stress_update", "stress_update_batch",
    "MeshSpec", "PeriodicMesh", "SolverConfig", "StateBatch",
    "build_rve_mesh", "solve_dns", "volume_average_stress",
    "LoadPath", "MacroStretch", "build_psi", "complete_stretch",
    "cyclic_path", "cyclic_target_fan", "homogeneous_field", "random_path",
    "ReducedBasis", "SnapshotSet", "build_basis", "collect_snapshots",
    "load_basis", "load_snapshots", "reconstruction_error", "save_basis",
    "save_snapshots", "solve_reduced",
    "NormStats", "RnnModel", "RnnStepper", "SequenceSample", "TrainConfig",
    "compute_norm_stats", "forward_sequence", "init_model", "load_model",
    "save_model", "train",
    "OnlineResult", "RunData", "compare_fields", "homogenize_stress",
    "read_stress_csv", "run_online", "write_stress_csv",
    "RunConfig", "load_config", "parse_config_text",
    "__version__",
]
