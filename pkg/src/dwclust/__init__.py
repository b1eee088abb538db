"""Distributed covariance-coding clustering.

Minimizes twice the assignment entropy plus the proportion-weighted log
determinants of regularized cluster covariances, with data split across
hosts that only exchange summary statistics.
"""

from .coordinator import (
    ClusteringResult,
    CoordinatorConfig,
    TraceRecord,
    recover_primal,
    round_assignments,
    run_clustering,
)
from .dataeval import (
    EMBaselineResult,
    GapEntry,
    GapReport,
    MixtureComponent,
    MixtureSpec,
    PipelineResult,
    brute_force_oracle,
    cluster_dataset,
    duality_gap_probe,
    em_baseline,
    generate_mixture,
    miss_rate,
    shard_dataset,
)
from .errors import (
    HostFailureError,
    NumericalError,
    ProtocolError,
    StaleResultError,
    ValidationError,
)
from .estimator import DualDecompositionClustering
from .localsolver import (
    DualVariables,
    LocalSolveResult,
    SolveParams,
    solve_local,
)
from .model import (
    ClusterModel,
    Dataset,
    RegularizationConfig,
    ShardLayout,
    coding_objective,
    entropy,
    mixture_moments,
    validate_assignment,
)
from .rotation import (
    BetaWeights,
    RotationSet,
    beta_from_variances,
    diagonalize,
    hadamard_slack,
    haar_rotations,
)
from .transport import InProcessTransport, TcpTransport, serve_host

__version__ = "0.1.0"

__all__ = [
    "BetaWeights",
    "ClusterModel",
    "ClusteringResult",
    "CoordinatorConfig",
    "Dataset",
    "DualDecompositionClustering",
    "DualVariables",
    "EMBaselineResult",
    "GapEntry",
    "GapReport",
    "HostFailureError",
    "InProcessTransport",
    "LocalSolveResult",
    "MixtureComponent",
    "MixtureSpec",
    "NumericalError",
    "PipelineResult",
    "ProtocolError",
    "RegularizationConfig",
    "RotationSet",
    "ShardLayout",
    "SolveParams",
    "StaleResultError",
    "TcpTransport",
    "TraceRecord",
    "ValidationError",
    "beta_from_variances",
    "brute_force_oracle",
    "cluster_dataset",
    "coding_objective",
    "diagonalize",
    "duality_gap_probe",
    "em_baseline",
    "entropy",
    "generate_mixture",
    "hadamard_slack",
    "haar_rotations",
    "miss_rate",
    "mixture_moments",
    "recover_primal",
    "round_assignments",
    "run_clustering",
    "serve_host",
    "shard_dataset",
    "solve_local",
    "validate_assignment",
]
