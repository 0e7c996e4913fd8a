"""fmmkit: fast summation of 1/r potentials and forces.

One adaptive octree, Cartesian Taylor expansions of selectable order, three
interchangeable far-field strategies (treecode, interaction lists, dual
tree) and several acceptance criteria, all verified against plain direct
summation.  See the README for the benchmark CLI.
"""

from .geometry import (
    Aabb,
    MortonKey,
    ParticleSet,
    compute_bounds,
    generate_distribution,
    load_particles_csv,
    morton_decode,
    morton_encode,
    neighbor_key,
    save_particles_csv,
)
from .kernels import (
    Expansion,
    KernelStats,
    direct,
    l2l,
    l2p,
    m2l,
    m2m,
    m2p,
    ncoef,
    p2m,
    p2p,
)
from .mac import MacConfig, accept, error_bound
from .traversal import (
    EvalConfig,
    EvalReport,
    evaluate_dual_tree,
    evaluate_list_fmm,
    evaluate_on_tree,
    evaluate_treecode,
    spawn_policy,
)
from .tree import Cell, Tree, build_tree, check_invariants, downward_pass, upward_pass
from .tuner import (
    TuneEntry,
    TuneResult,
    max_theta_for_error,
    select_p_theta,
    verify_against_direct,
)

__version__ = "0.1.0"

__all__ = [
    "Aabb",
    "Cell",
    "EvalConfig",
    "EvalReport",
    "Expansion",
    "KernelStats",
    "MacConfig",
    "MortonKey",
    "ParticleSet",
    "Tree",
    "TuneEntry",
    "TuneResult",
    "accept",
    "build_tree",
    "check_invariants",
    "compute_bounds",
    "direct",
    "downward_pass",
    "error_bound",
    "evaluate_dual_tree",
    "evaluate_list_fmm",
    "evaluate_on_tree",
    "evaluate_treecode",
    "generate_distribution",
    "l2l",
    "l2p",
    "load_particles_csv",
    "m2l",
    "m2m",
    "m2p",
    "max_theta_for_error",
    "morton_decode",
    "morton_encode",
    "ncoef",
    "neighbor_key",
    "p2m",
    "p2p",
    "save_particles_csv",
    "select_p_theta",
    "spawn_policy",
    "upward_pass",
    "verify_against_direct",
    "__version__",
]
