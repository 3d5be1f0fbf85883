"""Joint spectrum allocation and user association on a slow timescale.

Modules map onto the pipeline: ``netmodel`` (topology, neighborhoods,
patterns, spectral efficiency), ``scenario`` (random drops and persistence),
``utility`` (delay utility calculus), ``convexcore`` (shared projection/QP
kernels), ``localform`` + ``admm`` (the segmented formulation and its
distributed consensus solver), ``sparse_local`` (reweighted-l1 outer loop,
extraction, refinement), ``exact_global`` (enumeration-scale reference
solver and solution transport), ``baselines`` (comparison schemes) and
``cli`` (command-line harness).
"""

__version__ = "0.1.0"

from .netmodel import Topology, Neighborhoods, build_neighborhoods, StrongestM, ExplicitEdges
from .scenario import ScenarioConfig, TrafficProfile, Scenario, generate
from .utility import DelayUtility

__all__ = [
    "Topology", "Neighborhoods", "build_neighborhoods", "StrongestM",
    "ExplicitEdges", "ScenarioConfig", "TrafficProfile", "Scenario",
    "generate", "DelayUtility", "__version__",
]
