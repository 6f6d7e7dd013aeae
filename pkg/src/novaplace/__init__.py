"""Geo-distributed placement and parallelisation of streaming two-way joins."""
from .topology import Node, Role, Topology, load_topology, load_latency_matrix
from .cost_space import EmbedConfig, NeighborIndex, embed, embed_mds, embed_vivaldi
from .plan import JoinMatrix, LogicalPlan, ParallelizedPlan
from .virtual import compute_optima, geometric_median
from .physical import NovaConfig, Placement, nova_place, nova_solve, p_max, partition_pair, partition_stream

__version__ = "0.1.0"
