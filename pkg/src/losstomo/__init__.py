"""Multicast loss tomography on tree topologies."""

__version__ = "0.1.0"

from .analysis import (
    SubtreePassRate,
    VarianceReport,
    crlb_variance,
    efficiency_order,
    fisher_ibe,
    fisher_mle,
    plugin_rates,
    subtree_pass_rates,
)
from .estimators import (
    Estimate,
    EstimatorSpec,
    Family,
    TreePolicy,
    estimate,
    estimate_bwe,
    estimate_ibe,
    estimate_mle,
    estimate_rse,
    estimate_tree,
)
from .harness import ExperimentConfig, ResultTable, reproduce_table, run_experiment, select_and_estimate
from .observation import ObservationMatrix, SeedSpec, export_trace, ingest, simulate
from .statistics import (
    SubsetId,
    SubsetStats,
    build_stats,
    child_indicator,
    confirmed_arrivals,
    subset_count,
)
from .topology import Topology, TopologyError, load_topology, path_to_link_rates

