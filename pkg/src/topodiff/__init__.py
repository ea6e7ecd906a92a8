"""Query-conditioned discrete graph diffusion over multi-agent communication topologies."""

from .denoiser import QueryContext, make_query
from .estimator import EffectiveSizeTransformer, TopologyDiffusion
from .executor import ExecutionTrace, HttpBackend, MockBackend, execute
from .graph import (CommGraph, CycleError, GraphError, RoleVocabulary, baseline_topology, combined_effective_size,
                    dag_project, effective_size, graph_stats)
from .synthetic import SyntheticOracle, SyntheticTask, generate_task_suite, task_query
from .trainer import ConfigError, DiffusionModel, DiffusionRecord, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CommGraph", "ConfigError", "CycleError", "DiffusionModel", "DiffusionRecord", "EffectiveSizeTransformer",
    "ExecutionTrace", "GraphError", "HttpBackend", "MockBackend", "QueryContext", "RoleVocabulary",
    "SyntheticOracle", "SyntheticTask", "TopologyDiffusion", "TrainConfig", "baseline_topology",
    "combined_effective_size", "dag_project", "effective_size", "execute", "generate_task_suite", "graph_stats",
    "make_query", "task_query", "train",
]
