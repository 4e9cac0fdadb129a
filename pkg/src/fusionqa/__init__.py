"""Knowledge-graph multiple-choice QA with an attention GNN and fact fusion."""
from .encoder import HashEncoder, HashEncoderConfig, RemoteEncoder
from .estimators import ContextBaselineClassifier, QAGNNClassifier
from .facts import FactStore, FusionConfig, fuse_context, load_facts, retrieve_facts
from .grounding import DataError, GroundedExample, extract_mentions, ground_example, normalize_text
from .kg_store import KnowledgeGraph, MergeTable, build_graph, iter_assertions, load_graph, save_graph
from .model import ConfigError, ModelConfig
from .pipeline import Grounder, QADataset, WorkingGraphBuilder
from .subgraph import SubgraphSpec, WorkingGraph, extract_khop
from .synthetic import generate_benchmark
from .train import TrainConfig, TrainRun

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContextBaselineClassifier", "DataError", "FactStore", "FusionConfig",
    "GroundedExample", "Grounder", "HashEncoder", "HashEncoderConfig", "KnowledgeGraph",
    "MergeTable", "ModelConfig", "QADataset", "QAGNNClassifier", "RemoteEncoder", "SubgraphSpec",
    "TrainConfig", "TrainRun", "WorkingGraph", "WorkingGraphBuilder", "build_graph",
    "extract_khop", "extract_mentions", "fuse_context", "generate_benchmark", "ground_example",
    "iter_assertions", "load_facts", "load_graph", "normalize_text", "retrieve_facts",
    "save_graph",
]
