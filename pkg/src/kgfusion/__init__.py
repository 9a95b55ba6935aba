"""Knowledge-graph-grounded contrastive pre-training at desk scale."""

__version__ = "0.1.0"

from .evaluate import (alignment_eval, in_batch_link_eval, link_eval,
                       relation_eval, retrieval_eval, template_probe)
from .graph import KnowledgeGraph, SynthSpec, ingest_graph, synth_graph, synth_pairs
from .model import KgModel, ModelConfig
from .trainer import TrainConfig, Trainer, checkpoint_load, checkpoint_save

__all__ = [
    "KnowledgeGraph", "SynthSpec", "ingest_graph", "synth_graph", "synth_pairs",
    "KgModel", "ModelConfig", "TrainConfig", "Trainer",
    "checkpoint_load", "checkpoint_save",
    "retrieval_eval", "relation_eval", "link_eval", "in_batch_link_eval",
    "alignment_eval", "template_probe",
    "__version__",
]
