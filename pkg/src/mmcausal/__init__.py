"""Multimodal contrastive factor discovery with counterfactual augmentation."""

__version__ = "0.1.0"

from .types import FactorSpec, FactorSet, PipelineConfig, Provenance, Sample, StructuredDataset
from .graph import MixedGraph

__all__ = [
    "FactorSpec",
    "FactorSet",
    "MixedGraph",
    "PipelineConfig",
    "Provenance",
    "Sample",
    "StructuredDataset",
]
