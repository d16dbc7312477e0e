"""Narrative + pointer-trace to semantic segmentation canvas pipeline.

Stages: corpus ingestion, trace/word alignment statistics, HMM sequence
tagging, mask retrieval, and layered canvas composition, with a batch CLI
and an interactive HTTP authoring service on top.
"""

__version__ = "0.1.0"
