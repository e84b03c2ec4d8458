"""Synthetic captioned-image dataset pipeline.

Stages: concept bank -> LLM captions -> concept matching -> balanced
subsampling -> text-to-image rendering -> sharded dataset -> dual-encoder
contrastive training -> five-task evaluation with relative-improvement
aggregation. Every stage has a deterministic offline backend so the whole
pipeline can run and be tested without network access.
"""

__version__ = "0.1.0"
