"""Sign language segmentation as per-frame BIO tagging.

Modules:
    core: tags, segments and their conversions.
    data: feature files, manifests, windows and the synthetic corpus.
    model: adapters, downsampling, mixer and transformer encoder.
    objective: cross-entropy and a from-scratch CTC loss.
    metrics: frame, boundary and segment scores.
    train: training loop, sliding-window prediction and ablation.
    cli: the ``signseg`` command.
"""

from .core import (B, I, O, BioTag, GlossAnnotation, Segment, TagSequence, ValidationError,
                   collapse_for_ctc, segments_from_tags, tags_from_segments)

__version__ = "0.1.0"

__all__ = ["B", "I", "O", "BioTag", "GlossAnnotation", "Segment", "TagSequence",
           "ValidationError", "collapse_for_ctc", "segments_from_tags", "tags_from_segments",
           "__version__"]
