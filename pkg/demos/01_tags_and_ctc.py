"""Walk through BIO tags, segment decoding and the CTC objective.

Run with ``python3 demos/01_tags_and_ctc.py``.
"""

import numpy as np

from signseg.core import TagSequence, collapse_for_ctc, segments_from_tags, tags_from_segments
from signseg.model import downsample_labels, upsample_predictions
from signseg.objective import CTCInfeasibleError, ctc_loss

# A 16-frame clip with three signs; the last two touch each other.
tags = TagSequence.from_string("OOBIIIOOBIIIBIII")
segments = segments_from_tags(tags)
print("tags      ", tags)
print("segments  ", [(s.start, s.end) for s in segments])
print("round trip", tags_from_segments(segments, len(tags)) == tags)

# An I-run with no B in front is an orphan: promoted to a sign, or dropped.
orphan = TagSequence.from_string("OIIOBI")
print("promote   ", segments_from_tags(orphan, "promote"))
print("discard   ", segments_from_tags(orphan, "discard"))

# The model runs at half the frame rate. B wins when a pair mixes tags,
# and upsampling expands each half-rate B into [B, I].
half = downsample_labels(tags)
print("half rate ", half)
print("back up   ", upsample_predictions(half, len(tags)))

# CTC target: merge repeats, then drop O (the blank). Adjacent signs stay
# distinct because each contributes its own B.
target = collapse_for_ctc(half)
print("ctc target", [t.name for t in target])

rng = np.random.default_rng(0)
logits = rng.standard_normal((len(half), 3))
log_probs = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
print("ctc loss  ", round(ctc_loss(log_probs, target), 4))

# Two equal symbols in a row need a blank between them, so [B, B] does not
# fit in two frames.
try:
    ctc_loss(log_probs[:2], [2, 2])
except CTCInfeasibleError as exc:
    print("infeasible", exc)
