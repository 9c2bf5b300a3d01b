"""BIO tag types and the conversions between tag sequences and sign segments."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BioTag",
    "O",
    "I",
    "B",
    "TagSequence",
    "Segment",
    "GlossAnnotation",
    "ValidationError",
    "segments_from_tags",
    "tags_from_segments",
    "collapse_for_ctc",
    "validate_segments",
]


class ValidationError(ValueError):
    """Raised when an input violates a structural invariant."""


class BioTag(enum.IntEnum):
    O = 0
    I = 1
    B = 2


O, I, B = BioTag.O, BioTag.I, BioTag.B

_NUM_TAGS = len(BioTag)


def _as_tag_array(tags) -> np.ndarray:
    if isinstance(tags, TagSequence):
        return tags.tags
    arr = np.asarray(tags, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= _NUM_TAGS):
        bad = int(arr[(arr < 0) | (arr >= _NUM_TAGS)][0])
        raise ValidationError(f"invalid tag code {bad}; expected 0 (O), 1 (I) or 2 (B)")
    return arr.astype(np.uint8)


@dataclass(frozen=True, eq=False)
class TagSequence:
    """Per-frame BIO labels of one sequence.

    ``tags`` is stored as a read-only ``uint8`` array holding the integer codes
    of :class:`BioTag`.
    """

    tags: np.ndarray
    frame_rate_hz: float = 50.0

    def __post_init__(self):
        arr = _as_tag_array(self.tags).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "tags", arr)
        if not self.frame_rate_hz > 0:
            raise ValidationError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")

    def __len__(self) -> int:
        return int(self.tags.shape[0])

    def __iter__(self):
        return (BioTag(int(t)) for t in self.tags)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return TagSequence(self.tags[idx], self.frame_rate_hz)
        return BioTag(int(self.tags[idx]))

    def __eq__(self, other) -> bool:
        if isinstance(other, TagSequence):
            return np.array_equal(self.tags, other.tags)
        try:
            return np.array_equal(self.tags, _as_tag_array(other))
        except (ValidationError, TypeError, ValueError):
            return NotImplemented

    def __repr__(self) -> str:
        return f"TagSequence({''.join(BioTag(int(t)).name for t in self.tags)!r})"

    @classmethod
    def from_string(cls, text: str, frame_rate_hz: float = 50.0) -> "TagSequence":
        """Build from a compact string such as ``"OBIIO"`` (whitespace/commas ignored)."""
        codes = [BioTag[c].value for c in text if c not in " ,"]
        return cls(np.asarray(codes, dtype=np.uint8), frame_rate_hz)


@dataclass(frozen=True, order=True)
class Segment:
    """Inclusive frame span ``[start, end]`` of one sign."""

    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValidationError(f"invalid segment [{self.start}, {self.end}]")

    def __len__(self) -> int:
        return self.end - self.start + 1

    def iou(self, other: "Segment") -> float:
        inter = min(self.end, other.end) - max(self.start, other.start) + 1
        if inter <= 0:
            return 0.0
        union = len(self) + len(other) - inter
        return inter / union


def validate_segments(segments: Sequence[Segment], num_frames: int | None = None) -> None:
    """Check that segments are sorted, pairwise disjoint and (optionally) inside ``[0, num_frames)``."""
    prev = None
    for seg in segments:
        if prev is not None and seg.start <= prev.end:
            raise ValidationError(f"segments {prev} and {seg} overlap or are out of order")
        if num_frames is not None and seg.end >= num_frames:
            raise ValidationError(f"segment {seg} ends beyond frame count {num_frames}")
        prev = seg


@dataclass(frozen=True)
class GlossAnnotation:
    segments: tuple[Segment, ...] = ()
    gloss_ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "gloss_ids", tuple(str(g) for g in self.gloss_ids))
        if len(self.segments) != len(self.gloss_ids):
            raise ValidationError(
                f"{len(self.segments)} segments but {len(self.gloss_ids)} gloss ids"
            )
        validate_segments(self.segments)

    def __len__(self) -> int:
        return len(self.segments)

    def clip(self, start: int, stop: int) -> "GlossAnnotation":
        """Restrict to frames ``[start, stop)`` and shift to window-local indices."""
        segs, ids = [], []
        for seg, gid in zip(self.segments, self.gloss_ids):
            lo, hi = max(seg.start, start), min(seg.end, stop - 1)
            if lo <= hi:
                segs.append(Segment(lo - start, hi - start))
                ids.append(gid)
        return GlossAnnotation(tuple(segs), tuple(ids))


def segments_from_tags(tags, orphan_policy: str = "promote") -> list[Segment]:
    """Decode a BIO sequence into sign segments.

    A segment opens at every ``B`` and extends through the following ``I``
    frames. An ``I`` run with no preceding ``B`` (an orphan) opens a segment
    at its first frame under ``"promote"`` and is dropped under ``"discard"``.
    """
    if orphan_policy not in ("promote", "discard"):
        raise ValueError(f"unknown orphan_policy {orphan_policy!r}")
    arr = _as_tag_array(tags)
    segments: list[Segment] = []
    start = -1
    # `start` is -1 outside a segment and -2 inside a discarded orphan run
    for t, code in enumerate(arr):
        if code == B:
            if start >= 0:
                segments.append(Segment(start, t - 1))
            start = t
        elif code == I:
            if start == -1:
                start = t if orphan_policy == "promote" else -2
        else:
            if start >= 0:
                segments.append(Segment(start, t - 1))
            start = -1
    if start >= 0:
        segments.append(Segment(start, len(arr) - 1))
    return segments


def tags_from_segments(segments: Iterable[Segment], num_frames: int,
                       frame_rate_hz: float = 50.0) -> TagSequence:
    """Encode sorted, disjoint segments as a length-``num_frames`` BIO sequence."""
    segments = list(segments)
    validate_segments(segments, num_frames)
    arr = np.zeros(num_frames, dtype=np.uint8)
    for seg in segments:
        arr[seg.start] = B
        arr[seg.start + 1:seg.end + 1] = I
    return TagSequence(arr, frame_rate_hz)


def collapse_for_ctc(tags) -> list[BioTag]:
    """CTC target of a tag sequence, with ``O`` acting as the blank.

    Repeats are merged before blanks are dropped (the usual CTC collapse), so
    two one-frame signs separated by a pause give ``[B, B]``.
    """
    arr = _as_tag_array(tags)
    if arr.size == 0:
        return []
    keep = np.ones(arr.size, dtype=bool)
    keep[1:] = arr[1:] != arr[:-1]
    arr = arr[keep]
    return [BioTag(int(c)) for c in arr[arr != O]]
