"""Frame-level and segment-level evaluation of BIO predictions."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import BioTag, Segment, TagSequence, ValidationError, segments_from_tags

CLASS_NAMES = ("O", "I", "B")


def _default_iou_thresholds():
    return tuple(round(0.40 + 0.05 * i, 2) for i in range(8))


@dataclass(frozen=True)
class MetricConfig:
    boundary_thresholds: tuple[int, ...] = (1, 2, 3, 4)
    iou_thresholds: tuple[float, ...] = field(default_factory=_default_iou_thresholds)
    boundary_definition: str = "starts_only"  # or "starts_and_ends"
    orphan_policy: str = "promote"

    def __post_init__(self):
        object.__setattr__(self, "boundary_thresholds", tuple(int(t) for t in self.boundary_thresholds))
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))
        for name in ("boundary_thresholds", "iou_thresholds"):
            vals = getattr(self, name)
            if not vals or any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be nonempty and strictly increasing, got {vals}")
        if self.boundary_thresholds[0] < 0:
            raise ValueError("boundary thresholds must be >= 0")
        if self.boundary_definition not in ("starts_only", "starts_and_ends"):
            raise ValueError(f"unknown boundary_definition {self.boundary_definition!r}")


def _codes(tags) -> np.ndarray:
    return tags.tags if isinstance(tags, TagSequence) else TagSequence(tags).tags


def _check_lengths(pred, gt):
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction has {pred.size} frames, ground truth {gt.size}")


def _f1(tp, fp, fn) -> float:
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def confusion_counts(pred, gt) -> np.ndarray:
    """(3, 3) count matrix indexed ``[gt, pred]``."""
    p, g = _codes(pred), _codes(gt)
    _check_lengths(p, g)
    return np.bincount(3 * g.astype(np.int64) + p, minlength=9).reshape(3, 3)


def per_class_scores(conf: np.ndarray) -> dict[str, dict[str, float]]:
    """One-vs-rest precision/recall/F1 from a confusion matrix.

    A class absent from both prediction and ground truth scores 1 on every
    measure; an undefined precision or recall otherwise counts as 0.
    """
    out = {}
    for k, name in enumerate(CLASS_NAMES):
        tp = int(conf[k, k])
        fp = int(conf[:, k].sum()) - tp
        fn = int(conf[k, :].sum()) - tp
        if tp + fp + fn == 0:
            out[name] = {"precision": 1.0, "recall": 1.0, "f1": 1.0}
            continue
        out[name] = {"precision": tp / (tp + fp) if tp + fp else 0.0,
                     "recall": tp / (tp + fn) if tp + fn else 0.0,
                     "f1": _f1(tp, fp, fn)}
    return out


def frame_f1(pred, gt, return_per_class: bool = False):
    """Macro F1 over the O, I and B classes."""
    scores = per_class_scores(confusion_counts(pred, gt))
    macro = float(np.mean([scores[c]["f1"] for c in CLASS_NAMES]))
    return (macro, scores) if return_per_class else macro


def frame_iou(pred, gt) -> float:
    """IoU of the in-sign frame sets (tags other than O); 1 when both are empty."""
    p, g = _codes(pred), _codes(gt)
    _check_lengths(p, g)
    ps, gs = p != BioTag.O, g != BioTag.O
    union = int((ps | gs).sum())
    return 1.0 if union == 0 else int((ps & gs).sum()) / union


def _count(segs) -> int:
    if segs and isinstance(segs[0], (list, tuple)) and (not segs[0] or isinstance(segs[0][0], Segment)):
        return sum(len(s) for s in segs)
    return len(segs)


def segment_ratio(pred_segments, gt_segments) -> float:
    """Predicted over ground-truth segment count.

    Accepts one segment list per argument or a list of per-sample lists,
    which are pooled before dividing.
    """
    n_gt = _count(gt_segments)
    if n_gt == 0:
        raise ValidationError("segment_ratio is undefined with zero ground-truth segments")
    return _count(pred_segments) / n_gt


def boundaries(segments: Sequence[Segment], definition: str = "starts_only") -> list[int]:
    pos = [s.start for s in segments]
    if definition == "starts_and_ends":
        pos += [s.end + 1 for s in segments]
    elif definition != "starts_only":
        raise ValueError(f"unknown boundary definition {definition!r}")
    return sorted(pos)


def match_boundaries(pred: Sequence[int], gt: Sequence[int], threshold: int) -> int:
    """Size of a maximum one-to-one matching with ``|p - g| <= threshold``.

    A left-to-right sweep over both sorted lists is optimal here because the
    tolerance window is the same for every point.
    """
    pred, gt = sorted(pred), sorted(gt)
    i = j = matched = 0
    while i < len(pred) and j < len(gt):
        if pred[i] < gt[j] - threshold:
            i += 1
        elif gt[j] < pred[i] - threshold:
            j += 1
        else:
            matched += 1
            i += 1
            j += 1
    return matched


def boundary_f1(pred_segments, gt_segments, threshold: int,
                definition: str = "starts_only") -> float:
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    pb, gb = boundaries(pred_segments, definition), boundaries(gt_segments, definition)
    tp = match_boundaries(pb, gb, threshold)
    return _f1(tp, len(pb) - tp, len(gb) - tp)


def mf1b(pred_segments, gt_segments, config: MetricConfig = MetricConfig()) -> float:
    return float(np.mean([boundary_f1(pred_segments, gt_segments, t, config.boundary_definition)
                          for t in config.boundary_thresholds]))


def match_segments(pred_segments, gt_segments) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching by descending IoU over overlapping pairs.

    Ties go to the pair whose predicted segment starts earlier, then is
    shorter, then to the earlier and shorter ground-truth segment. Returns
    ``(pred_index, gt_index, iou)`` triples.
    """
    pairs = []
    for i, p in enumerate(pred_segments):
        for j, g in enumerate(gt_segments):
            iou = p.iou(g)
            if iou > 0:
                pairs.append((-iou, p.start, len(p), g.start, len(g), i, j))
    pairs.sort()
    used_p, used_g, out = set(), set(), []
    for neg_iou, *_, i, j in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            out.append((i, j, -neg_iou))
    return out


def segment_f1(pred_segments, gt_segments, iou_threshold: float) -> float:
    matches = match_segments(pred_segments, gt_segments)
    tp = sum(1 for *_, iou in matches if iou > iou_threshold)
    return _f1(tp, len(pred_segments) - tp, len(gt_segments) - tp)


def mf1s(pred_segments, gt_segments, config: MetricConfig = MetricConfig()) -> float:
    matches = match_segments(pred_segments, gt_segments)
    n_p, n_g = len(pred_segments), len(gt_segments)
    scores = []
    for tau in config.iou_thresholds:
        tp = sum(1 for *_, iou in matches if iou > tau)
        scores.append(_f1(tp, n_p - tp, n_g - tp))
    return float(np.mean(scores))


@dataclass
class SampleDiagnostics:
    sample_id: str
    num_frames: int
    pred_segments: int
    gt_segments: int
    category: str  # "matched" | "over" | "under"
    frame_f1: float
    iou: float


@dataclass
class EvalReport:
    frame_f1: float
    iou: float
    segment_ratio: float
    mf1b: float
    mf1s: float
    per_class: dict
    micro_f1: float
    samples: list[SampleDiagnostics]

    @property
    def counts(self) -> dict[str, int]:
        out = {"matched": 0, "over": 0, "under": 0}
        for s in self.samples:
            out[s.category] += 1
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["counts"] = self.counts
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "EvalReport":
        d = dict(d)
        d.pop("counts", None)
        d["samples"] = [SampleDiagnostics(**s) for s in d["samples"]]
        return cls(**d)


def _category(n_pred, n_gt):
    if n_pred > n_gt:
        return "over"
    if n_pred < n_gt:
        return "under"
    return "matched"


def evaluate(predictions: Mapping[str, object], ground_truth: Mapping[str, object],
             config: MetricConfig = MetricConfig()) -> EvalReport:
    """Aggregate metrics over a set of samples keyed by sample id.

    Frame metrics are pooled over the concatenated frames of all samples;
    segment counts, boundary and segment F1 are pooled over all segments
    (boundary and segment matches never cross samples).
    """
    if set(predictions) != set(ground_truth):
        missing = sorted(set(ground_truth) ^ set(predictions))
        raise ValidationError(f"prediction and ground-truth sample ids differ: {missing[:5]}")
    conf = np.zeros((3, 3), dtype=np.int64)
    inter = union = 0
    n_pred = n_gt = 0
    tp_b = {t: 0 for t in config.boundary_thresholds}
    nb_pred = nb_gt = 0
    tp_s = {t: 0 for t in config.iou_thresholds}
    diagnostics = []
    for sid in sorted(ground_truth):
        p, g = _codes(predictions[sid]), _codes(ground_truth[sid])
        conf += confusion_counts(p, g)
        ps, gs = p != BioTag.O, g != BioTag.O
        inter += int((ps & gs).sum())
        union += int((ps | gs).sum())
        pseg = segments_from_tags(p, config.orphan_policy)
        gseg = segments_from_tags(g, config.orphan_policy)
        n_pred += len(pseg)
        n_gt += len(gseg)
        pb = boundaries(pseg, config.boundary_definition)
        gb = boundaries(gseg, config.boundary_definition)
        nb_pred += len(pb)
        nb_gt += len(gb)
        for t in config.boundary_thresholds:
            tp_b[t] += match_boundaries(pb, gb, t)
        matches = match_segments(pseg, gseg)
        for tau in config.iou_thresholds:
            tp_s[tau] += sum(1 for *_, iou in matches if iou > tau)
        diagnostics.append(SampleDiagnostics(sid, int(g.size), len(pseg), len(gseg),
                                             _category(len(pseg), len(gseg)),
                                             frame_f1(p, g), frame_iou(p, g)))
    if n_gt == 0:
        raise ValidationError("evaluation set contains no ground-truth segments")
    scores = per_class_scores(conf)
    macro = float(np.mean([scores[c]["f1"] for c in CLASS_NAMES]))
    total = int(conf.sum())
    micro = float(np.trace(conf) / total) if total else 1.0
    return EvalReport(
        frame_f1=macro,
        iou=1.0 if union == 0 else inter / union,
        segment_ratio=n_pred / n_gt,
        mf1b=float(np.mean([_f1(tp_b[t], nb_pred - tp_b[t], nb_gt - tp_b[t])
                            for t in config.boundary_thresholds])),
        mf1s=float(np.mean([_f1(tp_s[t], n_pred - tp_s[t], n_gt - tp_s[t])
                            for t in config.iou_thresholds])),
        per_class=scores,
        micro_f1=micro,
        samples=diagnostics,
    )
