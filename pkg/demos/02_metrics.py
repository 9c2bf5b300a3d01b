"""Score a prediction against ground truth with every metric in the package.

Run with ``python3 demos/02_metrics.py``.
"""

from signseg.core import TagSequence, segments_from_tags
from signseg.metrics import MetricConfig, boundary_f1, evaluate, frame_f1, mf1b, mf1s, segment_ratio

gt = TagSequence.from_string("OBIIIOOBIIIIOOBIIO")
pred = TagSequence.from_string("OOBIIOOBIBIIOOBIII")   # late first onset, one extra split

f1, per_class = frame_f1(pred, gt, return_per_class=True)
print(f"frame F1 {f1:.4f}")
for name, scores in per_class.items():
    print(f"  {name}: " + "  ".join(f"{k} {v:.3f}" for k, v in scores.items()))

ps, gs = segments_from_tags(pred), segments_from_tags(gt)
print(f"segment ratio {segment_ratio(ps, gs):.3f}  ({len(ps)} predicted / {len(gs)} annotated)")
for t in MetricConfig().boundary_thresholds:
    print(f"boundary F1 within {t} frame(s): {boundary_f1(ps, gs, t):.3f}")
print(f"mF1B {mf1b(ps, gs):.4f}  mF1S {mf1s(ps, gs):.4f}")

# evaluate() pools a whole split and labels each sample.
report = evaluate({"clip": pred}, {"clip": gt})
print("per-sample:", report.samples[0].category, "| counts", report.counts)
