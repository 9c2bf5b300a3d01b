"""Train a small model on synthetic data, then tag and score held-out clips.

Takes under a minute on one CPU core. Run with ``python3 demos/03_train_small.py``.
"""

import time

from signseg.core import segments_from_tags
from signseg.data import SynthConfig, generate_synthetic, split_samples
from signseg.metrics import evaluate
from signseg.model import ModelConfig
from signseg.train import TrainConfig, predict, train

samples = generate_synthetic(SynthConfig(n_samples=60), seed=3)
splits = split_samples(len(samples), seed=3)
by_split = {k: [s for s, tag in zip(samples, splits) if tag == k] for k in ("train", "dev", "test")}
print({k: len(v) for k, v in by_split.items()}, "clips per split")

# a quarter-width model keeps the demo quick
model_cfg = ModelConfig(adapter_hidden=128, adapter_out=128, mixer_out=128,
                        feedforward_width=256, encoder_layers=2, attention_heads=4)
cfg = TrainConfig(max_epochs=20, seed=3)

# Expect a plateau near F1 0.7 for the first several epochs: O and I are easy,
# and B is a single frame at each onset. Segments already decode correctly in
# that phase because orphan I-runs are promoted. Frame F1 climbs once the
# model starts placing B.

start = time.perf_counter()
result = train(cfg, (by_split["train"], by_split["dev"]), model_cfg)
for rec in result.log:
    print(f"epoch {rec['epoch']}: loss {rec['train_loss']['total']:.3f}  "
          f"dev F1 {rec['dev']['frame_f1']:.3f}  lr {rec['lr']:.1e}")
print(f"best epoch {result.best_epoch} after {time.perf_counter() - start:.0f} s")

test = by_split["test"]
preds = predict(result.model, test, window=cfg.window, stride=cfg.stride, stats=result.stats)
report = evaluate(preds, {s.sample_id: s.labels for s in test})
print(f"test frame F1 {report.frame_f1:.3f}  mF1S {report.mf1s:.3f}  "
      f"segment ratio {report.segment_ratio:.2f}")

s = test[0]
print("first clip, annotated:", [(g.start, g.end) for g in segments_from_tags(s.labels)][:6])
print("first clip, predicted:", [(g.start, g.end) for g in segments_from_tags(preds[s.sample_id])][:6])
