"""Training loop, sliding-window prediction and the feature/module ablation."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .core import GlossAnnotation, TagSequence, collapse_for_ctc, tags_from_segments
from .data import FeatureStats, Manifest, Sample, Window, make_windows
from .metrics import EvalReport, MetricConfig, evaluate
from .model import (ModelConfig, SignSegmenter, downsample_labels, load_checkpoint,
                    save_checkpoint, upsample_predictions)
from .objective import class_weights_from_labels, combined_loss

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainResult", "TrainingError", "train", "predict", "run_ablation",
           "ABLATION_ROWS"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    scheduler_patience: int = 5
    scheduler_factor: float = 0.5
    clip_norm: float = 0.1
    early_stop_patience: int = 12
    batch_size: int = 4
    max_epochs: int = 100
    seed: int = 0
    loss_weights: tuple[float, float] = (1.0, 1.0)
    class_weights: str = "uniform"  # "uniform" | "inverse_frequency"
    ctc_reduction: str = "frames"   # "frames" | "sum"
    feature_set: tuple[str, ...] = ("angles", "hamer")
    use_adapters: bool = True
    use_mixer: bool = True
    window: int = 128
    stride: int = 96
    normalize: bool = False
    # stop as soon as dev frame F1 reaches this value; None trains to early stop / max_epochs
    target_dev_f1: Optional[float] = None

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.feature_set = tuple(sorted(set(self.feature_set)))
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler_factor must be in (0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not self.feature_set:
            raise ValueError("feature_set must be nonempty")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0:
            raise ValueError("loss_weights must be two nonnegative numbers")
        if self.class_weights not in ("uniform", "inverse_frequency"):
            raise ValueError(f"unknown class_weights mode {self.class_weights!r}")
        if self.ctc_reduction not in ("frames", "sum"):
            raise ValueError(f"unknown ctc_reduction {self.ctc_reduction!r}")
        if self.target_dev_f1 is not None and not 0 <= self.target_dev_f1 <= 1:
            raise ValueError("target_dev_f1 must lie in [0, 1]")

    def model_config(self, base: Optional[ModelConfig] = None) -> ModelConfig:
        base = base or ModelConfig()
        window = self.window + self.window % 2
        return dataclasses.replace(base, feature_set=self.feature_set,
                                   use_adapters=self.use_adapters, use_mixer=self.use_mixer,
                                   max_window=max(base.max_window, window))

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        d["feature_set"] = list(self.feature_set)
        return d


@dataclass
class TrainResult:
    model: SignSegmenter
    stats: Optional[FeatureStats]
    log: list[dict]
    best_epoch: int
    best_dev_f1: float
    checkpoint: Optional[Path] = None


# ---------------------------------------------------------------------------
# batching

@dataclass
class _Prepared:
    window: Window
    ds_labels: np.ndarray
    ctc_target: tuple[int, ...]


def _ctc_target(win: Window) -> tuple[int, ...]:
    if win.glosses is not None:
        tags = tags_from_segments(win.glosses.segments, win.length)
    else:
        tags = TagSequence(win.labels[:win.length])
    return tuple(int(c) for c in collapse_for_ctc(downsample_labels(tags)))


def _prepare(samples: Sequence[Sample], config: TrainConfig) -> list[_Prepared]:
    out = []
    for s in samples:
        if s.labels is None:
            raise TrainingError(f"training sample {s.sample_id} has no labels")
        for win in make_windows(s, config.window, config.stride):
            out.append(_Prepared(win, downsample_labels(win.labels).tags, _ctc_target(win)))
    return out


def _stack(windows: Sequence[Window], stats: Optional[FeatureStats]):
    hamer = np.stack([w.hamer for w in windows])
    angles = np.stack([w.angles for w in windows])
    mask = np.stack([w.pad_mask for w in windows])
    if stats is not None:
        hamer, angles = stats.apply(hamer, angles)
        hamer[mask] = 0.0
        angles[mask] = 0.0
    return (torch.from_numpy(np.ascontiguousarray(hamer, dtype=np.float32)),
            torch.from_numpy(np.ascontiguousarray(angles, dtype=np.float32)),
            torch.from_numpy(mask))


def _global_grad_norm(params) -> float:
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    return float(torch.stack(norms).norm()) if norms else 0.0


# ---------------------------------------------------------------------------
# prediction

def predict(model, samples: Sequence[Sample], window: int = 128, stride: int = 96,
            stats: Optional[FeatureStats] = None, batch_size: int = 16) -> dict[str, TagSequence]:
    """Full-rate BIO tags for each sample, keyed by sample id.

    Sequences are cut into overlapping windows; each frame takes the
    prediction of the window whose center is nearest to it (earlier window on
    ties).
    """
    if isinstance(model, (str, Path)):
        model, stats, _, _ = load_checkpoint(model)
    was_training = model.training
    model.eval()
    out = {}
    try:
        for sample in samples:
            windows = make_windows(sample, window, stride)
            per_window = []
            for i in range(0, len(windows), batch_size):
                chunk = windows[i:i + batch_size]
                h, a, m = _stack(chunk, stats)
                with torch.no_grad():
                    logits, _ = model(h, a, m)
                ds_tags = logits.argmax(-1).numpy().astype(np.uint8)
                for w, tags in zip(chunk, ds_tags):
                    n_ds = (w.length + 1) // 2
                    per_window.append(upsample_predictions(tags[:n_ds], w.length).tags)
            T = sample.num_frames
            frames = np.arange(T)
            best = np.full(T, np.inf)
            result = np.zeros(T, dtype=np.uint8)
            for w, tags in zip(windows, per_window):
                center = w.offset + (w.length - 1) / 2
                span = slice(w.offset, w.offset + w.length)
                dist = np.abs(frames[span] - center)
                take = dist < best[span]
                result[span][take] = tags[take]
                best[span][take] = dist[take]
            out[sample.sample_id] = TagSequence(result, sample.features.frame_rate_hz)
    finally:
        model.train(was_training)
    return out


def evaluate_model(model, samples, config: TrainConfig, stats=None,
                   metric_config: MetricConfig = MetricConfig()) -> EvalReport:
    preds = predict(model, samples, config.window, config.stride, stats)
    return evaluate(preds, {s.sample_id: s.labels for s in samples}, metric_config)


# ---------------------------------------------------------------------------
# state persistence

def _optimizer_arrays(optimizer) -> tuple[dict, dict]:
    sd = optimizer.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"optim.{idx}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return arrays, {"param_groups": sd["param_groups"]}


def _restore_optimizer(optimizer, arrays, meta) -> None:
    state: dict = {}
    for name, val in arrays.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        t = torch.from_numpy(val.copy())
        state.setdefault(int(idx), {})[key] = t
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_train_state(path, model, optimizer, scheduler, best_state, stats, meta) -> None:
    arrays, opt_meta = _optimizer_arrays(optimizer)
    for k, v in best_state.items():
        arrays[f"best.{k}"] = v.detach().cpu().numpy()
    meta = dict(meta, optimizer=opt_meta, scheduler=scheduler.state_dict())
    save_checkpoint(path, model, stats, meta, arrays)


def _load_train_state(path):
    model, stats, meta, arrays = load_checkpoint(path)
    best_state = {k[len("best."):]: torch.from_numpy(v.copy()) for k, v in arrays.items()
                  if k.startswith("best.")}
    return model, stats, meta, arrays, best_state


# ---------------------------------------------------------------------------
# training

def _seed_epoch(seed: int, epoch: int) -> np.random.Generator:
    torch.manual_seed(seed * 1_000_003 + epoch)
    return np.random.default_rng([seed, epoch])


def train(config: TrainConfig, manifest: Manifest | tuple[Sequence[Sample], Sequence[Sample]],
          model_config: Optional[ModelConfig] = None, out_dir=None, resume=None,
          metric_config: MetricConfig = MetricConfig()) -> TrainResult:
    """Train on the train split, selecting the checkpoint with the best dev frame F1.

    ``manifest`` is either a :class:`Manifest` or a ``(train, dev)`` pair of
    sample lists. With ``out_dir`` set, ``best.sgck`` (best dev params),
    ``state.sgck`` (resumable state after the last epoch) and
    ``epochs.jsonl`` are written there. ``resume`` points at a
    ``state.sgck`` to continue from.
    """
    if isinstance(manifest, Manifest):
        train_samples, dev_samples = manifest.load_split("train"), manifest.load_split("dev")
    else:
        train_samples, dev_samples = manifest
    if not train_samples:
        raise TrainingError("train split is empty")
    if not dev_samples:
        raise TrainingError("dev split is empty")
    for s in dev_samples:
        if s.labels is None:
            raise TrainingError(f"dev sample {s.sample_id} has no labels")

    mconf = config.model_config(model_config)
    torch.manual_seed(config.seed)
    model = SignSegmenter(mconf)
    stats = FeatureStats.fit(train_samples) if config.normalize else None
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="max", factor=config.scheduler_factor,
        patience=config.scheduler_patience, threshold=0.0)

    prepared = _prepare(train_samples, config)
    class_weights = class_weights_from_labels([p.ds_labels[: (p.window.length + 1) // 2]
                                               for p in prepared], config.class_weights)

    start_epoch, log = 1, []
    best_f1, best_epoch, since_best = -1.0, 0, 0
    best_state = copy.deepcopy(model.state_dict())
    if resume is not None:
        r_model, r_stats, meta, arrays, best_state = _load_train_state(resume)
        model.load_state_dict(r_model.state_dict())
        stats = r_stats
        _restore_optimizer(optimizer, arrays, meta["optimizer"])
        scheduler.load_state_dict(meta["scheduler"])
        start_epoch = int(meta["epoch"]) + 1
        best_f1, best_epoch = float(meta["best_dev_f1"]), int(meta["best_epoch"])
        since_best = int(meta["since_best"])
        log = list(meta.get("log", []))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "epochs.jsonl"
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))

    for epoch in range(start_epoch, config.max_epochs + 1):
        if since_best >= config.early_stop_patience:
            break
        t0 = time.perf_counter()
        rng = _seed_epoch(config.seed, epoch)
        order = rng.permutation(len(prepared))
        model.train()
        sums = {"ce": 0.0, "ctc": 0.0, "total": 0.0}
        n_batches, ctc_skipped, max_norm = 0, 0, 0.0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [prepared[i] for i in order[start:start + config.batch_size]]
            h, a, m = _stack([p.window for p in batch], stats)
            logits, ds_mask = model(h, a, m)
            targets = torch.from_numpy(np.stack([p.ds_labels for p in batch]).astype(np.int64))
            loss = combined_loss(logits, targets, [p.ctc_target for p in batch],
                                 config.loss_weights, class_weights, ds_mask,
                                 config.ctc_reduction)
            if not torch.isfinite(loss.total):
                ids = sorted({p.window.sample_id for p in batch})
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} "
                                    f"(samples {ids}): {loss.as_dict()}")
            optimizer.zero_grad(set_to_none=True)
            loss.total.backward()
            torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
            max_norm = max(max_norm, _global_grad_norm(params))
            optimizer.step()
            for k in sums:
                sums[k] += float(getattr(loss, k).detach())
            ctc_skipped += loss.ctc_skipped
            n_batches += 1

        report = evaluate_model(model, dev_samples, config, stats, metric_config)
        lr = optimizer.param_groups[0]["lr"]
        improved = report.frame_f1 > best_f1
        if improved:
            best_f1, best_epoch, since_best = report.frame_f1, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
        scheduler.step(report.frame_f1)
        record = {
            "epoch": epoch,
            "train_loss": {k: v / n_batches for k, v in sums.items()} | {"ctc_skipped": ctc_skipped},
            "dev": {"frame_f1": report.frame_f1, "iou": report.iou,
                    "segment_ratio": report.segment_ratio, "mf1b": report.mf1b,
                    "mf1s": report.mf1s},
            "lr": lr,
            "max_grad_norm": max_norm,
            "best_dev_f1": best_f1,
            "wall_time_s": time.perf_counter() - t0,
        }
        log.append(record)
        logger.info("epoch %d loss %.4f dev F1 %.4f lr %.2e", epoch, record["train_loss"]["total"],
                    report.frame_f1, lr)
        if out_dir is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            meta = {"epoch": epoch, "best_dev_f1": best_f1, "best_epoch": best_epoch,
                    "since_best": since_best, "train_config": config.to_json(), "log": log}
            save_train_state(out_dir / "state.sgck", model, optimizer, scheduler, best_state,
                             stats, meta)
            if improved:
                _save_best(out_dir / "best.sgck", mconf, best_state, stats, config, best_epoch,
                           best_f1)
        if config.target_dev_f1 is not None and report.frame_f1 >= config.target_dev_f1:
            break

    best_model = SignSegmenter(mconf)
    best_model.load_state_dict(best_state)
    best_model.eval()
    ckpt = out_dir / "best.sgck" if out_dir is not None else None
    return TrainResult(best_model, stats, log, best_epoch, best_f1, ckpt)


def _save_best(path, mconf, state, stats, config, epoch, f1):
    model = SignSegmenter(mconf)
    model.load_state_dict(state)
    save_checkpoint(path, model, stats, {"epoch": epoch, "best_dev_f1": f1,
                                         "train_config": config.to_json()})


# ---------------------------------------------------------------------------
# ablation

ABLATION_ROWS = (
    ("angles", ("angles",), False, False),
    ("hamer", ("hamer",), False, False),
    ("angles+hamer", ("angles", "hamer"), False, False),
    ("angles+hamer+adapters", ("angles", "hamer"), True, False),
    ("angles+hamer+adapters+mixer", ("angles", "hamer"), True, True),
)


def run_ablation(base: TrainConfig, manifest, model_config: Optional[ModelConfig] = None,
                 out_dir=None, metric_config: MetricConfig = MetricConfig()) -> list[dict]:
    """Train the five feature/module configurations and evaluate each.

    Each row is evaluated on the test split when the manifest has one, else
    on dev. Every row reuses ``base.seed``.
    """
    if isinstance(manifest, Manifest):
        eval_samples = manifest.load_split("test") or manifest.load_split("dev")
    else:
        eval_samples = manifest[1]
    rows = []
    for name, features, adapters, mixer in ABLATION_ROWS:
        cfg = dataclasses.replace(base, feature_set=features, use_adapters=adapters,
                                  use_mixer=mixer)
        row_dir = Path(out_dir) / name if out_dir is not None else None
        result = train(cfg, manifest, model_config, row_dir, metric_config=metric_config)
        report = evaluate_model(result.model, eval_samples, cfg, result.stats, metric_config)
        rows.append({"name": name, "features": list(features), "adapters": adapters,
                     "mixer": mixer, "best_epoch": result.best_epoch,
                     "best_dev_f1": result.best_dev_f1, "report": report.to_json(),
                     "log": result.log})
    return rows
