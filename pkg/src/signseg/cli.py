"""Command-line entry point: ``signseg {synth,train,eval,predict,report}``.

Settings come from one JSON config document with the sections ``synth``,
``model``, ``train``, ``metrics`` and ``paths`` plus a top-level ``seed``.
Precedence, lowest to highest: built-in defaults, the config file,
``SIGNSEG_<SECTION>__<FIELD>`` environment variables, ``--set
section.field=value`` flags, then the dedicated flags (``--seed``, ``--out``,
``--epochs``). ``SIGNSEG_CONFIG``, ``SIGNSEG_SEED`` and ``SIGNSEG_OUT``
stand in for the matching flags.

Exit codes: 0 success, 1 usage error, 2 invalid input or config,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import TagSequence, ValidationError, segments_from_tags
from .data import Manifest, SynthConfig, generate_synthetic, load_sample, write_dataset
from .metrics import EvalReport, MetricConfig, evaluate
from .model import ModelConfig, load_checkpoint
from .train import TrainConfig, TrainingError, predict, run_ablation, train

logger = logging.getLogger("signseg")

ENV_PREFIX = "SIGNSEG_"
EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3

SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig,
            "metrics": MetricConfig}
CATEGORY_COLORS = {"matched": "tab:green", "over": "tab:red", "under": "tab:orange"}
TAG_COLORS = ["#e6e6e6", "#5b8fd6", "#17306b"]  # O, I, B


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass
class Paths:
    data: str = "data"
    manifest: Optional[str] = None
    runs: str = "runs"

    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.data) / "manifest.json"


@dataclass
class CliConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    paths: Paths = field(default_factory=Paths)

    def to_json(self) -> dict:
        return {"seed": self.seed,
                "synth": dataclasses.asdict(self.synth),
                "model": self.model.to_json(),
                "train": {k: v for k, v in self.train.to_json().items() if k != "seed"},
                "metrics": dataclasses.asdict(self.metrics),
                "paths": dataclasses.asdict(self.paths)}


def _merge(doc: dict, key_path: str, value) -> None:
    parts = key_path.split(".")
    if len(parts) == 1:
        if parts[0] != "seed":
            raise ValidationError(f"config key {key_path!r}: expected section.field")
        doc["seed"] = value
        return
    if len(parts) != 2:
        raise ValidationError(f"config key {key_path!r}: expected section.field")
    doc.setdefault(parts[0], {})
    if not isinstance(doc[parts[0]], dict):
        raise ValidationError(f"config section {parts[0]!r} must be an object")
    doc[parts[0]][parts[1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(doc: dict) -> CliConfig:
    """Validate a raw config document, naming the first unknown key path."""
    if not isinstance(doc, dict):
        raise ValidationError("config root must be a JSON object")
    allowed = set(SECTIONS) | {"paths", "seed"}
    for key in doc:
        if key not in allowed:
            raise ValidationError(f"unknown config key {key!r}")
    kwargs = {}
    section_types = dict(SECTIONS, paths=Paths)
    for name, cls in section_types.items():
        sub = doc.get(name, {})
        if not isinstance(sub, dict):
            raise ValidationError(f"config section {name!r} must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        if name == "train":
            # a single top-level seed drives both data generation and training
            known.discard("seed")
        for key in sub:
            if key not in known:
                raise ValidationError(f"unknown config key '{name}.{key}'")
        try:
            obj = cls(**sub)
            if hasattr(obj, "validate"):
                obj.validate()
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"config section {name!r}: {exc}") from exc
        kwargs[name] = obj
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ValidationError(f"seed must be a nonnegative integer, got {seed!r}")
    return CliConfig(seed=seed, **kwargs)


def load_config(path=None, overrides=(), environ=None) -> CliConfig:
    """Read the config file (if any) and apply env and ``--set`` overrides."""
    environ = os.environ if environ is None else environ
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, key = name[len(ENV_PREFIX):].split("__", 1)
        _merge(doc, f"{section.lower()}.{key.lower()}", _parse_value(environ[name]))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects section.field=value, got {item!r}")
        key, value = item.split("=", 1)
        _merge(doc, key.strip(), _parse_value(value))
    return build_config(doc)


# ---------------------------------------------------------------------------
# prediction files

def write_prediction(path: Path, sample_id: str, tags: TagSequence) -> None:
    segs = segments_from_tags(tags)
    doc = {"sample_id": sample_id, "num_frames": len(tags), "frame_rate_hz": tags.frame_rate_hz,
           "tags": "".join("OIB"[c] for c in tags.tags),
           "segments": [[s.start, s.end] for s in segs]}
    path.write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_predictions(directory) -> dict[str, TagSequence]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"prediction directory {directory} does not exist")
    out = {}
    for p in sorted(directory.glob("*.json")):
        try:
            doc = json.loads(p.read_text())
            tags = TagSequence.from_string(doc["tags"], float(doc.get("frame_rate_hz", 50.0)))
            sid = str(doc["sample_id"])
        except (KeyError, TypeError, json.JSONDecodeError, ValueError) as exc:
            raise ValidationError(f"{p}: malformed prediction file ({exc})") from exc
        if len(tags) != int(doc.get("num_frames", len(tags))):
            raise ValidationError(f"{p}: num_frames disagrees with the tag string")
        out[sid] = tags
    if not out:
        raise ValidationError(f"no prediction files in {directory}")
    return out


def _safe_name(sample_id: str) -> str:
    if not sample_id or "/" in sample_id or sample_id.startswith("."):
        raise ValidationError(f"sample id {sample_id!r} is not usable as a file name")
    return sample_id


# ---------------------------------------------------------------------------
# commands

def _manifest(args, cfg: CliConfig) -> Manifest:
    path = Path(args.manifest) if getattr(args, "manifest", None) else cfg.paths.manifest_path()
    if not path.is_file():
        raise ValidationError(f"manifest {path} does not exist")
    return Manifest.load(path)


def _dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_synth(args, cfg: CliConfig) -> int:
    out = Path(args.out or cfg.paths.data)
    samples = generate_synthetic(cfg.synth, cfg.seed)
    manifest = write_dataset(samples, out, cfg.seed)
    counts = {k: len(manifest.split(k)) for k in ("train", "dev", "test")}
    print(f"wrote {len(samples)} samples to {out} (train/dev/test = "
          f"{counts['train']}/{counts['dev']}/{counts['test']})")
    return EXIT_OK


def cmd_train(args, cfg: CliConfig) -> int:
    manifest = _manifest(args, cfg)
    out = Path(args.out or cfg.paths.runs)
    tconf = dataclasses.replace(cfg.train, seed=cfg.seed)
    if args.ablation:
        rows = run_ablation(tconf, manifest, cfg.model, out / "ablation", cfg.metrics)
        _dump(out / "ablation.json", {"rows": [{k: v for k, v in r.items() if k != "log"}
                                               for r in rows]})
        lines = [f"{'features':<14}{'adapters':>10}{'mixer':>8}{'F1':>9}{'IoU':>8}{'%':>8}"
                 f"{'mF1B':>8}{'mF1S':>8}"]
        for r in rows:
            rep = r["report"]
            lines.append(f"{'+'.join(r['features']):<14}{str(r['adapters']):>10}"
                         f"{str(r['mixer']):>8}{rep['frame_f1']:>9.4f}{rep['iou']:>8.4f}"
                         f"{rep['segment_ratio']:>8.3f}{rep['mf1b']:>8.4f}{rep['mf1s']:>8.4f}")
        (out / "ablation.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
        return EXIT_OK
    resume = Path(args.resume) if args.resume else None
    if resume is not None and not resume.is_file():
        raise ValidationError(f"resume state {resume} does not exist")
    result = train(tconf, manifest, cfg.model, out, resume, cfg.metrics)
    _dump(out / "config.json", cfg.to_json())
    print(f"best dev frame F1 {result.best_dev_f1:.4f} at epoch {result.best_epoch}; "
          f"checkpoint {result.checkpoint}")
    return EXIT_OK


def _checkpoint_windows(meta: dict, cfg: CliConfig) -> tuple[int, int]:
    tc = meta.get("train_config") or {}
    return int(tc.get("window", cfg.train.window)), int(tc.get("stride", cfg.train.stride))


def _predict_with_checkpoint(path, samples, cfg: CliConfig) -> dict[str, TagSequence]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint {path} does not exist")
    model, stats, meta, _ = load_checkpoint(path)
    window, stride = _checkpoint_windows(meta, cfg)
    return predict(model, samples, window, stride, stats)


def cmd_eval(args, cfg: CliConfig) -> int:
    if bool(args.checkpoint) == bool(args.predictions):
        raise UsageError("eval needs exactly one of --checkpoint or --predictions")
    manifest = _manifest(args, cfg)
    samples = manifest.load_split(args.split)
    if not samples:
        raise ValidationError(f"split {args.split!r} of the manifest is empty")
    gt = {s.sample_id: s.labels for s in samples}
    if any(v is None for v in gt.values()):
        raise ValidationError(f"split {args.split!r} contains unlabeled samples")
    if args.checkpoint:
        preds = _predict_with_checkpoint(args.checkpoint, samples, cfg)
    else:
        preds = load_predictions(args.predictions)
        preds = {k: v for k, v in preds.items() if k in gt}
    report = evaluate(preds, gt, cfg.metrics)
    out = Path(args.out or cfg.paths.runs) / "eval.json"
    _dump(out, report.to_json())
    print(f"frame_f1 {report.frame_f1:.4f}  iou {report.iou:.4f}  "
          f"segment_ratio {report.segment_ratio:.3f}  mf1b {report.mf1b:.4f}  "
          f"mf1s {report.mf1s:.4f}  -> {out}")
    return EXIT_OK


def cmd_predict(args, cfg: CliConfig) -> int:
    if args.inputs:
        samples = []
        for p in args.inputs:
            if not Path(p).is_file():
                raise ValidationError(f"sample file {p} does not exist")
            samples.append(load_sample(p))
    else:
        samples = _manifest(args, cfg).load_split(args.split)
    if not samples:
        raise ValidationError("no samples to predict")
    preds = _predict_with_checkpoint(args.checkpoint, samples, cfg)
    out = Path(args.out or Path(cfg.paths.runs) / "predictions")
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_prediction(out / f"{_safe_name(s.sample_id)}.json", s.sample_id, preds[s.sample_id])
    print(f"wrote {len(samples)} prediction files to {out}")
    return EXIT_OK


def _timeline(path: Path, sample_id: str, gt: TagSequence, pred: TagSequence, category: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import ListedColormap
    from matplotlib.patches import Patch

    fig, ax = plt.subplots(figsize=(10, 1.6))
    ax.imshow(np.stack([gt.tags, pred.tags]), aspect="auto", interpolation="nearest",
              cmap=ListedColormap(TAG_COLORS), vmin=0, vmax=2)
    ax.set_yticks([0, 1], ["GT", "pred"])
    ax.set_xlabel("frame")
    for spine in ax.spines.values():
        spine.set_edgecolor(CATEGORY_COLORS[category])
        spine.set_linewidth(3)
    ax.set_title(f"{sample_id}: {category} ({len(segments_from_tags(pred))} predicted / "
                 f"{len(segments_from_tags(gt))} annotated signs)",
                 color=CATEGORY_COLORS[category], fontsize=9)
    ax.legend(handles=[Patch(color=c, label=t) for t, c in zip("OIB", TAG_COLORS)],
              loc="upper left", bbox_to_anchor=(1.0, 1.0), fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _summary_figure(path: Path, report: EvalReport):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = report.counts
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 2.6))
    rows = [["frame F1", f"{report.frame_f1:.4f}"], ["IoU", f"{report.iou:.4f}"],
            ["segment ratio", f"{report.segment_ratio:.3f}"], ["mF1B", f"{report.mf1b:.4f}"],
            ["mF1S", f"{report.mf1s:.4f}"]]
    left.axis("off")
    left.table(cellText=rows, colLabels=["metric", "value"], loc="center")
    names = list(CATEGORY_COLORS)
    right.bar(names, [counts[n] for n in names], color=[CATEGORY_COLORS[n] for n in names])
    right.set_ylabel("samples")
    right.yaxis.get_major_locator().set_params(integer=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def summary_text(report: EvalReport) -> str:
    c = report.counts
    lines = ["metric          value",
             f"frame_f1        {report.frame_f1:.4f}",
             f"iou             {report.iou:.4f}",
             f"segment_ratio   {report.segment_ratio:.4f}",
             f"mf1b            {report.mf1b:.4f}",
             f"mf1s            {report.mf1s:.4f}",
             "",
             f"samples {len(report.samples)}: matched {c['matched']} (green), "
             f"over-segmented {c['over']} (red), under-segmented {c['under']} (orange)"]
    return "\n".join(lines) + "\n"


def cmd_report(args, cfg: CliConfig) -> int:
    if not args.eval and not args.predictions:
        raise UsageError("report needs --eval and/or --predictions")
    out = Path(args.out or Path(cfg.paths.runs) / "report")
    out.mkdir(parents=True, exist_ok=True)
    report = None
    if args.eval:
        p = Path(args.eval)
        if not p.is_file():
            raise ValidationError(f"eval report {p} does not exist")
        try:
            report = EvalReport.from_json(json.loads(p.read_text()))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{p}: malformed eval report ({exc})") from exc
    if args.predictions:
        preds = load_predictions(args.predictions)
        gt = {s.sample_id: s.labels for s in _manifest(args, cfg).load_split(args.split)}
        preds = {k: v for k, v in preds.items() if k in gt}
        if report is None:
            report = evaluate(preds, gt, cfg.metrics)
        categories = {d.sample_id: d.category for d in report.samples}
        timelines = out / "timelines"
        timelines.mkdir(exist_ok=True)
        ids = sorted(preds)[: args.max_samples] if args.max_samples else sorted(preds)
        for sid in ids:
            _timeline(timelines / f"{_safe_name(sid)}.png", sid, gt[sid], preds[sid],
                      categories.get(sid, "matched"))
    _summary_figure(out / "summary.png", report)
    text = summary_text(report)
    (out / "summary.txt").write_text(text)
    _dump(out / "summary.json", {"metrics": {k: getattr(report, k) for k in
                                             ("frame_f1", "iou", "segment_ratio", "mf1b", "mf1s")},
                                 "counts": report.counts})
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=os.environ.get(ENV_PREFIX + "CONFIG"),
                        help="JSON config file (env SIGNSEG_CONFIG)")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.FIELD=VALUE", help="override one config field")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = _Parser(prog="signseg", description="Sign segmentation with BIO tagging.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--manifest", help="dataset manifest (default: paths.manifest)")
    p.add_argument("--epochs", type=int, help="overrides train.max_epochs")
    p.add_argument("--resume", help="state.sgck to continue from")
    p.add_argument("--ablation", action="store_true", help="run the five-row feature/module grid")

    p = sub.add_parser("eval", parents=[common], help="score predictions against labels")
    p.add_argument("--checkpoint", help="model checkpoint to predict with")
    p.add_argument("--predictions", help="directory of prediction files")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))

    p = sub.add_parser("predict", parents=[common], help="tag sample files with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="*", help="sample files (default: a manifest split)")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))

    p = sub.add_parser("report", parents=[common], help="render timelines and a summary")
    p.add_argument("--eval", help="eval.json written by the eval command")
    p.add_argument("--predictions", help="directory of prediction files")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--max-samples", type=int, default=None)
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        seed = args.seed if args.seed is not None else os.environ.get(ENV_PREFIX + "SEED")
        if seed is not None:
            cfg.seed = int(seed)
        if args.out is None:
            args.out = os.environ.get(ENV_PREFIX + "OUT")
        if getattr(args, "epochs", None) is not None:
            cfg.train = dataclasses.replace(cfg.train, max_epochs=args.epochs)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"signseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ValueError, FileNotFoundError) as exc:
        print(f"signseg {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, OSError, RuntimeError) as exc:
        print(f"signseg {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
