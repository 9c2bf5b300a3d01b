"""Feature ingestion, sample files, manifests, training windows and synthetic data."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import container
from .core import (B, GlossAnnotation, I, O, Segment, TagSequence, ValidationError,
                   tags_from_segments)

HAMER_DIM = 288
ANGLE_DIM = 104
HAND_POSE_SHAPE = (2, 15, 3, 3)
GLOBAL_ORIENT_SHAPE = (2, 3, 3)
_HAND_POSE_SIZE = int(np.prod(HAND_POSE_SHAPE))  # 270

SAMPLE_MAGIC = b"SGSG"
SPLITS = ("train", "dev", "test")

__all__ = [
    "HAMER_DIM", "ANGLE_DIM", "SampleFormatError", "MissingArrayError", "ShapeMismatchError",
    "NonFiniteError", "InvalidTagError", "ConfigError", "HandParams", "FeatureBundle", "Sample",
    "ManifestEntry", "Manifest", "Window", "SynthConfig", "flatten_hamer", "unflatten_hamer",
    "write_sample", "load_sample", "encode_sample", "decode_sample", "make_windows",
    "generate_synthetic", "split_samples", "FeatureStats",
]


class SampleFormatError(ValidationError):
    """A sample or manifest file does not conform to the container contract."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class MissingArrayError(SampleFormatError):
    pass


class ShapeMismatchError(SampleFormatError):
    pass


class NonFiniteError(SampleFormatError):
    pass


class InvalidTagError(SampleFormatError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HandParams:
    """Per-frame hand-mesh regression outputs for both hands."""

    hand_pose: np.ndarray
    global_orient: np.ndarray

    def __post_init__(self):
        for name, shape in (("hand_pose", HAND_POSE_SHAPE), ("global_orient", GLOBAL_ORIENT_SHAPE)):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatchError(name, f"expected shape {shape}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise NonFiniteError(name, "contains non-finite values")
            object.__setattr__(self, name, arr)


def flatten_hamer(params: HandParams) -> np.ndarray:
    """Flatten hand pose then global orientation in C order into a 288-vector.

    Hand pose fills positions 0..269 indexed by (hand, joint, row, col);
    global orientation fills 270..287 indexed by (hand, row, col).
    """
    if not isinstance(params, HandParams):
        params = HandParams(*params)
    return np.concatenate([params.hand_pose.reshape(-1), params.global_orient.reshape(-1)])


def unflatten_hamer(vec) -> HandParams:
    vec = np.asarray(vec)
    if vec.shape != (HAMER_DIM,):
        raise ShapeMismatchError("hamer", f"expected shape ({HAMER_DIM},), got {vec.shape}")
    return HandParams(vec[:_HAND_POSE_SIZE].reshape(HAND_POSE_SHAPE),
                      vec[_HAND_POSE_SIZE:].reshape(GLOBAL_ORIENT_SHAPE))


def _check_matrix(name: str, arr, width: int, rows: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ShapeMismatchError(name, f"expected (T, {width}), got {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ShapeMismatchError(name, f"expected {rows} rows, got {arr.shape[0]}")
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise NonFiniteError(name, "contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    sample_id: str
    hamer: np.ndarray
    angles: np.ndarray
    frame_rate_hz: float = 50.0

    def __post_init__(self):
        hamer = _check_matrix("hamer", self.hamer, HAMER_DIM)
        angles = _check_matrix("angles", self.angles, ANGLE_DIM, rows=hamer.shape[0])
        object.__setattr__(self, "hamer", hamer)
        object.__setattr__(self, "angles", angles)
        if not self.frame_rate_hz > 0:
            raise SampleFormatError("frame_rate_hz", f"must be positive, got {self.frame_rate_hz}")

    @property
    def num_frames(self) -> int:
        return int(self.hamer.shape[0])

    def __eq__(self, other):
        if not isinstance(other, FeatureBundle):
            return NotImplemented
        return (self.sample_id == other.sample_id and self.frame_rate_hz == other.frame_rate_hz
                and np.array_equal(self.hamer, other.hamer)
                and np.array_equal(self.angles, other.angles))


@dataclass(frozen=True, eq=False)
class Sample:
    features: FeatureBundle
    labels: Optional[TagSequence] = None
    glosses: Optional[GlossAnnotation] = None

    def __post_init__(self):
        T = self.features.num_frames
        if self.labels is not None:
            labels = self.labels
            if not isinstance(labels, TagSequence):
                labels = TagSequence(labels, self.features.frame_rate_hz)
                object.__setattr__(self, "labels", labels)
            if len(labels) != T:
                raise ShapeMismatchError("labels", f"length {len(labels)} != {T} frames")
        if self.glosses is not None:
            try:
                expected = tags_from_segments(self.glosses.segments, T)
            except ValidationError as exc:
                raise SampleFormatError("glosses", str(exc)) from exc
            if self.labels is not None and expected != self.labels:
                raise SampleFormatError("glosses", "gloss segments disagree with labels")

    @property
    def sample_id(self) -> str:
        return self.features.sample_id

    @property
    def num_frames(self) -> int:
        return self.features.num_frames

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.features == other.features and self.labels == other.labels
                and self.glosses == other.glosses)


# ---------------------------------------------------------------------------
# sample files

def encode_sample(sample: Sample) -> bytes:
    f = sample.features
    arrays = {"hamer": f.hamer.astype("<f4"), "angles": f.angles.astype("<f4")}
    if sample.labels is not None:
        arrays["labels"] = sample.labels.tags.astype("|u1")
    meta = {"sample_id": f.sample_id, "T": f.num_frames, "frame_rate_hz": f.frame_rate_hz}
    if sample.glosses is not None:
        meta["glosses"] = [{"start": s.start, "end": s.end, "gloss_id": g}
                           for s, g in zip(sample.glosses.segments, sample.glosses.gloss_ids)]
    return container.encode(SAMPLE_MAGIC, arrays, meta)


def decode_sample(blob: bytes) -> Sample:
    try:
        arrays, meta = container.decode(blob, SAMPLE_MAGIC)
    except container.ContainerError as exc:
        raise SampleFormatError("container", str(exc)) from exc
    for key in ("sample_id", "T", "frame_rate_hz"):
        if key not in meta:
            raise SampleFormatError(key, "missing from header")
    T = int(meta["T"])
    for name in ("hamer", "angles"):
        if name not in arrays:
            raise MissingArrayError(name, "array missing")
        if arrays[name].dtype != np.dtype("<f4"):
            raise SampleFormatError(name, f"expected float32, got {arrays[name].dtype}")
    hamer = _check_matrix("hamer", arrays["hamer"], HAMER_DIM, rows=T)
    angles = _check_matrix("angles", arrays["angles"], ANGLE_DIM, rows=T)
    features = FeatureBundle(str(meta["sample_id"]), hamer, angles, float(meta["frame_rate_hz"]))
    labels = None
    if "labels" in arrays:
        raw = arrays["labels"]
        if raw.shape != (T,):
            raise ShapeMismatchError("labels", f"expected ({T},), got {raw.shape}")
        if raw.size and raw.max() > int(B):
            raise InvalidTagError("labels", f"unknown tag code {int(raw.max())}")
        labels = TagSequence(raw, features.frame_rate_hz)
    glosses = None
    if meta.get("glosses") is not None:
        try:
            glosses = GlossAnnotation(
                tuple(Segment(int(g["start"]), int(g["end"])) for g in meta["glosses"]),
                tuple(str(g["gloss_id"]) for g in meta["glosses"]))
        except (KeyError, TypeError, ValidationError) as exc:
            raise SampleFormatError("glosses", f"malformed gloss table: {exc}") from exc
    return Sample(features, labels, glosses)


def write_sample(sample: Sample, path) -> None:
    Path(path).write_bytes(encode_sample(sample))


def load_sample(path) -> Sample:
    return decode_sample(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    path: str
    split: str
    T: int


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise SampleFormatError("entries", f"duplicate sample_id {dup!r}")
        for e in self.entries:
            if e.split not in SPLITS:
                raise SampleFormatError("split", f"{e.sample_id}: unknown split {e.split!r}")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def load_split(self, name: str) -> list[Sample]:
        return [load_sample(self.resolve(e)) for e in self.split(name)]

    def check_paths(self) -> None:
        for e in self.entries:
            if not self.resolve(e).is_file():
                raise SampleFormatError("path", f"{e.sample_id}: {self.resolve(e)} does not exist")

    def to_json(self) -> dict:
        return {"version": 1, "entries": [
            {"sample_id": e.sample_id, "path": e.path, "split": e.split, "T": e.T}
            for e in self.entries]}

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path, check_paths: bool = True) -> "Manifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            entries = [ManifestEntry(str(e["sample_id"]), str(e["path"]), str(e["split"]), int(e["T"]))
                       for e in doc["entries"]]
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise SampleFormatError("manifest", f"{path}: {exc}") from exc
        manifest = cls(entries, path.parent)
        if check_paths:
            manifest.check_paths()
        return manifest


def split_samples(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> list[str]:
    """Seeded train/dev/test assignment by sample index."""
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    if n >= 3:
        n_dev = max(n_dev, 1)
        n_train = min(n_train, n - n_dev - 1)
    labels = np.array(["test"] * n, dtype=object)
    order = np.random.default_rng(seed).permutation(n)
    labels[order[:n_train]] = "train"
    labels[order[n_train:n_train + n_dev]] = "dev"
    return list(labels)


# ---------------------------------------------------------------------------
# windows

@dataclass(frozen=True, eq=False)
class Window:
    """A fixed-length slice of a sample, zero-padded on the right when short."""

    sample_id: str
    offset: int
    length: int
    hamer: np.ndarray
    angles: np.ndarray
    pad_mask: np.ndarray  # True on padded frames
    labels: Optional[np.ndarray] = None
    glosses: Optional[GlossAnnotation] = None

    @property
    def padded(self) -> bool:
        return bool(self.pad_mask.any())

    @property
    def size(self) -> int:
        return int(self.pad_mask.shape[0])


def window_offsets(num_frames: int, window: int, stride: int) -> list[int]:
    if num_frames <= window:
        return [0]
    offsets = list(range(0, num_frames - window + 1, stride))
    if offsets[-1] != num_frames - window:
        offsets.append(num_frames - window)
    return offsets


def make_windows(sample: Sample, window: int = 512, stride: int = 384) -> list[Window]:
    """Cut a sample into windows that cover every frame.

    ``window`` is rounded up to an even number so that it survives the
    model's factor-2 downsampling. The last window is right-aligned with the
    end of the sequence; a sequence shorter than the window yields a single
    padded window.
    """
    if window < 2 or not 1 <= stride <= window:
        raise ValueError(f"need window >= 2 and 1 <= stride <= window, got {window}, {stride}")
    window += window % 2
    T = sample.num_frames
    f = sample.features
    out = []
    for off in window_offsets(T, window, stride):
        n = min(window, T - off)
        pad = window - n
        mask = np.zeros(window, dtype=bool)
        mask[n:] = True
        hamer = np.pad(f.hamer[off:off + n], ((0, pad), (0, 0)))
        angles = np.pad(f.angles[off:off + n], ((0, pad), (0, 0)))
        labels = None
        if sample.labels is not None:
            labels = np.pad(sample.labels.tags[off:off + n], (0, pad)).astype(np.uint8)
        glosses = sample.glosses.clip(off, off + n) if sample.glosses is not None else None
        out.append(Window(f.sample_id, off, n, hamer, angles, mask, labels, glosses))
    return out


# ---------------------------------------------------------------------------
# normalization

@dataclass
class FeatureStats:
    """Per-dimension mean/std of each stream, estimated on the train split."""

    hamer_mean: np.ndarray
    hamer_std: np.ndarray
    angles_mean: np.ndarray
    angles_std: np.ndarray

    @classmethod
    def fit(cls, samples: Sequence[Sample], eps: float = 1e-6) -> "FeatureStats":
        h = np.concatenate([s.features.hamer for s in samples]).astype(np.float64)
        a = np.concatenate([s.features.angles for s in samples]).astype(np.float64)
        return cls(h.mean(0).astype(np.float32), np.maximum(h.std(0), eps).astype(np.float32),
                   a.mean(0).astype(np.float32), np.maximum(a.std(0), eps).astype(np.float32))

    def apply(self, hamer: np.ndarray, angles: np.ndarray):
        return ((hamer - self.hamer_mean) / self.hamer_std,
                (angles - self.angles_mean) / self.angles_std)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"stats.{f.name}": getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_arrays(cls, arrays) -> Optional["FeatureStats"]:
        keys = [f"stats.{f.name}" for f in fields(cls)]
        if not all(k in arrays for k in keys):
            return None
        return cls(*(arrays[k] for k in keys))


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SynthConfig:
    """Parameters of the synthetic stand-in corpus.

    Durations are drawn uniformly from the inclusive integer ranges and then
    rounded up to a multiple of ``onset_alignment``.
    """

    n_samples: int = 250
    t_min: int = 300
    t_max: int = 300
    sign_len: tuple[int, int] = (8, 20)
    pause_len: tuple[int, int] = (2, 6)
    n_glosses: int = 20
    separation: float = 1.0
    noise: float = 0.25
    frame_rate_hz: float = 50.0
    onset_alignment: int = 2

    def __post_init__(self):
        self.sign_len = tuple(int(v) for v in self.sign_len)
        self.pause_len = tuple(int(v) for v in self.pause_len)

    def validate(self) -> None:
        if self.n_samples < 0:
            raise ConfigError(f"n_samples must be >= 0, got {self.n_samples}")
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError(f"need 1 <= t_min <= t_max, got {self.t_min}, {self.t_max}")
        for name in ("sign_len", "pause_len"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} must satisfy 1 <= min <= max, got {(lo, hi)}")
        if self.sign_len[0] > self.t_min:
            raise ConfigError(f"minimum sign length {self.sign_len[0]} exceeds t_min {self.t_min}")
        if self.n_glosses < 1:
            raise ConfigError("n_glosses must be >= 1")
        if not self.separation > 0:
            raise ConfigError(f"separation must be > 0, got {self.separation}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.onset_alignment < 1:
            raise ConfigError("onset_alignment must be >= 1")


@dataclass(frozen=True)
class Prototypes:
    rest_hamer: np.ndarray
    sign_hamer: np.ndarray      # (n_glosses, 288)
    down_angles: np.ndarray
    raised_angles: np.ndarray


def make_prototypes(config: SynthConfig, rng: np.random.Generator) -> Prototypes:
    d = config.separation
    return Prototypes(
        rest_hamer=d * rng.standard_normal(HAMER_DIM),
        sign_hamer=d * rng.standard_normal((config.n_glosses, HAMER_DIM)),
        down_angles=d * rng.standard_normal(ANGLE_DIM),
        raised_angles=d * rng.standard_normal(ANGLE_DIM),
    )


def _draw_len(rng, bounds, align):
    n = int(rng.integers(bounds[0], bounds[1] + 1))
    return -(-n // align) * align


def _plant_segments(rng, T, config: SynthConfig) -> list[Segment]:
    align = config.onset_alignment
    min_sign = config.sign_len[0]
    segments, t = [], _draw_len(rng, config.pause_len, align)
    while T - t >= min_sign:
        n = min(_draw_len(rng, config.sign_len, align), T - t)
        segments.append(Segment(t, t + n - 1))
        t += n + _draw_len(rng, config.pause_len, align)
    return segments


def generate_synthetic(config: SynthConfig, seed: int, return_prototypes: bool = False):
    """Deterministic synthetic corpus of alternating pause/sign spans.

    Pause frames sit near a resting hand-shape and a hands-down pose; sign
    frames sit near the hand-shape prototype of their gloss and a
    hands-raised pose. Isotropic Gaussian noise of scale ``config.noise`` is
    added to every row.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    protos = make_prototypes(config, rng)
    samples = []
    for i in range(config.n_samples):
        T = int(rng.integers(config.t_min, config.t_max + 1))
        segments = _plant_segments(rng, T, config)
        gloss_idx = rng.integers(0, config.n_glosses, size=len(segments))
        hamer = np.tile(protos.rest_hamer, (T, 1))
        angles = np.tile(protos.down_angles, (T, 1))
        for seg, g in zip(segments, gloss_idx):
            hamer[seg.start:seg.end + 1] = protos.sign_hamer[g]
            angles[seg.start:seg.end + 1] = protos.raised_angles
        hamer += config.noise * rng.standard_normal(hamer.shape)
        angles += config.noise * rng.standard_normal(angles.shape)
        features = FeatureBundle(f"synth_{seed}_{i:05d}", hamer.astype(np.float32),
                                 angles.astype(np.float32), config.frame_rate_hz)
        labels = tags_from_segments(segments, T, config.frame_rate_hz)
        glosses = GlossAnnotation(tuple(segments), tuple(f"G{g:03d}" for g in gloss_idx))
        samples.append(Sample(features, labels, glosses))
    return (samples, protos) if return_prototypes else samples


def write_dataset(samples: Sequence[Sample], out_dir, seed: int) -> Manifest:
    """Write sample files plus ``manifest.json`` with a seeded 80/10/10 split."""
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    splits = split_samples(len(samples), seed)
    entries = []
    for sample, split in zip(samples, splits):
        rel = os.path.join("samples", f"{sample.sample_id}.sgs")
        write_sample(sample, out_dir / rel)
        entries.append(ManifestEntry(sample.sample_id, rel, split, sample.num_frames))
    manifest = Manifest(entries, out_dir)
    manifest.write(out_dir / "manifest.json")
    return manifest
