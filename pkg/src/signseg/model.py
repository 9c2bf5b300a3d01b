"""Adapters, temporal downsampling, mixer and transformer encoder.

Data flow for one batch of windows::

    hamer (N,T,288) --adapter--> (N,T,512) --downsample--> (N,T/2,512) --+
                                                                          +--concat--> (N,T/2,1024)
    angles (N,T,104) --adapter--> (N,T,512) --downsample--> (N,T/2,512) --+
        --mixer--> (N,T/2,d) --+pos--> encoder --> head --> (N,T/2,3)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import container
from .core import B, I, O, TagSequence, ValidationError
from .data import ANGLE_DIM, HAMER_DIM, FeatureBundle, FeatureStats

CHECKPOINT_MAGIC = b"SGCK"
FEATURE_WIDTHS = {"hamer": HAMER_DIM, "angles": ANGLE_DIM}
# fixed stream order inside the concatenated representation
STREAM_ORDER = ("hamer", "angles")


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    adapter_hidden: int = 512
    adapter_out: int = 512
    mixer_out: int = 512
    encoder_layers: int = 4
    attention_heads: int = 8
    feedforward_width: int = 1024
    dropout: float = 0.1
    downsample_factor: int = 2
    downsample_mode: str = "mean"          # "mean" | "stride"
    positional_encoding: str = "sinusoidal"  # "sinusoidal" | "learned"
    max_window: int = 512
    feature_set: tuple[str, ...] = ("angles", "hamer")
    use_adapters: bool = True
    use_mixer: bool = True
    mixer_type: str = "mlp"                # "mlp" | "cross_attention"
    projection_seed: int = 0

    def __post_init__(self):
        self.feature_set = tuple(sorted(set(self.feature_set)))
        self.validate()

    def validate(self) -> None:
        if self.downsample_factor != 2:
            raise ModelConfigError("downsample_factor is fixed at 2")
        if not self.feature_set or not set(self.feature_set) <= set(FEATURE_WIDTHS):
            raise ModelConfigError(f"feature_set must be a nonempty subset of "
                                   f"{sorted(FEATURE_WIDTHS)}, got {self.feature_set}")
        if self.mixer_out % self.attention_heads:
            raise ModelConfigError(f"mixer_out {self.mixer_out} not divisible by "
                                   f"attention_heads {self.attention_heads}")
        for name in ("adapter_hidden", "adapter_out", "mixer_out", "encoder_layers",
                     "attention_heads", "feedforward_width", "max_window"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be positive")
        if not 0 <= self.dropout < 1:
            raise ModelConfigError("dropout must be in [0, 1)")
        if self.downsample_mode not in ("mean", "stride"):
            raise ModelConfigError(f"unknown downsample_mode {self.downsample_mode!r}")
        if self.positional_encoding not in ("sinusoidal", "learned"):
            raise ModelConfigError(f"unknown positional_encoding {self.positional_encoding!r}")
        if self.mixer_type not in ("mlp", "cross_attention"):
            raise ModelConfigError(f"unknown mixer_type {self.mixer_type!r}")
        if self.mixer_type == "cross_attention" and len(self.feature_set) != 2:
            raise ModelConfigError("cross_attention mixer needs both feature streams")
        if self.mixer_type == "cross_attention" and self.adapter_out % self.attention_heads:
            raise ModelConfigError("cross_attention mixer needs adapter_out divisible by heads")

    def to_json(self) -> dict:
        d = asdict(self)
        d["feature_set"] = list(self.feature_set)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# rate conversion

def downsample(x, pad_mask=None, mode: str = "mean"):
    """Halve the time axis of (T, D) or (N, T, D) features.

    ``mean`` averages non-overlapping frame pairs, ignoring padded frames;
    a pair with a single valid frame passes it through. ``stride`` keeps the
    first valid frame of each pair. Returns ``(x_ds, pad_mask_ds)`` for
    tensors; NumPy input without a mask returns just the array.
    """
    as_numpy = not torch.is_tensor(x)
    t = torch.as_tensor(x)
    squeeze = t.dim() == 2
    if squeeze:
        t = t.unsqueeze(0)
    N, T, D = t.shape
    if T < 1:
        raise ValueError("downsample needs at least one frame")
    valid = torch.ones(N, T, dtype=torch.bool, device=t.device)
    if pad_mask is not None:
        valid = ~torch.as_tensor(pad_mask, device=t.device).bool().reshape(N, T)
    if T % 2:
        t = F.pad(t, (0, 0, 0, 1))
        valid = F.pad(valid, (0, 1), value=False)
    pairs = t.reshape(N, -1, 2, D)
    vpairs = valid.reshape(N, -1, 2)
    count = vpairs.sum(-1)
    if mode == "mean":
        w = vpairs.to(t.dtype).unsqueeze(-1)
        out = (pairs * w).sum(2) / count.clamp(min=1).unsqueeze(-1).to(t.dtype)
    elif mode == "stride":
        first = torch.where(vpairs[..., 0], 0, 1)
        out = torch.gather(pairs, 2, first[..., None, None].expand(N, -1, 1, D)).squeeze(2)
        out = out * (count > 0).unsqueeze(-1).to(t.dtype)
    else:
        raise ValueError(f"unknown downsample mode {mode!r}")
    ds_mask = count == 0
    if squeeze:
        out, ds_mask = out[0], ds_mask[0]
    if as_numpy:
        out = out.numpy()
        return out if pad_mask is None else (out, ds_mask.numpy())
    return out, ds_mask


def downsample_labels(tags) -> TagSequence:
    """Half-rate labels: each frame pair becomes B if either is B, else I if either is I."""
    rate = tags.frame_rate_hz / 2 if isinstance(tags, TagSequence) else 25.0
    arr = tags.tags if isinstance(tags, TagSequence) else np.asarray(tags, dtype=np.uint8)
    arr = arr.astype(np.uint8)
    if arr.size % 2:
        arr = np.append(arr, np.uint8(O))
    # codes are ordered O < I < B, so priority is the pairwise maximum
    return TagSequence(arr.reshape(-1, 2).max(axis=1), rate)


def upsample_predictions(tags_ds, num_frames: int) -> TagSequence:
    """Expand half-rate tags back to ``num_frames`` frames.

    Every tag covers its two source frames, except ``B`` which becomes
    ``[B, I]`` so a sign begins exactly once. A trailing odd frame keeps the
    tag of its half-rate step.
    """
    arr = tags_ds.tags if isinstance(tags_ds, TagSequence) else np.asarray(tags_ds, dtype=np.uint8)
    if arr.shape[0] != (num_frames + 1) // 2:
        raise ValidationError(f"{arr.shape[0]} half-rate tags cannot cover {num_frames} frames")
    out = np.repeat(arr.astype(np.uint8), 2)
    out[1::2][arr == B] = I
    rate = tags_ds.frame_rate_hz * 2 if isinstance(tags_ds, TagSequence) else 50.0
    return TagSequence(out[:num_frames], rate)


# ---------------------------------------------------------------------------
# network

class MLP(nn.Sequential):
    """Three affine layers with GELU; ``final_activation`` adds one after the last."""

    def __init__(self, d_in, d_hidden, d_out, dropout=0.0, final_activation=True):
        layers = [nn.Linear(d_in, d_hidden), nn.GELU(), nn.Dropout(dropout),
                  nn.Linear(d_hidden, d_hidden), nn.GELU(), nn.Dropout(dropout),
                  nn.Linear(d_hidden, d_out)]
        if final_activation:
            layers.append(nn.GELU())
        super().__init__(*layers)


class FrozenProjection(nn.Module):
    """Fixed random linear map, used in place of a learned adapter."""

    def __init__(self, d_in, d_out, seed):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("weight", torch.randn(d_out, d_in, generator=g) / math.sqrt(d_in))

    def forward(self, x):
        return x @ self.weight.T


class CrossAttentionMixer(nn.Module):
    def __init__(self, width, heads, d_out, dropout):
        super().__init__()
        self.h_from_a = nn.MultiheadAttention(width, heads, dropout=dropout, batch_first=True)
        self.a_from_h = nn.MultiheadAttention(width, heads, dropout=dropout, batch_first=True)
        self.out = nn.Linear(2 * width, d_out)

    def forward(self, streams, pad_mask):
        h, a = streams
        h2 = h + self.h_from_a(h, a, a, key_padding_mask=pad_mask, need_weights=False)[0]
        a2 = a + self.a_from_h(a, h, h, key_padding_mask=pad_mask, need_weights=False)[0]
        return self.out(torch.cat([h2, a2], dim=-1))


def sinusoidal_encoding(length, width, dtype=torch.float32):
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, width, 2, dtype=torch.float64) * (-math.log(10000.0) / width))
    pe = torch.zeros(length, width, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : width // 2]
    return pe.to(dtype)


class SignSegmenter(nn.Module):
    """Per-frame BIO classifier over hand-shape and body-angle streams."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.streams = [s for s in STREAM_ORDER if s in config.feature_set]
        self.adapters = nn.ModuleDict()
        for i, name in enumerate(self.streams):
            d_in = FEATURE_WIDTHS[name]
            if config.use_adapters:
                self.adapters[name] = MLP(d_in, config.adapter_hidden, config.adapter_out,
                                          config.dropout)
            else:
                self.adapters[name] = FrozenProjection(d_in, config.adapter_out,
                                                       config.projection_seed + i)
        concat = config.adapter_out * len(self.streams)
        if config.use_mixer and config.mixer_type == "cross_attention":
            self.mixer = CrossAttentionMixer(config.adapter_out, config.attention_heads,
                                             config.mixer_out, config.dropout)
        elif config.use_mixer:
            self.mixer = MLP(concat, config.mixer_out, config.mixer_out, config.dropout,
                             final_activation=False)
        else:
            self.mixer = nn.Linear(concat, config.mixer_out)
        max_ds = (config.max_window + 1) // 2
        if config.positional_encoding == "learned":
            self.positions = nn.Parameter(0.02 * torch.randn(max_ds, config.mixer_out))
        else:
            self.register_buffer("positions", sinusoidal_encoding(max_ds, config.mixer_out),
                                 persistent=False)
        layer = nn.TransformerEncoderLayer(
            config.mixer_out, config.attention_heads, config.feedforward_width, config.dropout,
            activation="gelu", batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, config.encoder_layers,
                                             enable_nested_tensor=False)
        self.norm = nn.LayerNorm(config.mixer_out)
        self.head = nn.Linear(config.mixer_out, 3)

    def adapt(self, hamer, angles):
        """Rowwise adapters; returns one (N, T, adapter_out) tensor per active stream."""
        inputs = {"hamer": hamer, "angles": angles}
        out = []
        for name in self.streams:
            x = inputs[name]
            if x is None or x.shape[-1] != FEATURE_WIDTHS[name]:
                got = None if x is None else x.shape[-1]
                raise ValidationError(f"{name}: expected width {FEATURE_WIDTHS[name]}, got {got}")
            out.append(self.adapters[name](x))
        return out

    def forward(self, hamer, angles, pad_mask=None):
        """Logits of shape (N, ceil(T/2), 3) plus the half-rate pad mask."""
        ref = hamer if hamer is not None else angles
        squeeze = ref.dim() == 2
        if squeeze:
            hamer = None if hamer is None else hamer.unsqueeze(0)
            angles = None if angles is None else angles.unsqueeze(0)
            pad_mask = None if pad_mask is None else pad_mask.unsqueeze(0)
            ref = hamer if hamer is not None else angles
        N, T = ref.shape[:2]
        if T > self.config.max_window:
            raise ValidationError(f"sequence of {T} frames exceeds max_window "
                                  f"{self.config.max_window}")
        if pad_mask is None:
            pad_mask = torch.zeros(N, T, dtype=torch.bool, device=ref.device)
        streams = self.adapt(hamer, angles)
        ds = [downsample(s, pad_mask, self.config.downsample_mode) for s in streams]
        ds_mask = ds[0][1]
        streams = [x for x, _ in ds]
        if isinstance(self.mixer, CrossAttentionMixer):
            mixed = self.mixer(streams, ds_mask)
        else:
            mixed = self.mixer(torch.cat(streams, dim=-1))
        L = mixed.shape[1]
        x = mixed + self.positions[:L].to(mixed.dtype)
        x = self.encoder(x, src_key_padding_mask=ds_mask)
        logits = self.head(self.norm(x))
        logits = logits.masked_fill(ds_mask.unsqueeze(-1), 0.0)
        if squeeze:
            return logits[0], ds_mask[0]
        return logits, ds_mask


@dataclass
class Logits:
    values: np.ndarray   # (T_ds, 3)
    pad_mask: np.ndarray  # (T_ds,)

    def argmax(self) -> TagSequence:
        return TagSequence(self.values.argmax(axis=-1).astype(np.uint8))


def _bundle_tensors(features: FeatureBundle, model: SignSegmenter, stats=None):
    hamer, angles = features.hamer, features.angles
    if stats is not None:
        hamer, angles = stats.apply(hamer, angles)
    dtype = next(model.parameters()).dtype
    return (torch.as_tensor(np.asarray(hamer), dtype=dtype),
            torch.as_tensor(np.asarray(angles), dtype=dtype))


def adapt(features: FeatureBundle, model: SignSegmenter, stats=None):
    """Pair of (T, adapter_out) arrays, one per active stream."""
    hamer, angles = _bundle_tensors(features, model, stats)
    with torch.no_grad():
        out = model.adapt(hamer, angles)
    return tuple(o.numpy() for o in out)


def forward(features: FeatureBundle, model: SignSegmenter, stats=None) -> Logits:
    """Inference-mode forward pass over one whole (short) sequence."""
    hamer, angles = _bundle_tensors(features, model, stats)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits, mask = model(hamer, angles)
    finally:
        model.train(was_training)
    return Logits(logits.numpy(), mask.numpy())


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: SignSegmenter, stats: Optional[FeatureStats] = None,
                    meta: Optional[dict] = None, extra_arrays: Optional[dict] = None) -> None:
    arrays = {f"param.{k}": v.detach().cpu().numpy()
              for k, v in model.state_dict().items()}
    if stats is not None:
        arrays.update(stats.arrays())
    if extra_arrays:
        arrays.update(extra_arrays)
    header = {"model_config": model.config.to_json(), "meta": meta or {}}
    container.write(path, CHECKPOINT_MAGIC, arrays, header)


def load_checkpoint(path):
    """Return ``(model, stats, meta, arrays)``; ``arrays`` holds any extra tensors."""
    try:
        arrays, header = container.read(path, CHECKPOINT_MAGIC)
    except container.ContainerError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    config = ModelConfig.from_json(header["model_config"])
    model = SignSegmenter(config)
    state = {k[len("param."):]: torch.from_numpy(v) for k, v in arrays.items()
             if k.startswith("param.")}
    model.load_state_dict(state)
    model.eval()
    stats = FeatureStats.from_arrays(arrays)
    extra = {k: v for k, v in arrays.items()
             if not k.startswith("param.") and not k.startswith("stats.")}
    return model, stats, header.get("meta", {}), extra
