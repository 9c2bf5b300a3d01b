"""Joint frame-level cross-entropy and CTC objective.

The CTC term treats ``O`` as the blank and scores the collapsed B/I sequence
of a window. The forward-backward recursion is implemented here in log space
with NumPy; :class:`CTCFunction` exposes it to autograd.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import BioTag, collapse_for_ctc

BLANK = int(BioTag.O)
NUM_CLASSES = 3

__all__ = [
    "CTCInfeasibleError",
    "LossBreakdown",
    "cross_entropy",
    "ctc_loss",
    "ctc_grad",
    "ctc_forward_backward",
    "CTCFunction",
    "combined_loss",
    "class_weights_from_labels",
]


class CTCInfeasibleError(ValueError):
    """The target cannot be emitted in the available number of frames."""


def _prepare(log_probs, target, pad_mask):
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[1] != NUM_CLASSES:
        raise ValueError(f"log_probs must be (T, {NUM_CLASSES}), got {lp.shape}")
    valid = np.ones(lp.shape[0], dtype=bool)
    if pad_mask is not None:
        valid = ~np.asarray(pad_mask, dtype=bool)
        if valid.shape != (lp.shape[0],):
            raise ValueError("pad_mask length does not match log_probs")
    labels = [int(c) for c in target]
    if any(c not in (int(BioTag.I), int(BioTag.B)) for c in labels):
        raise ValueError(f"CTC targets must be over {{B, I}}, got {labels}")
    T = int(valid.sum())
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    if len(labels) + repeats > T:
        raise CTCInfeasibleError(
            f"target of length {len(labels)} ({repeats} repeats) needs "
            f"{len(labels) + repeats} frames, only {T} available")
    return lp[valid], valid, labels


def _extend(labels):
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    # skip transition s-2 -> s allowed onto a non-blank that differs from ext[s-2]
    skip = np.zeros(ext.size, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return ext, skip


def _lse(*terms):
    out = terms[0]
    for t in terms[1:]:
        out = np.logaddexp(out, t)
    return out


def _shift(x, k):
    """``x`` moved ``k`` places right (k > 0) or left (k < 0), filled with -inf."""
    out = np.full_like(x, -np.inf)
    if k > 0:
        out[k:] = x[:-k]
    else:
        out[:k] = x[-k:]
    return out


def _forward(lp, ext, skip):
    T, S = lp.shape[0], ext.size
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    emit = lp[:, ext]
    for t in range(1, T):
        prev = alpha[t - 1]
        jump = np.where(skip, _shift(prev, 2), -np.inf)
        alpha[t] = _lse(prev, _shift(prev, 1), jump) + emit[t]
    return alpha


def _backward(lp, ext, skip):
    # beta[t, s]: log-probability of frames t+1..T-1 given state s at frame t
    T, S = lp.shape[0], ext.size
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    emit = lp[:, ext]
    skip_from = np.zeros_like(skip)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        jump = np.where(skip_from, _shift(nxt, -2), -np.inf)
        beta[t] = _lse(nxt, _shift(nxt, -1), jump)
    return beta


def _log_likelihood(alpha):
    last = alpha[-1]
    return _lse(last[-1], last[-2]) if last.size > 1 else last[-1]


def ctc_loss(log_probs, target: Sequence[int], pad_mask=None) -> float:
    """Negative log-likelihood of ``target`` under per-frame ``log_probs``.

    Args:
        log_probs: (T, 3) rowwise log-softmax scores; class ``O`` is the blank.
        target: collapsed B/I sequence, e.g. from :func:`collapse_for_ctc`.
        pad_mask: optional boolean (T,), True on frames to exclude.

    Raises:
        CTCInfeasibleError: fewer unpadded frames than the target requires.
    """
    lp, _, labels = _prepare(log_probs, target, pad_mask)
    if lp.shape[0] == 0:
        return 0.0
    ext, skip = _extend(labels)
    return float(-_log_likelihood(_forward(lp, ext, skip)))


def ctc_forward_backward(log_probs, target, pad_mask=None):
    """Return ``(loss, grad)`` where ``grad`` is d loss / d log_probs, shape (T, 3).

    The gradient treats every entry of ``log_probs`` as free: at each valid
    frame it is minus the posterior occupancy of each class. Padded rows get
    zero gradient.
    """
    lp, valid, labels = _prepare(log_probs, target, pad_mask)
    grad = np.zeros((valid.size, NUM_CLASSES))
    if lp.shape[0] == 0:
        return 0.0, grad
    ext, skip = _extend(labels)
    alpha = _forward(lp, ext, skip)
    beta = _backward(lp, ext, skip)
    log_p = _log_likelihood(alpha)
    posterior = np.exp(alpha + beta - log_p)
    occ = np.zeros((lp.shape[0], NUM_CLASSES))
    for k in range(NUM_CLASSES):
        occ[:, k] = posterior[:, ext == k].sum(axis=1)
    grad[valid] = -occ
    return float(-log_p), grad


def ctc_grad(log_probs, target, pad_mask=None) -> np.ndarray:
    return ctc_forward_backward(log_probs, target, pad_mask)[1]


class CTCFunction(torch.autograd.Function):
    """Autograd bridge: per-window CTC loss from (T, 3) log-probs."""

    @staticmethod
    def forward(ctx, log_probs, target, pad_mask):
        loss, grad = ctc_forward_backward(log_probs.detach().cpu().double().numpy(), target,
                                          None if pad_mask is None else pad_mask.cpu().numpy())
        ctx.save_for_backward(torch.from_numpy(grad).to(log_probs))
        return log_probs.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_output):
        (grad,) = ctx.saved_tensors
        return grad_output * grad, None, None


def _as_logits(x) -> torch.Tensor:
    # array-likes are taken at double precision; tensors keep their dtype
    if torch.is_tensor(x):
        return x if x.is_floating_point() else x.double()
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def cross_entropy(logits, targets, class_weights=None, pad_mask=None) -> torch.Tensor:
    """Weighted mean of -w[y] log softmax(logits)[y] over unpadded frames.

    Works on (T, 3) or (N, T, 3) logits; the mean is taken over every
    unpadded frame of the batch, normalized by the summed weights.
    """
    logits = _as_logits(logits)
    targets = torch.as_tensor(np.asarray(targets, dtype=np.int64) if not torch.is_tensor(targets)
                              else targets, device=logits.device).long()
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets {tuple(targets.shape)} do not match logits {tuple(logits.shape)}")
    if class_weights is None:
        w = torch.ones(NUM_CLASSES, dtype=logits.dtype, device=logits.device)
    else:
        w = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)
    valid = torch.ones_like(targets, dtype=torch.bool)
    if pad_mask is not None:
        valid = ~torch.as_tensor(pad_mask, device=logits.device).bool()
    if not valid.any():
        raise ValueError("cross_entropy needs at least one unpadded frame")
    nll = -F.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    fw = w[targets] * valid.to(logits.dtype)
    denom = fw.sum()
    if denom <= 0:
        raise ValueError("all included frames carry zero class weight")
    return (fw * nll).sum() / denom


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    ctc: torch.Tensor
    total: torch.Tensor
    weights: tuple[float, float]
    ctc_skipped: int = 0

    def as_dict(self) -> dict:
        return {"ce": float(self.ce), "ctc": float(self.ctc), "total": float(self.total),
                "ctc_skipped": self.ctc_skipped}


def combined_loss(logits, targets, ctc_targets=None, weights=(1.0, 1.0), class_weights=None,
                  pad_mask=None, ctc_reduction: str = "sum") -> LossBreakdown:
    """Cross-entropy plus CTC, ``total = w_ce * ce + w_ctc * ctc``.

    ``logits`` is (T, 3) or (N, T, 3) at the downsampled rate and ``targets``
    the matching downsampled tags. ``ctc_targets`` gives one collapsed target
    per window; when omitted it is derived from the unpadded ``targets``. The
    CTC term is the mean over windows of -log P(target); with
    ``ctc_reduction="frames"`` each window's value is first divided by its
    number of unpadded frames, putting it on the per-frame scale of the
    cross-entropy. Windows whose target
    cannot fit are skipped and counted in ``ctc_skipped``; if every window is
    skipped the CTC term is zero.
    """
    w_ce, w_ctc = float(weights[0]), float(weights[1])
    if ctc_reduction not in ("sum", "frames"):
        raise ValueError(f"unknown ctc_reduction {ctc_reduction!r}")
    if w_ce < 0 or w_ctc < 0:
        raise ValueError(f"loss weights must be nonnegative, got {weights}")
    logits = _as_logits(logits)
    batched = logits.dim() == 3
    L = logits if batched else logits.unsqueeze(0)
    tgt = torch.as_tensor(np.asarray(targets, dtype=np.int64) if not torch.is_tensor(targets)
                          else targets).long().reshape(L.shape[:2])
    if pad_mask is None:
        mask = torch.zeros(L.shape[:2], dtype=torch.bool)
    else:
        mask = torch.as_tensor(pad_mask).bool().reshape(L.shape[:2])

    ce = cross_entropy(L, tgt.to(L.device), class_weights, mask.to(L.device))

    zero = L.new_zeros(())
    ctc_terms, skipped = [], 0
    if w_ctc > 0:
        log_probs = F.log_softmax(L, dim=-1)
        for n in range(L.shape[0]):
            if ctc_targets is not None:
                target = ctc_targets[n] if batched else ctc_targets
            else:
                target = collapse_for_ctc(tgt[n][~mask[n]].cpu().numpy())
            try:
                term = CTCFunction.apply(log_probs[n], tuple(int(c) for c in target), mask[n])
            except CTCInfeasibleError:
                skipped += 1
                continue
            if ctc_reduction == "frames":
                term = term / int((~mask[n]).sum())
            ctc_terms.append(term)
    ctc = torch.stack(ctc_terms).mean() if ctc_terms else zero
    total = w_ce * ce + w_ctc * ctc
    return LossBreakdown(ce, ctc, total, (w_ce, w_ctc), skipped)


def class_weights_from_labels(label_arrays, mode: str = "uniform") -> np.ndarray:
    """Uniform weights, or inverse class frequency normalized to mean 1."""
    if mode == "uniform":
        return np.ones(NUM_CLASSES)
    if mode != "inverse_frequency":
        raise ValueError(f"unknown class weight mode {mode!r}")
    counts = np.zeros(NUM_CLASSES)
    for arr in label_arrays:
        counts += np.bincount(np.asarray(arr, dtype=np.int64), minlength=NUM_CLASSES)[:NUM_CLASSES]
    counts = np.maximum(counts, 1.0)
    w = counts.sum() / counts
    return w * NUM_CLASSES / w.sum()
