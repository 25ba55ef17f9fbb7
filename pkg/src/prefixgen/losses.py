"""Training objectives: next-token cross-entropy and the triplet property hinge."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    at_loss: float
    pred_loss: float
    total: float
    w_pred: float


def shift_targets(ids: np.ndarray, pad_id: int) -> np.ndarray:
    """Targets for teacher forcing: ids moved one step left, PAD in the last slot."""
    ids = np.asarray(ids)
    tgt = np.full_like(ids, pad_id)
    tgt[..., :-1] = ids[..., 1:]
    return tgt


def autoregressive_loss(logits, targets, pad_id: int = 0) -> Tensor:
    """Mean over non-PAD positions of -log softmax(logits)[target].

    logits: (l, V) or (B, l, V); targets: matching integer array.
    """
    logits = nd.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise LengthMismatch(f"logits {logits.shape} do not match targets {targets.shape}")
    flat = nd.reshape(logits, (-1, logits.shape[-1]))
    return nd.cross_entropy(flat, targets.reshape(-1), ignore_index=pad_id)


def triplet_property_loss(c_hat, c, c_dot, mask=None) -> Tensor:
    """Mean over available properties of max((c_hat - c)^2 - (c_hat - c_dot)^2, 0).

    Only ``c_hat`` carries gradient; ``c`` (requested conditions) and ``c_dot``
    (properties of the generated molecule) are constants.
    """
    c_hat = nd.as_tensor(c_hat)
    dtype = c_hat.data.dtype
    c = np.asarray(c, dtype=np.float64)
    c_dot = np.asarray(c_dot, dtype=np.float64)
    if c.shape != c_hat.shape or c_dot.shape != c_hat.shape:
        raise LengthMismatch(f"shapes differ: {c_hat.shape}, {c.shape}, {c_dot.shape}")
    mask = np.ones(c_hat.shape, bool) if mask is None else np.asarray(mask, bool)
    # masked entries: put zeros so no NaN/None sneaks into arithmetic
    c = np.where(mask, np.nan_to_num(c), 0.0).astype(dtype)
    c_dot = np.where(mask, np.nan_to_num(c_dot), 0.0).astype(dtype)
    count = int(mask.sum())
    if count == 0:
        return nd.scale(nd.sum_(c_hat), 0.0)
    to_target = nd.square(nd.sub(c_hat, Tensor(c, dtype=dtype)))
    to_sample = nd.square(nd.sub(c_hat, Tensor(c_dot, dtype=dtype)))
    hinge = nd.maximum(nd.sub(to_target, to_sample), 0.0)
    hinge = nd.mul(hinge, Tensor(mask.astype(dtype), dtype=dtype))
    return nd.scale(nd.sum_(hinge), 1.0 / count)


def total_loss(at_loss: Tensor, pred_loss: Tensor, w_pred: float = 0.1) -> tuple[Tensor, LossBreakdown]:
    total = nd.add(at_loss, nd.scale(pred_loss, w_pred)) if w_pred else at_loss
    return total, LossBreakdown(at_loss.item(), pred_loss.item(), total.item(), float(w_pred))
