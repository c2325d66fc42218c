"""Training losses: symmetric contrastive matching over embedding batches,
per-segment binary and categorical cross-entropies, and their weighted blend."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import Tensor

PROB_FLOOR = 1e-12

DEFAULT_LAMBDA_EVENT = 0.3
DEFAULT_LAMBDA_CLASS = 0.7


@dataclass
class ContrastiveBatch:
    """Paired L2-normalized image/audio embeddings with a log-temperature."""

    z_img: Tensor    # (B, De)
    z_aud: Tensor    # (B, De)
    log_tau: Tensor  # scalar; tau = exp(log_tau)

    def __post_init__(self):
        if self.z_img.shape != self.z_aud.shape or self.z_img.data.ndim != 2:
            raise nk.ShapeError(
                f"embedding shapes must match: {self.z_img.shape} vs {self.z_aud.shape}")
        for name, z in (("z_img", self.z_img), ("z_aud", self.z_aud)):
            norms = np.linalg.norm(z.data, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                worst = int(np.argmax(np.abs(norms - 1.0)))
                raise ValueError(
                    f"{name} rows must be L2-normalized; row {worst} has norm {norms[worst]:.6g}")


def init_log_tau(tau: float = 0.07) -> Tensor:
    """Trainable temperature, stored in log space so tau stays positive."""
    return Tensor(np.log(tau), requires_grad=True)


def infonce(batch: ContrastiveBatch) -> Tensor:
    """Symmetric batch-matching loss.

    Scaled similarities S = Z_I Z_A^T / tau; the image-to-audio term is the
    mean over rows of -log softmax_row(S) on the diagonal, the audio-to-image
    term the same over columns; the total is their sum. Differentiable in
    both embedding sets and in log_tau.
    """
    b = batch.z_img.shape[0]
    inv_tau = nk.exp(nk.neg(batch.log_tau))
    sims = nk.mul(nk.matmul(batch.z_img, nk.transpose(batch.z_aud)), inv_tau)
    eye = nk.constant(np.eye(b))
    img_to_aud = nk.mul(nk.sum_all(nk.mul(eye, nk.log(nk.softmax_axis(sims, "rows"),
                                                      PROB_FLOOR))), -1.0 / b)
    aud_to_img = nk.mul(nk.sum_all(nk.mul(eye, nk.log(nk.softmax_axis(sims, "cols"),
                                                      PROB_FLOOR))), -1.0 / b)
    return nk.add(img_to_aud, aud_to_img)


def _as_event_column(e) -> np.ndarray:
    arr = np.asarray(e, dtype=np.float64).reshape(-1, 1)
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ValueError("event labels must be 0 or 1")
    return arr


def bce(alpha: Tensor, e) -> Tensor:
    """Mean binary cross-entropy of the event gate against 0/1 labels."""
    col = _as_event_column(e)
    if alpha.shape != col.shape:
        raise nk.ShapeError(f"gate shape {alpha.shape} vs labels {col.shape}")
    t_len = col.shape[0]
    pos = nk.mul(nk.constant(col), nk.log(alpha, PROB_FLOOR))
    neg = nk.mul(nk.constant(1.0 - col), nk.log(nk.add(nk.neg(alpha), 1.0), PROB_FLOOR))
    return nk.mul(nk.sum_all(nk.add(pos, neg)), -1.0 / t_len)


def _check_one_hot(y: np.ndarray) -> None:
    if y.ndim != 2 or not np.all((y == 0.0) | (y == 1.0)) or not np.all(y.sum(axis=1) == 1.0):
        raise ValueError("labels must be one-hot rows")


def ce(y_pred: Tensor, y) -> Tensor:
    """Mean categorical cross-entropy: -log of the predicted probability at
    the true class, probabilities floored at 1e-12."""
    y_arr = np.asarray(y, dtype=np.float64)
    _check_one_hot(y_arr)
    if y_pred.shape != y_arr.shape:
        raise nk.ShapeError(f"prediction shape {y_pred.shape} vs labels {y_arr.shape}")
    t_len = y_arr.shape[0]
    picked = nk.mul(nk.constant(y_arr), nk.log(y_pred, PROB_FLOOR))
    return nk.mul(nk.sum_all(picked), -1.0 / t_len)


def hybrid_loss(alpha: Tensor, e, y_pred: Tensor, y,
                lambda_event: float = DEFAULT_LAMBDA_EVENT,
                lambda_class: float = DEFAULT_LAMBDA_CLASS) -> Tensor:
    """Weighted blend of the event-gate BCE and the classification CE."""
    if lambda_event < 0 or lambda_class < 0:
        raise ValueError(f"loss weights must be >= 0, got ({lambda_event}, {lambda_class})")
    return nk.add(nk.mul(bce(alpha, e), lambda_event),
                  nk.mul(ce(y_pred, y), lambda_class))
