"""Training objective: weighted NLL, soft-morphology boundary term, role-swap alignment."""

from __future__ import annotations

import numpy as np

from . import autograd as ag

IGNORE = 255
LOG_CLAMP = 1e-12
MAX_FG_WEIGHT = 20.0
PSEUDO_THRESHOLD = 0.5
UNIFORM_MASK_VALUE = 0.5


def check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    bad = ~np.isin(y, (0, 1, IGNORE))
    if bad.any():
        raise ValueError(f"label map holds values outside {{0, 1, {IGNORE}}}: "
                         f"{np.unique(y[bad])[:5]}")
    return y.astype(np.int64)


def class_weights(y) -> np.ndarray:
    """Background weight 1, foreground ``min(|bg| / |fg|, 20)``."""
    y = check_labels(y)
    fg = np.count_nonzero(y == 1)
    bg = np.count_nonzero(y == 0)
    return np.array([1.0, MAX_FG_WEIGHT if fg == 0 else min(bg / fg, MAX_FG_WEIGHT)])


def nll_weighted(pred, y, w=(1.0, 1.0)) -> ag.Tensor:
    """Class-weighted NLL of ``pred [B,2,H,W]`` averaged over non-ignored pixels."""
    pred = ag.as_tensor(pred)
    y = check_labels(y)
    if pred.shape[0] != y.shape[0] or pred.shape[2:] != y.shape[1:]:
        raise ValueError(f"prediction {pred.shape} does not match labels {y.shape}")
    b, i, j = np.nonzero(y != IGNORE)
    if b.size == 0:
        return ag.Tensor(0.0)
    cls = y[b, i, j]
    p = pred[b, cls, i, j]
    weights = np.asarray(w, dtype=np.float64)[cls]
    return -ag.sum(ag.log(ag.clamp_min(p, LOG_CLAMP)) * weights) * (1.0 / b.size)


def soft_boundary(mask, theta: int) -> ag.Tensor:
    """Dilation minus erosion over a ``(2 theta + 1)`` window, replicate padded."""
    if theta < 1:
        raise ValueError("theta must be >= 1")
    k = 2 * theta + 1
    return ag.maxpool2d(mask, k) - ag.minpool2d(mask, k)


def boundary_loss(pred_fg, y_fg, theta0: int = 3, theta: int = 5) -> ag.Tensor:
    """Mean squared gap between the predicted and ground-truth boundary bands."""
    pred_fg = ag.as_tensor(pred_fg)
    y_fg = np.asarray(y_fg, dtype=np.float64).reshape(pred_fg.shape)
    diff = soft_boundary(pred_fg, theta0) - soft_boundary(y_fg, theta)
    return ag.mean(diff * diff)


def fg_target(y) -> np.ndarray:
    """Foreground indicator ``[B,1,H,W]``; ignored pixels count as background."""
    y = check_labels(y)
    return (y == 1).astype(np.float64)[:, None]


def pseudo_mask(pred_fg) -> np.ndarray:
    """Binarised query prediction, or a uniform mask when nothing is positive."""
    v = ag.as_tensor(pred_fg).value

    def compute():
        m = (v > PSEUDO_THRESHOLD).astype(np.float64)
        for b in range(m.shape[0]):
            if not m[b].any():
                m[b] = UNIFORM_MASK_VALUE
        return m

    return ag.pinned(compute)


def segmentation_loss(pred, y, w=None, theta0: int = 3, theta: int = 5):
    """``(L_prim, L_b)`` for a soft prediction against labels."""
    w = class_weights(y) if w is None else w
    prim = nll_weighted(pred, y, w)
    b = boundary_loss(ag.as_tensor(pred)[:, 1:2], fg_target(y), theta0, theta)
    return prim, b


def align_loss(model, episode, pred_q, features=None) -> ag.Tensor:
    """Role-swapped loss: the binarised query prediction becomes the support mask.

    ``model`` provides ``encode(image)`` and ``predict(F_s, F_q, M_s)``;
    ``features`` may carry the already computed ``(F_s, F_q)``.
    """
    if features is None:
        features = model.encode(episode.I_s), model.encode(episode.I_q)
    F_s, F_q = features
    pred_q = ag.as_tensor(pred_q)
    m_tilde = pseudo_mask(pred_q[:, 1])
    pred_s, _ = model.predict(F_q, F_s, m_tilde)
    prim, b = segmentation_loss(pred_s, episode.M_s)
    return prim + b


def total_loss(prim, b, align):
    return prim + b + align
