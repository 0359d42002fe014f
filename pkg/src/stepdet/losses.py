"""Smooth-L1 localization and cross-entropy primitives shared by the heads and the trainer."""

from __future__ import annotations

import numpy as np

CE_EPS = 1e-12


def smooth_l1(d: np.ndarray) -> np.ndarray:
    a = np.abs(d)
    return np.where(a < 1.0, 0.5 * d * d, a - 0.5)


def smooth_l1_grad(d: np.ndarray) -> np.ndarray:
    # one-sided d/|d| at the kink |d| = 1
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


def loc_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Smooth-L1 summed over the 4 coordinates and averaged over unmasked frames.

    ``pred`` and ``target`` are ``(K, 4)``; ``mask`` selects the frames that
    count (padding and frames without ground truth are excluded).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[-1] != 4:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    per_frame = smooth_l1(pred - target).sum(axis=-1)
    if mask is None:
        return float(per_frame.mean())
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    return float(per_frame[mask].sum() / n) if n else 0.0


def loc_loss_grad(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    g = smooth_l1_grad(np.asarray(pred) - np.asarray(target))
    if mask is None:
        return g / len(g)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    return np.where(mask[:, None], g, 0.0) / n if n else np.zeros_like(g)


def cross_entropy(probs: np.ndarray, label: int) -> tuple[float, bool]:
    """``-log p(label)`` and whether ``p(label)`` had to be clamped."""
    p = float(probs[label])
    clamped = p < CE_EPS
    return -float(np.log(max(p, CE_EPS))), clamped


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
