"""Soft dice loss and hard-label dice metrics."""

from __future__ import annotations

import csv
import io
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Node, as_node
from .tensor_core import ShapeError

DICE_EPS = 1e-5


def one_hot(labels: np.ndarray, num_classes: int, axis: int = -4, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    eye = np.eye(num_classes, dtype=dtype)[labels]
    return np.moveaxis(eye, -1, axis)


def _class_axis_sums(a: np.ndarray) -> np.ndarray:
    """Sum everything except the class axis (axis -4)."""
    return np.moveaxis(a, -4, 0).reshape(a.shape[-4], -1).sum(axis=1)


def soft_dice_per_class(probs: np.ndarray, target: np.ndarray, eps: float = DICE_EPS) -> np.ndarray:
    """2 sum(p g) / (sum p^2 + sum g^2 + eps) for every class."""
    probs = np.asarray(probs)
    g = one_hot(target, probs.shape[-4], dtype=probs.dtype)
    inter = _class_axis_sums(probs * g)
    denom = _class_axis_sums(probs * probs) + _class_axis_sums(g * g) + eps
    return 2 * inter / denom


def soft_dice_loss(probs, target: np.ndarray, classes: str | Sequence[int] = "present",
                   eps: float = DICE_EPS, check_normalized: bool = True) -> Node:
    """1 - mean over classes of the squared-denominator soft dice.

    ``probs`` is ``(C, D, H, W)`` or ``(B, C, D, H, W)`` and ``target`` the
    matching integer label map without the class axis.  ``classes`` selects
    which classes are averaged: ``"present"`` (classes occurring in the
    target, background included), ``"all"``, or an explicit index list.
    """
    probs = as_node(probs)
    p = probs.value
    if p.ndim not in (4, 5):
        raise ShapeError(f"probs must be (B,)C,D,H,W, got {p.shape}")
    target = np.asarray(target)
    if target.shape != p.shape[:-4] + p.shape[-3:]:
        raise ShapeError(f"target shape {target.shape} does not match probs {p.shape}")
    if check_normalized and np.max(np.abs(p.sum(axis=-4) - 1), initial=0) > 1e-4:
        raise ValueError("probabilities are not normalized over the class axis")
    n_cls = p.shape[-4]
    if isinstance(classes, str):
        if classes == "present":
            idx = np.unique(target)
        elif classes == "all":
            idx = np.arange(n_cls)
        else:
            raise ValueError(f"unknown class selection {classes!r}")
    else:
        idx = np.asarray(classes, dtype=int)
    g = one_hot(target, n_cls, dtype=p.dtype)
    inter = _class_axis_sums(p * g)
    denom = _class_axis_sums(p * p) + _class_axis_sums(g * g) + eps
    weights = np.zeros(n_cls, dtype=p.dtype)
    weights[idx] = 1.0 / len(idx)
    loss = 1.0 - np.sum(weights * 2 * inter / denom)
    shape = [1] * p.ndim
    shape[-4] = n_cls
    w = weights.reshape(shape)
    inter_b = inter.reshape(shape)
    denom_b = denom.reshape(shape)

    def backward(grad, needs):
        d = 2 * g / denom_b - 4 * inter_b * p / denom_b ** 2
        return (-grad * w * d,)

    return Node(np.asarray(loss, dtype=p.dtype), (probs,), backward, "soft_dice")


def dice_score(pred: np.ndarray, target: np.ndarray, c: int, num_classes: int | None = None) -> float:
    """2|A & B| / (|A| + |B|) for class ``c``; 1 if both empty."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    if num_classes is not None and not 0 <= c < num_classes:
        raise ValueError(f"class {c} outside [0, {num_classes})")
    a, b = pred == c, target == c
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def metrics_rows(per_volume: dict[str, Sequence[float]], class_names: Sequence[str],
                 foreground_only: bool = False) -> list[tuple[str, str, float]]:
    """Rows ``(volume_id, class_name, dice)`` plus mean/std rows per class and overall."""
    rows = []
    classes = list(range(1 if foreground_only else 0, len(class_names)))
    scores = np.array([[s[c] for c in classes] for s in per_volume.values()])
    for vol, s in per_volume.items():
        rows += [(vol, class_names[c], float(s[c])) for c in classes]
    for j, c in enumerate(classes):
        rows.append(("mean", class_names[c], float(scores[:, j].mean())))
        rows.append(("std", class_names[c], float(scores[:, j].std())))
    rows.append(("mean", "all", float(scores.mean())))
    return rows


def format_csv(rows: Iterable[tuple[str, str, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["volume_id", "class_name", "dice"])
    for vol, name, value in rows:
        writer.writerow([vol, name, f"{value:.6f}"])
    return buf.getvalue()
