"""Focal heatmap loss and the staged training objective."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .prune import l1_regularizer
from .select import cen_regularizer

P_MIN = 1e-6
P_MAX = 1.0 - 1e-6

# stage -> (CEN regularizer active, L1 regularizer active)
STAGE_TERMS = {
    "warmup": (False, False),
    "cen": (True, False),
    "select": (True, False),
    "prune": (False, True),
    "finetune": (False, False),
}


@dataclass
class LossWeights:
    lambda_sl: float = 0.1
    lambda_cen: float = 0.05
    lambda_l1: float = 0.05
    positive_threshold: float = 0.95
    normalize: str = "positives"


def focal_terms(p, y, positive_threshold=0.95):
    """Per-pixel focal loss values (numpy, no clamping)."""
    pos = y >= positive_threshold
    return np.where(pos, -(1 - p) ** 2 * np.log(p), -((1 - y) ** 4) * p ** 2 * np.log(1 - p))


def focal_loss(pred, target, positive_threshold=0.95, normalize="positives"):
    """Penalty-reduced focal loss of probabilities ``pred`` against soft targets.

    Pixels with ``target >= positive_threshold`` count as positives. The sum
    is divided by the number of positives (``normalize="positives"``) or by
    the pixel count (``"mean"``). Predictions are clamped to
    [1e-6, 1 - 1e-6]; the gradient is evaluated at the clamped value and
    passed straight through so saturated pixels still learn.
    """
    y = target.data if isinstance(target, T.Tensor) else np.asarray(target)
    p_raw = pred.data
    p = np.clip(p_raw, P_MIN, P_MAX)
    pos = y >= positive_threshold
    neg_w = (1 - y) ** 4
    per = np.where(pos, -(1 - p) ** 2 * np.log(p), -neg_w * p ** 2 * np.log(1 - p))
    if normalize == "positives":
        denom = max(1.0, float(pos.sum()))
    elif normalize == "mean":
        denom = float(per.size)
    else:
        raise ContractError(f"unknown focal normalization {normalize!r}")
    value = np.asarray(per.sum() / denom, dtype=p_raw.dtype)

    def backward(g):
        d_pos = 2 * (1 - p) * np.log(p) - (1 - p) ** 2 / p
        d_neg = -neg_w * (2 * p * np.log(1 - p) - p ** 2 / (1 - p))
        grad = np.where(pos, d_pos, d_neg) * (g / denom)
        return (grad.astype(p_raw.dtype, copy=False),)

    return T._make(value, (pred,), backward)


def heatmap_loss(triple, targets, weights=None):
    """corner + entry + lambda_sl * separating for one stack; returns (Tensor, parts)."""
    w = weights or LossWeights()
    kw = dict(positive_threshold=w.positive_threshold, normalize=w.normalize)
    lc = focal_loss(triple.corners, targets.corners, **kw)
    le = focal_loss(triple.entry_lines, targets.entry_lines, **kw)
    ls = focal_loss(triple.separating_lines, targets.separating_lines, **kw)
    total = lc + le + ls * w.lambda_sl
    return total, {"corners": lc.item(), "entry": le.item(), "separating": ls.item()}


def total_loss(outputs, targets, net, stage, weights=None):
    """Sum of stage-gated loss terms over every supervised stack.

    Returns the scalar tensor and a dict with the individual components.
    """
    if stage not in STAGE_TERMS:
        raise ContractError(f"unknown stage {stage!r}")
    w = weights or LossWeights()
    use_cen, use_l1 = STAGE_TERMS[stage]
    total = None
    parts = {"corners": 0.0, "entry": 0.0, "separating": 0.0, "cen": 0.0, "l1": 0.0}
    for triple in outputs:
        t, p = heatmap_loss(triple, targets, w)
        total = t if total is None else total + t
        for k, v in p.items():
            parts[k] += v
    if use_cen:
        alphas = net.last_alphas()
        if alphas:
            lc = cen_regularizer(alphas)
            parts["cen"] = lc.item()
            total = total + lc * w.lambda_cen
    if use_l1:
        if not net.all_committed():
            raise ContractError("L1 pruning pressure requires a committed network")
        l1 = l1_regularizer(net)
        parts["l1"] = l1.item()
        total = total + l1 * w.lambda_l1
    parts["total"] = total.item()
    return total, parts
