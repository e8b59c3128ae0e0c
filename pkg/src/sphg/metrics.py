"""Point matching and the evaluation metrics built on it."""

from dataclasses import dataclass, field

import numpy as np

DEFAULT_CM_PER_PX = 4.0


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (gt index, det index, distance px)
    tp: int = 0
    fp: int = 0
    fn: int = 0
    delta_px: float = 1.5
    cm_per_px: float = DEFAULT_CM_PER_PX

    @property
    def delta_cm(self):
        return self.delta_px * self.cm_per_px

    @property
    def errors_px(self):
        return np.array([d for _, _, d in self.pairs], dtype=float)

    def __add__(self, other):
        return MatchResult(self.pairs + other.pairs, self.tp + other.tp, self.fp + other.fp,
                           self.fn + other.fn, self.delta_px, self.cm_per_px)


def match_points(gt, det, delta_px=1.5, cm_per_px=DEFAULT_CM_PER_PX):
    """Greedy nearest-first one-to-one matching within ``delta_px``."""
    gt = np.asarray(gt, dtype=float).reshape(-1, 2)
    det = np.asarray(det, dtype=float).reshape(-1, 2)
    res = MatchResult(delta_px=delta_px, cm_per_px=cm_per_px)
    if len(gt) and len(det):
        d = np.sqrt(((gt[:, None, :] - det[None, :, :]) ** 2).sum(-1))
        cand = np.argwhere(d <= delta_px)
        order = np.lexsort((cand[:, 1], cand[:, 0], d[cand[:, 0], cand[:, 1]]))
        used_g, used_d = set(), set()
        for gi, di in cand[order]:
            if gi in used_g or di in used_d:
                continue
            used_g.add(gi)
            used_d.add(di)
            res.pairs.append((int(gi), int(di), float(d[gi, di])))
    res.tp = len(res.pairs)
    res.fp = len(det) - res.tp
    res.fn = len(gt) - res.tp
    return res


def localization_error(matches, unit="cm"):
    """(mean, population std) of matched distances, or None without matches."""
    e = matches.errors_px
    if e.size == 0:
        return None
    if unit == "cm":
        e = e * matches.cm_per_px
    return float(e.mean()), float(e.std())


def precision_recall(matches):
    tp, fp, fn = matches.tp, matches.fp, matches.fn
    if tp + fp == 0 and tp + fn == 0:
        return 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def detection_accuracy(matches):
    """TP / (TP + FP + FN): penalizes misses and false alarms alike."""
    denom = matches.tp + matches.fp + matches.fn
    return 1.0 if denom == 0 else matches.tp / denom


def miss_rate_fppi_curve(gt_per_image, det_per_image, delta_px=1.5, thresholds=None):
    """Miss rate vs false positives per image, sweeping the detection score.

    ``det_per_image`` holds (x, y, score) rows. Returns an array of
    (threshold, fppi, miss_rate) rows ordered by decreasing threshold.
    """
    if thresholds is None:
        thresholds = np.round(np.arange(0.98, 0.0, -0.02), 4)
    n_img = max(1, len(gt_per_image))
    n_gt = sum(len(g) for g in gt_per_image)
    rows = []
    for t in thresholds:
        fp = fn = 0
        for gt, det in zip(gt_per_image, det_per_image):
            det = np.asarray(det, dtype=float).reshape(-1, 3)
            m = match_points(gt, det[det[:, 2] >= t, :2], delta_px)
            fp += m.fp
            fn += m.fn
        miss = fn / n_gt if n_gt else 0.0
        rows.append((float(t), fp / n_img, miss))
    return np.array(rows)


def miss_rate_at_fppi(curve, fppi=0.1):
    ok = curve[curve[:, 1] <= fppi + 1e-12]
    return float(ok[:, 2].min()) if len(ok) else 1.0
