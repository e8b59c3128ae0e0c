"""Rule-based parking-slot assembly from corner and line heatmaps.

Coordinates are (x, y) in pixels with pixel centres on integers; heatmaps
are indexed ``[y, x]``.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

ANGLES = (90, 45, 135)
SIDES = (1, -1)


@dataclass
class SlotConfig:
    peak_threshold: float = 0.3
    line_threshold: float = 0.25
    nms_radius: float = 5.0
    corridor: float = 4.0
    d_min: float = 12.0
    d_max: float = 32.0
    probe_factor: float = 1.5
    min_inside: float = 0.6
    overlap_iou: float = 0.3


@dataclass
class CornerPeak:
    x: float
    y: float
    score: float

    @property
    def xy(self):
        return np.array([self.x, self.y])


@dataclass
class SlotDetection:
    p1: tuple
    p2: tuple
    entry_score: float
    angle: int
    side: int
    direction: tuple
    sep_scores: tuple
    confidence: float

    @property
    def width(self):
        return float(np.hypot(self.p2[0] - self.p1[0], self.p2[1] - self.p1[1]))

    def polygon(self, depth=None):
        d = np.asarray(self.direction) * (depth if depth is not None else self.width)
        a, b = np.asarray(self.p1), np.asarray(self.p2)
        return [tuple(a), tuple(b), tuple(b + d), tuple(a + d)]


# -- peaks ----------------------------------------------------------------------
_OFFS = np.array([(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=float)
_DESIGN = np.column_stack([np.ones(9), _OFFS[:, 0], _OFFS[:, 1],
                           _OFFS[:, 0] ** 2, _OFFS[:, 0] * _OFFS[:, 1], _OFFS[:, 1] ** 2])
_PINV = np.linalg.pinv(_DESIGN)


def refine_subpixel(hm, x, y):
    """Quadratic fit of log-intensity on the 3x3 patch around (x, y).

    Exact for Gaussian blobs. Falls back to per-axis parabolas when the 2-D
    fit is not a proper maximum, and leaves border pixels unrefined.
    """
    H, W = hm.shape
    if not (0 < x < W - 1 and 0 < y < H - 1):
        return float(x), float(y)
    patch = np.log(np.clip(hm[y - 1:y + 2, x - 1:x + 2], 1e-6, None)).reshape(-1)
    c = _PINV @ patch
    hess = np.array([[2 * c[3], c[4]], [c[4], 2 * c[5]]])
    grad = np.array([c[1], c[2]])
    if np.linalg.det(hess) > 0 and hess[0, 0] < 0:
        off = -np.linalg.solve(hess, grad)
        if np.all(np.abs(off) <= 1.0):
            return float(x + off[0]), float(y + off[1])
    p = patch.reshape(3, 3)
    out = []
    for l, m, r in ((p[1, 0], p[1, 1], p[1, 2]), (p[0, 1], p[1, 1], p[2, 1])):
        den = l - 2 * m + r
        out.append(0.0 if den >= 0 else float(np.clip(0.5 * (l - r) / den, -0.5, 0.5)))
    return float(x + out[0]), float(y + out[1])


def find_peaks(hm, threshold=0.3, nms_radius=5.0):
    """3x3 local maxima above ``threshold``, refined, then greedy radius NMS."""
    hm = np.asarray(hm, dtype=np.float64)
    local = hm == ndimage.maximum_filter(hm, size=3, mode="nearest")
    ys, xs = np.nonzero(local & (hm >= threshold))
    order = sorted(range(len(xs)), key=lambda i: (-hm[ys[i], xs[i]], ys[i], xs[i]))
    kept = []
    for i in order:
        rx, ry = refine_subpixel(hm, int(xs[i]), int(ys[i]))
        if all(np.hypot(rx - k.x, ry - k.y) >= nms_radius for k in kept):
            kept.append(CornerPeak(rx, ry, float(hm[ys[i], xs[i]])))
    return kept


# -- pairing ----------------------------------------------------------------------
def _seg_distance(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def pair_corners(peaks, d_min=12.0, d_max=32.0, corridor=4.0):
    """Index pairs (i, j), i < j, at entrance-width distance with a clear corridor."""
    pts = [p.xy for p in peaks]
    pairs = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            d = float(np.linalg.norm(pts[j] - pts[i]))
            if not d_min <= d <= d_max:
                continue
            blocked = any(_seg_distance(pts[k], pts[i], pts[j]) < corridor
                          for k in range(len(pts)) if k not in (i, j))
            if not blocked:
                pairs.append((i, j))
    return pairs


# -- line verification --------------------------------------------------------
def bilinear(hm, xs, ys):
    return ndimage.map_coordinates(hm, [ys, xs], order=1, mode="nearest")


def line_score(hm, start, direction, length, min_inside=0.6):
    """Mean bilinear heatmap value at 1 px steps along a segment.

    Samples outside the image are dropped; if fewer than ``min_inside`` of
    them remain the score is 0.
    """
    hm = np.asarray(hm, dtype=np.float64)
    H, W = hm.shape
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    t = np.arange(int(np.floor(length)) + 1, dtype=float)
    xs = start[0] + t * d[0]
    ys = start[1] + t * d[1]
    inside = (xs >= 0) & (xs <= W - 1) & (ys >= 0) & (ys <= H - 1)
    if inside.sum() == 0 or inside.mean() < min_inside:
        return 0.0
    return float(bilinear(hm, xs[inside], ys[inside]).mean())


def rotate(v, degrees):
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def canonical_order(a, b):
    """Order two points by (x, y) so a slot has one canonical description."""
    ka = (a.x, a.y) if isinstance(a, CornerPeak) else (a[0], a[1])
    kb = (b.x, b.y) if isinstance(b, CornerPeak) else (b[0], b[1])
    return (a, b) if ka <= kb else (b, a)


def _overlap(s1, s2):
    from shapely.geometry import Polygon

    a, b = Polygon(s1.polygon()), Polygon(s2.polygon())
    if not (a.is_valid and b.is_valid):
        return 0.0
    inter = a.intersection(b).area
    union = a.union(b).area
    return inter / union if union > 0 else 0.0


def assemble_slots(peaks, pairs, entry_hm, sep_hm, cfg=None):
    """Verify entry and separating lines for every pair and keep valid slots."""
    cfg = cfg or SlotConfig()
    found = []
    for i, j in pairs:
        a, b = canonical_order(peaks[i], peaks[j])
        p1, p2 = a.xy, b.xy
        width = float(np.linalg.norm(p2 - p1))
        u = (p2 - p1) / width
        entry = line_score(entry_hm, p1, u, width, cfg.min_inside)
        if entry < cfg.line_threshold:
            continue
        probe = cfg.probe_factor * width
        best = None
        for angle in ANGLES:
            for side in SIDES:
                d = rotate(u, side * angle)
                s1 = line_score(sep_hm, p1, d, probe, cfg.min_inside)
                s2 = line_score(sep_hm, p2, d, probe, cfg.min_inside)
                if min(s1, s2) < cfg.line_threshold:
                    continue
                key = (min(s1, s2), s1 + s2)
                if best is None or key > best[0]:
                    best = (key, angle, side, d, (s1, s2))
        if best is None:
            continue
        _, angle, side, d, seps = best
        conf = float(np.mean([a.score, b.score, entry, *seps]))
        found.append(SlotDetection(tuple(p1), tuple(p2), entry, angle, side, tuple(d), seps, conf))

    found.sort(key=lambda s: (-s.confidence, s.p1, s.p2))
    kept = []
    for s in found:
        if all(_overlap(s, k) <= cfg.overlap_iou for k in kept):
            kept.append(s)
    return kept


def infer_slots(corners, entry, separating, cfg=None):
    """Full post-processing on 2-D heatmaps: returns (peaks, slots)."""
    cfg = cfg or SlotConfig()
    peaks = find_peaks(corners, cfg.peak_threshold, cfg.nms_radius)
    pairs = pair_corners(peaks, cfg.d_min, cfg.d_max, cfg.corridor)
    slots = assemble_slots(peaks, pairs, entry, separating, cfg)
    return peaks, slots


def slot_matches(gt_slot, det, delta_px=1.5, max_angle_deg=10.0):
    """True if ``det`` has both corners within delta and a matching separating direction.

    ``gt_slot`` is (p1, p2, direction) with direction a unit vector.
    """
    g1, g2, gd = (np.asarray(v, dtype=float) for v in gt_slot)
    d1, d2 = np.asarray(det.p1), np.asarray(det.p2)
    same = np.linalg.norm(g1 - d1) <= delta_px and np.linalg.norm(g2 - d2) <= delta_px
    swap = np.linalg.norm(g1 - d2) <= delta_px and np.linalg.norm(g2 - d1) <= delta_px
    if not (same or swap):
        return False
    cosang = float(np.dot(gd, det.direction) / (np.linalg.norm(gd) * np.linalg.norm(det.direction)))
    return cosang >= np.cos(np.deg2rad(max_angle_deg))
