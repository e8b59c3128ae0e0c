"""Synthetic bird's-eye-view parking scenes with exact ground truth.

A scene is one row of adjacent slots sharing an entrance line. Slots are
stored with their entrance corners ordered so that the separating lines
point along ``rotate(p2 - p1, +angle)``; that ordering is the only side
information the label format needs.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DatasetParseError, MissingInputError
from .slots import rotate

TRAIN_FRACTION = 9527 / (9527 + 2138)
CM_PER_PX = 4.0


@dataclass
class SlotSpec:
    p1: tuple
    p2: tuple
    angle: int
    depth: float

    @property
    def direction(self):
        u = np.subtract(self.p2, self.p1).astype(float)
        return rotate(u / np.linalg.norm(u), self.angle)

    @property
    def width(self):
        return float(np.hypot(self.p2[0] - self.p1[0], self.p2[1] - self.p1[1]))

    def separating_segments(self):
        d = self.direction * self.depth
        return [(tuple(self.p1), tuple(np.add(self.p1, d))), (tuple(self.p2), tuple(np.add(self.p2, d)))]


@dataclass
class SceneParams:
    """Sampling ranges for random scenes."""

    size: int = 64
    width_min: float = 16.0
    width_max: float = 26.0
    depth_min: float = 1.0
    depth_max: float = 1.4
    max_slots: int = 2
    line_width_min: float = 1.6
    line_width_max: float = 2.4
    noise: float = 0.03
    p_misleading: float = 0.3
    p_shadow: float = 0.3
    p_degraded: float = 0.2
    p_occlusion: float = 0.2
    p_orphan: float = 0.0
    margin: float = 4.0

    @classmethod
    def clean(cls, **kw):
        base = dict(noise=0.0, p_misleading=0.0, p_shadow=0.0, p_degraded=0.0,
                    p_occlusion=0.0, p_orphan=0.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def mixed_scales(cls, **kw):
        base = dict(width_min=13.0, width_max=30.0, max_slots=2)
        base.update(kw)
        return cls(**base)


@dataclass
class SceneSpec:
    size: int = 64
    slots: list = field(default_factory=list)
    orphans: list = field(default_factory=list)
    line_width: float = 2.0
    noise: float = 0.0
    misleading: int = 0
    shadow: bool = False
    degraded: bool = False
    occlusion: int = 0
    margin: float = 2.0

    def validate(self):
        lo, hi = 0.0, self.size - 1.0
        for s in self.slots:
            for a, b in s.separating_segments():
                for p in (a, b):
                    if not (lo <= p[0] <= hi and lo <= p[1] <= hi):
                        raise ConfigError(f"slot geometry {p} leaves the {self.size}px image")
            if s.width <= 0 or s.depth <= 0:
                raise ConfigError("slot width and depth must be positive")
            if s.angle not in (45, 90, 135):
                raise ConfigError(f"unsupported slot angle {s.angle}")


@dataclass
class GroundTruth:
    size: int
    slots: list
    orphans: list = field(default_factory=list)
    cm_per_px: float = CM_PER_PX

    @property
    def corners(self):
        pts = []
        for s in self.slots:
            for p in (s.p1, s.p2):
                if not any(np.hypot(p[0] - q[0], p[1] - q[1]) < 1e-6 for q in pts):
                    pts.append(tuple(p))
        pts += [tuple(p) for p in self.orphans]
        return np.array(pts, dtype=float).reshape(-1, 2)

    def entry_segments(self):
        return [(tuple(s.p1), tuple(s.p2)) for s in self.slots]

    def separating_segments(self):
        segs = []
        for s in self.slots:
            segs += s.separating_segments()
        return segs


@dataclass
class TargetHeatmaps:
    corners: np.ndarray
    entry_lines: np.ndarray
    separating_lines: np.ndarray

    def as_tuple(self):
        return (self.corners, self.entry_lines, self.separating_lines)


# -- geometry helpers ---------------------------------------------------------
def segment_distance(xs, ys, a, b):
    """Distance from every grid point to segment ab (vectorized)."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return np.hypot(xs - ax, ys - ay)
    t = np.clip(((xs - ax) * dx + (ys - ay) * dy) / L2, 0.0, 1.0)
    return np.hypot(xs - (ax + t * dx), ys - (ay + t * dy))


def _grid(size):
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    return xs, ys


# -- scene sampling -----------------------------------------------------------
def random_scene_spec(rng, params=None):
    """Sample a SceneSpec holding one row of 1..max_slots slots."""
    p = params or SceneParams()
    for _ in range(200):
        n = int(rng.integers(1, p.max_slots + 1))
        angle = int(rng.choice([90, 90, 45, 135]))
        widths = rng.uniform(p.width_min, p.width_max, size=n)
        depth = float(rng.uniform(p.depth_min, p.depth_max) * widths.mean())
        phi = rng.uniform(0, 2 * np.pi)
        u = np.array([np.cos(phi), np.sin(phi)])
        d = rotate(u, angle)
        offs = np.concatenate([[0.0], np.cumsum(widths)])
        corners = offs[:, None] * u[None, :]
        pts = np.vstack([corners, corners + depth * d])
        lo = p.margin - pts.min(axis=0)
        hi = (p.size - 1 - p.margin) - pts.max(axis=0)
        if np.any(hi < lo):
            continue
        origin = rng.uniform(lo, hi)
        cs = corners + origin
        slots = [SlotSpec(tuple(cs[k]), tuple(cs[k + 1]), angle, depth) for k in range(n)]
        spec = SceneSpec(
            size=p.size,
            slots=slots,
            line_width=float(rng.uniform(p.line_width_min, p.line_width_max)),
            noise=p.noise,
            misleading=int(rng.random() < p.p_misleading) + int(rng.random() < p.p_misleading / 3),
            shadow=bool(rng.random() < p.p_shadow),
            degraded=bool(rng.random() < p.p_degraded),
            occlusion=int(rng.random() < p.p_occlusion),
        )
        if rng.random() < p.p_orphan:
            _add_orphan(rng, spec, p)
        return spec
    raise ConfigError("could not place a slot row; widen the image or shrink the slots")


def _add_orphan(rng, spec, p):
    """An L-shaped marking far from the row: a corner that belongs to no slot."""
    xs, ys = _grid(spec.size)
    segs = _gt_segments(spec)
    for _ in range(50):
        c = rng.uniform(p.margin + 8, spec.size - 1 - p.margin - 8, size=2)
        if min(float(segment_distance(np.array(c[0]), np.array(c[1]), a, b)) for a, b in segs) > 14:
            spec.orphans.append(tuple(c))
            return


def _gt_segments(spec):
    segs = []
    for s in spec.slots:
        segs.append((tuple(s.p1), tuple(s.p2)))
        segs += s.separating_segments()
    return segs


# -- rendering ----------------------------------------------------------------
def generate_scene(spec, seed):
    """Render ``spec``; returns (image [1,H,W] quantized to 8-bit levels, GroundTruth)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    S = spec.size
    xs, ys = _grid(S)
    base = rng.uniform(0.25, 0.45)
    coarse = rng.normal(0.0, 0.04, size=(S // 8 + 1, S // 8 + 1))
    texture = ndimage.zoom(coarse, S / coarse.shape[0], order=1)[:S, :S]
    img = base + texture
    bright = rng.uniform(0.75, 0.95)
    half = spec.line_width / 2.0

    cover = np.zeros((S, S))
    segs = _gt_segments(spec)
    corners = [np.asarray(c) for s in spec.slots for c in (s.p1, s.p2)] + [np.asarray(c) for c in spec.orphans]
    for a, b in segs:
        cov = np.clip(half + 0.5 - segment_distance(xs, ys, a, b), 0.0, 1.0)
        if spec.degraded and rng.random() < 0.5:
            cov = cov * _gap_mask(rng, xs, ys, a, b)
        cover = np.maximum(cover, cov)
    for c in spec.orphans:
        c = np.asarray(c)
        leg = rotate(np.array([1.0, 0.0]), float(rng.uniform(0, 360))) * 10
        for v in (leg, rotate(leg, 90)):
            cover = np.maximum(cover, np.clip(half + 0.5 - segment_distance(xs, ys, c, c + v), 0, 1))

    for _ in range(spec.misleading):
        seg = _free_segment(rng, S, segs, corners)
        if seg is not None:
            cover = np.maximum(cover, np.clip(half + 0.5 - segment_distance(xs, ys, *seg), 0, 1))
    img = img + cover * (bright - img)

    for _ in range(spec.occlusion):
        c = _free_point(rng, S, corners, 7.0)
        if c is not None:
            r = rng.uniform(2.0, 4.0)
            blob = np.clip(r + 0.5 - np.hypot(xs - c[0], ys - c[1]), 0, 1)
            img = img + blob * (rng.uniform(0.1, 0.3) - img)
    if spec.shadow:
        ang = rng.uniform(0, np.pi)
        n = np.array([np.cos(ang), np.sin(ang)])
        off = rng.uniform(0, S)
        width = rng.uniform(8, 20)
        dist = np.abs((xs - S / 2) * n[0] + (ys - S / 2) * n[1] + S / 2 - off)
        band = np.clip((width / 2 + 1 - dist) / 2, 0, 1)
        img = img * (1 - band * (1 - rng.uniform(0.55, 0.8)))
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    gt = GroundTruth(S, list(spec.slots), list(spec.orphans))
    return img[None, :, :], gt


def _gap_mask(rng, xs, ys, a, b):
    a, b = np.asarray(a), np.asarray(b)
    L = np.linalg.norm(b - a)
    if L < 14:
        return np.ones_like(xs)
    t0 = rng.uniform(0.3, 0.6)
    t1 = min(t0 + rng.uniform(0.1, 0.25), 0.85)
    ab = (b - a) / L
    t = ((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / L
    m = np.ones_like(xs)
    m[(t >= t0) & (t <= t1)] = rng.uniform(0.3, 0.6)
    return m


def _free_point(rng, S, corners, clearance):
    for _ in range(30):
        c = rng.uniform(3, S - 4, size=2)
        if all(np.linalg.norm(c - k) > clearance for k in corners):
            return c
    return None


def _free_segment(rng, S, segs, corners):
    for _ in range(40):
        a = rng.uniform(3, S - 4, size=2)
        ang = rng.uniform(0, 2 * np.pi)
        b = a + rng.uniform(5, 12) * np.array([np.cos(ang), np.sin(ang)])
        if not (np.all(b >= 1) and np.all(b <= S - 2)):
            continue
        samples = [a + t * (b - a) for t in np.linspace(0, 1, 8)]
        ok = all(
            float(segment_distance(np.array(s[0]), np.array(s[1]), p, q)) > 6.0
            for s in samples for p, q in segs
        )
        if ok:
            return tuple(a), tuple(b)
    return None


def render_heatmap_targets(gt, size=None, corner_sigma=None, line_sigma=1.0):
    """Soft targets: unit-peak corner Gaussians, Gaussian line cross-sections."""
    S = size or gt.size
    if corner_sigma is None:
        corner_sigma = 2.0 * S / 64.0
    xs, ys = _grid(S)
    corners = np.zeros((S, S))
    for cx, cy in gt.corners:
        g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * corner_sigma ** 2))
        nx, ny = int(np.clip(np.rint(cx), 0, S - 1)), int(np.clip(np.rint(cy), 0, S - 1))
        g = np.minimum(g / g[ny, nx], 1.0)
        corners = np.maximum(corners, g)

    def lines(segs):
        out = np.zeros((S, S))
        for a, b in segs:
            d = segment_distance(xs, ys, a, b)
            out = np.maximum(out, np.exp(-d ** 2 / (2 * line_sigma ** 2)))
        return out

    return TargetHeatmaps(corners, lines(gt.entry_segments()), lines(gt.separating_segments()))


# -- dataset IO ---------------------------------------------------------------
def write_pgm(path, img):
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[0]
    q = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm(path):
    """Read an 8-bit binary PGM into a float array [1,H,W] in [0,1]."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"image not found: {path}")
    raw = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetParseError(path, start, "truncated PGM header")
        tokens.append((start, raw[start:pos]))
    if tokens[0][1] != b"P5":
        raise DatasetParseError(path, 0, "not a binary PGM (P5)")
    try:
        w, h, maxval = (int(t[1]) for t in tokens[1:])
    except ValueError:
        raise DatasetParseError(path, tokens[1][0], "bad PGM dimensions") from None
    if maxval != 255:
        raise DatasetParseError(path, tokens[3][0], "only 8-bit PGM is supported")
    pos += 1
    if len(raw) - pos < w * h:
        raise DatasetParseError(path, len(raw), f"pixel data truncated: need {w * h} bytes")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return (data.astype(np.float64) / 255.0)[None]


def _num(v):
    return repr(float(v))


def format_labels(gt):
    lines = ["# sphg labels v1", f"size {gt.size} {gt.size}", f"scale {_num(gt.cm_per_px)}"]
    for s in gt.slots:
        xs = " ".join(_num(v) for v in (s.p1[0], s.p1[1], s.p2[0], s.p2[1]))
        lines.append(f"slot {xs} {int(s.angle)} {_num(s.depth)}")
    for c in gt.orphans:
        lines.append(f"corner {_num(c[0])} {_num(c[1])}")
    return "\n".join(lines) + "\n"


def parse_labels(text, path="<labels>"):
    size = None
    scale = CM_PER_PX
    slots, orphans = [], []
    offset = 0
    for line in text.splitlines(keepends=True):
        body = line.strip()
        here = offset
        offset += len(line.encode("utf-8"))
        if not body or body.startswith("#"):
            continue
        if not line.endswith("\n"):
            raise DatasetParseError(path, here, "truncated record (no terminating newline)")
        parts = body.split()
        try:
            if parts[0] == "size" and len(parts) == 3:
                size = int(parts[1])
            elif parts[0] == "scale" and len(parts) == 2:
                scale = float(parts[1])
            elif parts[0] == "slot" and len(parts) == 7:
                x1, y1, x2, y2 = (float(v) for v in parts[1:5])
                slots.append(SlotSpec((x1, y1), (x2, y2), int(parts[5]), float(parts[6])))
            elif parts[0] == "corner" and len(parts) == 3:
                orphans.append((float(parts[1]), float(parts[2])))
            else:
                raise DatasetParseError(path, here, f"malformed record {body!r}")
        except ValueError:
            raise DatasetParseError(path, here, f"bad number in {body!r}") from None
    if size is None:
        raise DatasetParseError(path, 0, "missing size header")
    return GroundTruth(size, slots, orphans, scale)


def save_scene(root, index, image, gt):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    write_pgm(root / "images" / f"{index:05d}.pgm", image)
    (root / "labels" / f"{index:05d}.txt").write_text(format_labels(gt))


def load_scene(root, index):
    root = Path(root)
    lab = root / "labels" / f"{index:05d}.txt"
    if not lab.exists():
        raise MissingInputError(f"label file not found: {lab}")
    raw = lab.read_bytes()
    return read_pgm(root / "images" / f"{index:05d}.pgm"), parse_labels(raw.decode("utf-8"), lab)


def split_indices(n, seed, train_fraction=TRAIN_FRACTION):
    """Deterministic train/val split; val size is round(n * (1 - train_fraction))."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * (1.0 - train_fraction)))
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def write_split(root, train, val):
    tag = {i: "train" for i in train}
    tag.update({i: "val" for i in val})
    text = "".join(f"{i:05d} {tag[i]}\n" for i in sorted(tag))
    Path(root, "split.txt").write_text(text)


def read_split(root):
    path = Path(root, "split.txt")
    if not path.exists():
        raise MissingInputError(f"split file not found: {path}")
    train, val = [], []
    offset = 0
    for line in path.read_text().splitlines(keepends=True):
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("train", "val") or not parts[0].isdigit():
            raise DatasetParseError(path, offset, f"malformed split record {line!r}")
        (train if parts[1] == "train" else val).append(int(parts[0]))
        offset += len(line)
    return train, val


def generate_dataset(root, n, seed=0, params=None, train_fraction=TRAIN_FRACTION):
    """Write ``n`` scenes plus split.txt under ``root``; returns (train, val)."""
    params = params or SceneParams()
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        spec = random_scene_spec(rng, params)
        img, gt = generate_scene(spec, seed=[seed, i, 1])
        save_scene(root, i, img, gt)
    train, val = split_indices(n, seed, train_fraction)
    write_split(root, train, val)
    return train, val


def make_scenes(n, seed=0, params=None):
    """In-memory variant of :func:`generate_dataset` (no files)."""
    params = params or SceneParams()
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        spec = random_scene_spec(rng, params)
        out.append(generate_scene(spec, seed=[seed, i, 1]))
    return out


class Dataset:
    """Images, ground truth and cached targets for a list of scenes."""

    def __init__(self, images, gts, corner_sigma=None, line_sigma=1.0):
        self.images = np.asarray(images, dtype=np.float32)
        self.gts = list(gts)
        if len(self.images) != len(self.gts):
            raise ConfigError("images and labels differ in length")
        tg = [render_heatmap_targets(g, self.images.shape[-1], corner_sigma, line_sigma) for g in self.gts]
        self.targets = TargetHeatmaps(
            np.stack([t.corners for t in tg])[:, None].astype(np.float32),
            np.stack([t.entry_lines for t in tg])[:, None].astype(np.float32),
            np.stack([t.separating_lines for t in tg])[:, None].astype(np.float32),
        )

    def __len__(self):
        return len(self.gts)

    def batch(self, idx):
        idx = np.asarray(idx)
        t = self.targets
        return self.images[idx], TargetHeatmaps(t.corners[idx], t.entry_lines[idx], t.separating_lines[idx])

    @classmethod
    def from_scenes(cls, scenes, **kw):
        return cls([img for img, _ in scenes], [gt for _, gt in scenes], **kw)

    @classmethod
    def from_dir(cls, root, indices, **kw):
        scenes = [load_scene(root, i) for i in indices]
        return cls.from_scenes(scenes, **kw)


def list_scene_indices(root):
    d = Path(root, "labels")
    if not d.is_dir():
        raise MissingInputError(f"no dataset at {root}")
    return sorted(int(f[:-4]) for f in os.listdir(d) if f.endswith(".txt"))
