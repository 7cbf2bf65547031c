"""Procedural frames with known triplets and known instrument boxes.

Each instrument is a bar whose tip carries a round head. Instruments are
coded by hue (fully saturated), verbs by a stripe motif drawn on the bar
in a darker shade of the same hue, and targets by pastel background
patches. The tip of every active instrument rests inside the patch of its
target; idle instruments rest on plain background. Extra patches of
untouched targets act as distractors.
"""

from __future__ import annotations

import colorsys
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from triplab.vocab import (
    Dataset,
    FrameAnnotation,
    ValidityMask,
    Vocabulary,
    save_annotations,
    save_vocabulary,
)

MOTIF_KINDS = ("across", "along", "checker", "diag")
MOTIF_PERIODS = (4, 8, 6)
STRIPE_SHADE = 0.5
BACKGROUND_LEVEL = 0.42
TARGET_SATURATION = 0.35
# instrument bar size in units of height / 64
BAR_LENGTH = 28.0
BAR_WIDTH = 9.0
TARGET_VALUE = 0.78


class PlacementError(ValueError):
    """An instrument or region does not fit inside the image."""


@dataclass(frozen=True)
class Placement:
    instrument: int
    verb: int
    target: int
    tip: tuple[float, float]
    angle: float
    scale: float
    length: float
    width: float

    @property
    def direction(self) -> tuple[float, float]:
        return (math.cos(self.angle), math.sin(self.angle))

    @property
    def center(self) -> tuple[float, float]:
        dx, dy = self.direction
        return (self.tip[0] + dx * self.length / 2, self.tip[1] + dy * self.length / 2)

    def polygon(self) -> list[tuple[float, float]]:
        dx, dy = self.direction
        nx, ny = -dy, dx
        hw = self.width / 2
        tx, ty = self.tip
        ex, ey = tx + dx * self.length, ty + dy * self.length
        return [
            (tx + nx * hw, ty + ny * hw),
            (ex + nx * hw, ey + ny * hw),
            (ex - nx * hw, ey - ny * hw),
            (tx - nx * hw, ty - ny * hw),
        ]

    @property
    def head_radius(self) -> float:
        return 0.75 * self.width

    def extent(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.polygon()]
        ys = [p[1] for p in self.polygon()]
        r = self.head_radius
        tx, ty = self.tip
        return (min(xs + [tx - r]), min(ys + [ty - r]), max(xs + [tx + r]), max(ys + [ty + r]))


@dataclass(frozen=True)
class SceneSpec:
    triplets: frozenset
    placements: tuple[Placement, ...]
    regions: tuple[tuple[int, tuple[tuple[float, float], ...]], ...]
    noise_seed: int


@dataclass(frozen=True)
class Box:
    instrument: int
    x0: int
    y0: int
    x1: int
    y1: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class RenderConfig:
    vocab: Vocabulary
    height: int = 64
    width: int = 112
    distribution: str = "uniform"
    weights: np.ndarray | None = None
    count_probs: tuple[float, ...] = (0.1, 0.5, 0.3, 0.1)
    unique_instruments: bool = True
    n_distractors: int = 1
    noise: float = 0.03
    channels: int = field(default=3, init=False)

    def __post_init__(self):
        if self.distribution not in ("uniform", "cooccurrence"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.distribution == "cooccurrence" and self.weights is None:
            raise ValueError("co-occurrence sampling needs a weight volume")
        if len(self.count_probs) > 4:
            raise ValueError("at most 3 triplets per frame")
        if abs(sum(self.count_probs) - 1) > 1e-9:
            raise ValueError("count_probs must sum to 1")
        m, n, p = self.vocab.shape
        if n - 1 > len(MOTIF_KINDS) * len(MOTIF_PERIODS):
            raise ValueError(f"at most {len(MOTIF_KINDS) * len(MOTIF_PERIODS) + 1} verbs supported")

    @property
    def unit(self) -> float:
        return self.height / 64.0

    def instrument_rgb(self, i: int) -> np.ndarray:
        m = self.vocab.shape[0]
        return np.array(colorsys.hsv_to_rgb(i / m, 1.0, 1.0))

    def instrument_hue(self, i: int) -> float:
        return i / self.vocab.shape[0]

    def target_rgb(self, t: int) -> np.ndarray:
        p = self.vocab.shape[2]
        hue = ((t - 1) + 0.5) / max(p - 1, 1)
        return np.array(colorsys.hsv_to_rgb(hue, TARGET_SATURATION, TARGET_VALUE))

    def verb_motif(self, v: int) -> tuple[str, int] | None:
        if v == 0:
            return None
        k = v - 1
        return (MOTIF_KINDS[k % len(MOTIF_KINDS)], MOTIF_PERIODS[k // len(MOTIF_KINDS)])

    def sampling_weights(self, validity: ValidityMask) -> np.ndarray:
        if validity.shape != self.vocab.shape:
            raise ValueError("validity mask does not match the vocabulary")
        if self.distribution == "uniform":
            w = validity.grid.astype(np.float64)
        else:
            w = np.where(validity.grid, np.asarray(self.weights, dtype=np.float64), 0.0)
        if w.sum() <= 0:
            raise ValueError("no valid triplet has positive sampling weight")
        return w


def _point_in_polygon(x: float, y: float, poly: Sequence[tuple[float, float]]) -> bool:
    inside = False
    n = len(poly)
    for k in range(n):
        x1, y1 = poly[k]
        x2, y2 = poly[(k + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


def _box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _sample_triplets(cfg: RenderConfig, weights: np.ndarray, rng: np.random.Generator) -> list:
    k = int(rng.choice(len(cfg.count_probs), p=np.asarray(cfg.count_probs)))
    flat = weights.ravel().copy()
    chosen = []
    for _ in range(k):
        if flat.sum() <= 0:
            break
        idx = int(rng.choice(flat.size, p=flat / flat.sum()))
        trip = tuple(int(x) for x in np.unravel_index(idx, weights.shape))
        chosen.append(trip)
        flat[idx] = 0.0
        if cfg.unique_instruments:
            flat.reshape(weights.shape)[trip[0]] = 0.0
    return chosen


def _sample_regions(cfg: RenderConfig, targets: list[int], rng: np.random.Generator):
    u = cfg.unit
    regions = []
    rects = []
    for t in targets:
        for _ in range(200):
            w = rng.uniform(20, 30) * u
            h = rng.uniform(16, 24) * u
            x0 = rng.uniform(1, cfg.width - 1 - w)
            y0 = rng.uniform(1, cfg.height - 1 - h)
            rect = (x0, y0, x0 + w, y0 + h)
            if all(not _rects_touch(rect, r, 2 * u) for r in rects):
                break
        else:
            return None
        j = 2 * u
        poly = (
            (rect[0] + rng.uniform(-j, 0), rect[1] + rng.uniform(-j, 0)),
            (rect[2] + rng.uniform(0, j), rect[1] + rng.uniform(-j, 0)),
            (rect[2] + rng.uniform(0, j), rect[3] + rng.uniform(0, j)),
            (rect[0] + rng.uniform(-j, 0), rect[3] + rng.uniform(0, j)),
        )
        poly = tuple((min(max(x, 0.0), cfg.width - 1.0), min(max(y, 0.0), cfg.height - 1.0)) for x, y in poly)
        rects.append(rect)
        regions.append((t, poly, rect))
    return regions


def _rects_touch(a, b, gap) -> bool:
    return not (a[2] + gap < b[0] or b[2] + gap < a[0] or a[3] + gap < b[1] or b[3] + gap < a[1])


def _in_bounds(pl: Placement, cfg: RenderConfig) -> bool:
    x0, y0, x1, y1 = pl.extent()
    return x0 >= 0 and y0 >= 0 and x1 <= cfg.width - 1 and y1 <= cfg.height - 1


def _try_layout(cfg: RenderConfig, triplets: list, rng: np.random.Generator):
    u = cfg.unit
    touched = sorted({t for _, _, t in triplets if t != 0})
    p = cfg.vocab.shape[2]
    others = [t for t in range(1, p) if t not in touched]
    n_extra = min(cfg.n_distractors, len(others))
    extra = sorted(int(t) for t in rng.choice(others, size=n_extra, replace=False)) if n_extra else []
    regions = _sample_regions(cfg, touched + extra, rng)
    if regions is None:
        return None
    by_target = {t: rect for t, _, rect in regions}
    placements: list[Placement] = []
    margin = 4 * u
    for i, v, t in triplets:
        for _ in range(100):
            if t != 0:
                r = by_target[t]
                tip = (rng.uniform(r[0] + margin, r[2] - margin), rng.uniform(r[1] + margin, r[3] - margin))
            else:
                tip = (rng.uniform(margin, cfg.width - margin), rng.uniform(margin, cfg.height - margin))
                if any(_point_in_polygon(*tip, poly) or _near_rect(tip, rect, margin)
                       for _, poly, rect in regions):
                    continue
            scale = rng.uniform(0.9, 1.1)
            pl = Placement(i, v, t, tip, float(rng.uniform(0, 2 * math.pi)), float(scale),
                           BAR_LENGTH * u * scale, BAR_WIDTH * u * scale)
            if not _in_bounds(pl, cfg):
                continue
            box = pl.extent()
            if any(_box_iou(box, q.extent()) > 0.5 for q in placements):
                continue
            if any(_dist(tip, q.tip) < 2 * q.head_radius for q in placements):
                continue
            placements.append(pl)
            break
        else:
            return None
    return placements, tuple((t, poly) for t, poly, _ in regions)


def _near_rect(pt, rect, margin) -> bool:
    return rect[0] - margin <= pt[0] <= rect[2] + margin and rect[1] - margin <= pt[1] <= rect[3] + margin


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def sample_scene(cfg: RenderConfig, validity: ValidityMask, seed) -> SceneSpec:
    """Draw up to three valid triplets and lay them out on the canvas."""
    rng = np.random.default_rng(seed)
    weights = cfg.sampling_weights(validity)
    triplets = _sample_triplets(cfg, weights, rng)
    min_pixels = 0.01 * cfg.height * cfg.width
    for _ in range(200):
        layout = _try_layout(cfg, triplets, rng)
        if layout is None:
            continue
        placements, regions = layout
        labels = rasterize_instruments(placements, cfg)
        ok = True
        for k, pl in enumerate(placements):
            tx, ty = int(pl.tip[0]), int(pl.tip[1])
            if (labels == k + 1).sum() < min_pixels or labels[ty, tx] != k + 1:
                ok = False
                break
        if ok:
            return SceneSpec(frozenset(triplets), tuple(placements), regions,
                             int(rng.integers(0, 2**31 - 1)))
    raise RuntimeError(f"could not lay out triplets {triplets} on a {cfg.height}x{cfg.width} canvas")


def rasterize_instruments(placements: Sequence[Placement], cfg: RenderConfig) -> np.ndarray:
    """Label map, 0 = no instrument, k + 1 = k-th placement (later ones occlude)."""
    canvas = Image.new("L", (cfg.width, cfg.height), 0)
    draw = ImageDraw.Draw(canvas)
    for k, pl in enumerate(placements):
        draw.polygon(pl.polygon(), fill=k + 1)
        r = pl.head_radius
        tx, ty = pl.tip
        draw.ellipse((tx - r, ty - r, tx + r, ty + r), fill=k + 1)
    return np.asarray(canvas, dtype=np.int32)


def _motif_mask(pl: Placement, motif, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """True where the stripe motif darkens the bar."""
    if motif is None:
        return np.zeros(xs.shape, dtype=bool)
    kind, period = motif
    dx, dy = pl.direction
    rx, ry = xs - pl.tip[0], ys - pl.tip[1]
    along = rx * dx + ry * dy
    across = -rx * dy + ry * dx
    half = period / 2
    if kind == "across":
        return np.mod(along, period) < half
    if kind == "along":
        return np.mod(across + 64, period) < half
    if kind == "checker":
        return (np.mod(along, period) < half) ^ (np.mod(across + 64, period) < half)
    return np.mod(along + across + 128, period) < half


def render_frame(scene: SceneSpec, cfg: RenderConfig) -> tuple[np.ndarray, list[Box]]:
    """Render a scene to an H x W x 3 float32 image in [0, 1] plus tight boxes.

    Pixel values are multiples of 1/255 so the image survives an 8-bit
    lossless round trip unchanged. Boxes use pixel-edge coordinates:
    ``x1``/``y1`` are one past the last covered column/row.
    """
    H, W = cfg.height, cfg.width
    m, n, p = cfg.vocab.shape
    for pl in scene.placements:
        if not _in_bounds(pl, cfg):
            raise PlacementError(f"instrument {pl.instrument} at {pl.tip} leaves the {H}x{W} canvas")
        if not (0 <= pl.instrument < m and 0 <= pl.verb < n and 0 <= pl.target < p):
            raise ValueError("placement outside vocabulary")
    rng = np.random.default_rng(scene.noise_seed)
    img = np.full((H, W, 3), BACKGROUND_LEVEL, dtype=np.float64)
    if scene.regions:
        canvas = Image.new("L", (W, H), 0)
        draw = ImageDraw.Draw(canvas)
        for k, (t, poly) in enumerate(scene.regions):
            if any(not (0 <= x <= W - 1 and 0 <= y <= H - 1) for x, y in poly):
                raise PlacementError(f"region of target {t} leaves the canvas")
            draw.polygon(list(poly), fill=k + 1)
        rlabels = np.asarray(canvas, dtype=np.int32)
        for k, (t, _) in enumerate(scene.regions):
            img[rlabels == k + 1] = cfg.target_rgb(t)
    if cfg.noise > 0:
        img += rng.normal(0.0, cfg.noise, size=(H, W, 1))
        # keep backdrop clear of the instrument saturation band
        img = np.clip(img, 0.05, 0.95)
    labels = rasterize_instruments(scene.placements, cfg)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    boxes = []
    for k, pl in enumerate(scene.placements):
        sel = labels == k + 1
        if not sel.any():
            continue
        dark = _motif_mask(pl, cfg.verb_motif(pl.verb), xs[sel], ys[sel])
        color = cfg.instrument_rgb(pl.instrument)
        shade = np.where(dark, STRIPE_SHADE, 1.0)[:, None]
        img[sel] = color[None, :] * shade
        rows, cols = np.nonzero(sel)
        boxes.append(Box(pl.instrument, int(cols.min()), int(rows.min()),
                         int(cols.max()) + 1, int(rows.max()) + 1))
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img.astype(np.float32), boxes


def instrument_pixels(image: np.ndarray, cfg: RenderConfig, instrument: int, tol: float = 0.02) -> np.ndarray:
    """Boolean map of pixels whose colour matches an instrument's hue code."""
    mx = image.max(axis=2)
    mn = image.min(axis=2)
    sat = np.where(mx > 0, (mx - mn) / np.maximum(mx, 1e-9), 0.0)
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    delta = np.maximum(mx - mn, 1e-9)
    hue = np.where(mx == r, np.mod((g - b) / delta, 6.0),
                   np.where(mx == g, (b - r) / delta + 2.0, (r - g) / delta + 4.0)) / 6.0
    diff = np.abs(hue - cfg.instrument_hue(instrument))
    diff = np.minimum(diff, 1.0 - diff)
    return (sat > 0.9) & (diff < tol)


@dataclass
class GeneratedData:
    dataset: Dataset
    images: np.ndarray
    boxes: list[list[Box]]
    scenes: list[SceneSpec]


def generate_dataset(cfg: RenderConfig, validity: ValidityMask, n_frames: int, seed: int,
                     frames_per_video: int = 5, out_dir: str | Path | None = None) -> GeneratedData:
    """Render ``n_frames`` frames grouped into synthetic videos.

    Frame ``k`` belongs to video ``k // frames_per_video``; its scene seed
    is derived from ``(seed, k)`` only, so frames can be rendered in any
    order or in parallel.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if frames_per_video < 1:
        raise ValueError("frames_per_video must be >= 1")
    n_videos = -(-n_frames // frames_per_video)
    width = max(3, len(str(n_videos - 1)))
    anns, images, boxes, scenes = [], [], [], []
    for k in range(n_frames):
        scene = sample_scene(cfg, validity, np.random.SeedSequence([seed, k]))
        img, bx = render_frame(scene, cfg)
        vid = f"syn{k // frames_per_video:0{width}d}"
        anns.append(FrameAnnotation(vid, k % frames_per_video, scene.triplets))
        images.append(img)
        boxes.append(bx)
        scenes.append(scene)
    ds = Dataset(tuple(anns), cfg.vocab, "all", str(out_dir) if out_dir else None)
    data = GeneratedData(ds, np.stack(images), boxes, scenes)
    if out_dir is not None:
        write_store(data, out_dir)
    return data


def write_store(data: GeneratedData, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for ann, img in zip(data.dataset, data.images):
        save_image(img, out / "images" / f"{ann.key}.png")
    save_annotations(data.dataset, out / "annotations.csv")
    save_vocabulary(data.dataset.vocab, out / "vocab.txt")
    save_boxes(data.dataset, data.boxes, out / "boxes.csv")


def save_image(img: np.ndarray, path: str | Path) -> None:
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PNG", optimize=False)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_images(ds: Dataset, root: str | Path | None = None) -> np.ndarray:
    root = Path(root or ds.image_source)
    return np.stack([load_image(root / "images" / f"{a.key}.png") for a in ds])


BOX_HEADER = ("video_id", "frame_index", "instrument", "x0", "y0", "x1", "y1")


def save_boxes(ds: Dataset, boxes: Sequence[Sequence[Box]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BOX_HEADER)
        for ann, frame_boxes in zip(ds, boxes):
            for b in frame_boxes:
                writer.writerow([ann.video_id, ann.frame_index, ds.vocab.instruments[b.instrument],
                                 b.x0, b.y0, b.x1, b.y1])


def load_boxes(path: str | Path, vocab: Vocabulary) -> dict[tuple[str, int], list[Box]]:
    out: dict[tuple[str, int], list[Box]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            key = (row["video_id"], int(row["frame_index"]))
            out.setdefault(key, []).append(Box(
                vocab.index("instrument", row["instrument"]),
                int(row["x0"]), int(row["y0"]), int(row["x1"]), int(row["y1"])))
    return out
