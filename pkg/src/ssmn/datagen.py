"""Synthetic point-annotated line-drawing benchmark and dataset I/O.

A category is a prototype drawing: K named anchor points joined by a
spanning tree of strokes, each anchor decorated with a small motif.
Instances are rendered under random rotation, scale, translation,
optional horizontal flip, anchor jitter and stroke-width jitter.

On disk a dataset is a directory holding ``manifest.jsonl`` (one record per
image), ``pairs_<split>.tsv`` (ordered source/target ids) and binary PGM
rasters under ``images/``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import read_pgm, write_pgm

VOCABULARY = (
    "head", "tail", "wing", "leg", "eye", "beak", "fin", "horn", "ear", "nose",
    "arm", "hand", "foot", "neck", "mouth", "petal", "stem", "leaf", "root", "wheel",
    "handle", "blade", "tip", "base", "cap", "lid", "spout", "door", "window", "roof",
    "antenna", "shell", "claw", "trunk", "seat", "pedal", "mast", "sail", "hull", "lens",
)
MOTIFS = ("circle", "square", "cross", "dot", "triangle", "fork", "arc", "bar")
RASTER_SIZE = 128
COORD_DIGITS = 6
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Malformed or inconsistent dataset."""


@dataclass(frozen=True)
class PartPoint:
    name: str
    x: float
    y: float

    def __post_init__(self):
        if not self.name:
            raise ValueError("part name must be non-empty")
        if not (0 <= self.x <= 1 and 0 <= self.y <= 1):
            raise ValueError(f"part {self.name!r} outside [0,1]^2: ({self.x}, {self.y})")


@dataclass
class AnnotatedImage:
    id: str
    raster: np.ndarray
    parts: list[PartPoint]
    category: str
    split: str | None = None

    def __post_init__(self):
        names = [p.name for p in self.parts]
        if len(names) < 2:
            raise ValueError(f"image {self.id}: need at least 2 parts, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError(f"image {self.id}: duplicate part names {names}")

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.parts]

    @property
    def locations(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.parts], dtype=np.float64)


@dataclass
class CategoryPrototype:
    anchors: np.ndarray  # (K, 2) normalized x, y
    names: list[str]
    motifs: list[str]
    motif_sizes: np.ndarray
    motif_angles: np.ndarray
    edges: list[tuple[int, int]]
    body: tuple[float, float, float, float, float] | None  # cx, cy, rx, ry, angle

    @property
    def k(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class TransformRanges:
    rotation_deg: float = 30.0
    scale: tuple[float, float] = (0.8, 1.2)
    translation: float = 0.1
    flip_prob: float = 0.2
    jitter: float = 0.01
    stroke_width: tuple[float, float] = (1.2, 2.2)


@dataclass(frozen=True)
class InstanceTransform:
    rotation_deg: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    flip: bool = False

    def linear(self) -> np.ndarray:
        a = math.radians(self.rotation_deg)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        flip = np.diag([-1.0, 1.0]) if self.flip else np.eye(2)
        return self.scale * rot @ flip

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        c = np.array([0.5, 0.5])
        return (pts - c) @ self.linear().T + c + np.array([self.tx, self.ty])


def preferred_motif(name: str) -> str:
    return MOTIFS[VOCABULARY.index(name) % len(MOTIFS)] if name in VOCABULARY else MOTIFS[0]


def gen_prototype(seed, k: int = 10, min_dist: float = 0.1, lo: float = 0.22, hi: float = 0.78,
                  motif_consistency: float = 0.6) -> CategoryPrototype:
    """Deterministic category prototype for ``seed`` (int or int sequence)."""
    if not 2 <= k <= 12:
        raise ValueError(f"number of parts must be in [2, 12], got {k}")
    if min_dist < 0.05:
        raise ValueError("anchor spacing below 0.05 is not allowed")
    rng = np.random.default_rng(seed)
    anchors = np.empty((0, 2))
    for _ in range(20000):
        p = rng.uniform(lo, hi, size=2)
        if anchors.size == 0 or np.min(np.hypot(*(anchors - p).T)) >= min_dist:
            anchors = np.vstack([anchors, p])
            if len(anchors) == k:
                break
    else:
        raise RuntimeError("could not place anchors; lower min_dist or k")
    names = [VOCABULARY[i] for i in rng.choice(len(VOCABULARY), size=k, replace=False)]
    motifs = [preferred_motif(n) if rng.random() < motif_consistency else MOTIFS[rng.integers(len(MOTIFS))]
              for n in names]
    sizes = rng.uniform(0.022, 0.035, size=k)
    angles = rng.uniform(0, 2 * math.pi, size=k)
    anchors = np.round(anchors, COORD_DIGITS)
    edges = _spanning_tree(anchors)
    extra = int(rng.integers(0, 3))
    for _ in range(extra):
        i, j = sorted(rng.choice(k, size=2, replace=False).tolist())
        if (i, j) not in edges:
            edges.append((i, j))
    body = None
    if rng.random() < 0.5:
        c = anchors.mean(axis=0)
        body = (float(c[0]), float(c[1]), float(rng.uniform(0.12, 0.2)), float(rng.uniform(0.08, 0.15)),
                float(rng.uniform(0, math.pi)))
    return CategoryPrototype(anchors, names, motifs, sizes, angles, edges, body)


def _spanning_tree(pts: np.ndarray) -> list[tuple[int, int]]:
    k = len(pts)
    d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
    in_tree = [0]
    edges = []
    while len(in_tree) < k:
        best = None
        for i in in_tree:
            for j in range(k):
                if j in in_tree:
                    continue
                if best is None or d[i, j] < best[0]:
                    best = (d[i, j], i, j)
        _, i, j = best
        edges.append((min(i, j), max(i, j)))
        in_tree.append(j)
    return edges


def _circle(n=16, r=1.0, start=0.0, stop=2 * math.pi):
    t = np.linspace(start, stop, n + 1)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def _polyline_segments(pts) -> list[np.ndarray]:
    pts = np.asarray(pts, dtype=np.float64)
    return [pts[i:i + 2] for i in range(len(pts) - 1)]


def motif_strokes(kind: str) -> list[tuple[list[np.ndarray], float]]:
    """Unit-size motif as (segments, width multiplier) groups around the origin."""
    if kind == "circle":
        return [(_polyline_segments(_circle()), 1.0)]
    if kind == "square":
        sq = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1], [-1, -1]]) * 0.8
        return [(_polyline_segments(sq), 1.0)]
    if kind == "cross":
        return [([np.array([[-1, 0], [1, 0]]), np.array([[0, -1], [0, 1]])], 1.0)]
    if kind == "dot":
        return [([np.array([[0.0, 0.0], [0.0, 0.0]])], 4.0)]
    if kind == "triangle":
        tri = np.array([[0, -1], [0.87, 0.5], [-0.87, 0.5], [0, -1]])
        return [(_polyline_segments(tri), 1.0)]
    if kind == "fork":
        return [([np.array([[0, 0], [0, 1]]), np.array([[0, 0], [-0.8, -0.8]]), np.array([[0, 0], [0.8, -0.8]])], 1.0)]
    if kind == "arc":
        return [(_polyline_segments(_circle(12, 1.0, 0.0, math.pi)), 1.0)]
    if kind == "bar":
        return [([np.array([[-1.0, 0.0], [1.0, 0.0]])], 2.5)]
    raise ValueError(f"unknown motif {kind!r}")


def _segment_coverage(segs: np.ndarray, widths: np.ndarray, size: int) -> np.ndarray:
    """Anti-aliased ink coverage of thick segments given in pixel units."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    cover = np.zeros(px.shape[0])
    for start in range(0, len(segs), 64):
        a = segs[start:start + 64, 0]
        b = segs[start:start + 64, 1]
        w = widths[start:start + 64]
        ab = b - a
        denom = np.maximum((ab * ab).sum(1), 1e-12)
        ap = px[:, None, :] - a[None]
        t = np.clip((ap * ab[None]).sum(-1) / denom[None], 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        d = np.hypot(*(px[:, None, :] - closest).transpose(2, 0, 1))
        c = np.clip(w[None] / 2 + 0.5 - d, 0.0, 1.0)
        cover = np.maximum(cover, c.max(axis=1))
    return cover.reshape(size, size)


def render(proto: CategoryPrototype, transform: InstanceTransform, anchors: np.ndarray | None = None,
           stroke_width: float = 1.6, size: int = RASTER_SIZE) -> np.ndarray:
    """Rasterize the prototype. ``anchors`` (already transformed) override
    the transformed prototype anchors, e.g. to include jitter."""
    lin = transform.linear()
    pts = transform.apply(proto.anchors) if anchors is None else np.asarray(anchors)
    segs, widths = [], []
    for i, j in proto.edges:
        segs.append(np.stack([pts[i], pts[j]]))
        widths.append(stroke_width)
    for a in range(proto.k):
        ca, sa = math.cos(proto.motif_angles[a]), math.sin(proto.motif_angles[a])
        local = np.array([[ca, -sa], [sa, ca]]) * proto.motif_sizes[a]
        for group, wmul in motif_strokes(proto.motifs[a]):
            for seg in group:
                segs.append(pts[a] + seg @ local.T @ lin.T)
                widths.append(stroke_width * wmul)
    if proto.body is not None:
        cx, cy, rx, ry, ang = proto.body
        ring = _circle(40)
        ring = ring * np.array([rx, ry])
        c, s = math.cos(ang), math.sin(ang)
        ring = ring @ np.array([[c, -s], [s, c]]).T + np.array([cx, cy])
        for seg in _polyline_segments(transform.apply(ring)):
            segs.append(seg)
            widths.append(stroke_width)
    segs = np.asarray(segs) * size
    cover = _segment_coverage(segs, np.asarray(widths), size)
    # quantize so in-memory rasters equal their PGM round trip
    return np.round((1.0 - cover) * 255.0) / 255.0


def sample_transform(rng: np.random.Generator, ranges: TransformRanges) -> InstanceTransform:
    return InstanceTransform(
        rotation_deg=float(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)),
        scale=float(rng.uniform(*ranges.scale)),
        tx=float(rng.uniform(-ranges.translation, ranges.translation)),
        ty=float(rng.uniform(-ranges.translation, ranges.translation)),
        flip=bool(rng.random() < ranges.flip_prob),
    )


def render_instance(proto: CategoryPrototype, rng, ranges: TransformRanges | None = None,
                    image_id: str = "img", category: str = "cat", shuffle_parts: bool = True,
                    transform: InstanceTransform | None = None, margin: float = 0.02) -> AnnotatedImage:
    """Draw one instance. A fixed ``transform`` bypasses sampling (jitter and
    width are still drawn from ``ranges``)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    ranges = ranges or TransformRanges()
    for _ in range(100):
        tf = transform or sample_transform(rng, ranges)
        pts = tf.apply(proto.anchors)
        if ranges.jitter > 0:
            pts = pts + rng.normal(0.0, ranges.jitter, size=pts.shape)
        if np.all((pts >= margin) & (pts <= 1 - margin)):
            break
        if transform is not None:
            raise ValueError("fixed transform moves anchors out of bounds")
    else:
        raise RuntimeError("could not keep anchors in bounds after 100 transform draws")
    width = float(rng.uniform(*ranges.stroke_width))
    raster = render(proto, tf, pts, width)
    pts = np.round(pts, COORD_DIGITS)
    order = rng.permutation(proto.k) if shuffle_parts else np.arange(proto.k)
    parts = [PartPoint(proto.names[i], float(pts[i, 0]), float(pts[i, 1])) for i in order]
    return AnnotatedImage(image_id, raster, parts, category)


def gold_matching(source: AnnotatedImage, target: AnnotatedImage) -> np.ndarray:
    """Source index for every target part, matched by part name."""
    index = {n: j for j, n in enumerate(source.names)}
    try:
        return np.array([index[n] for n in target.names], dtype=np.intp)
    except KeyError as e:
        raise DataError(f"target {target.id} part {e.args[0]!r} missing from source {source.id}") from None


@dataclass
class Dataset:
    root: Path | None
    images: dict[str, AnnotatedImage]
    pairs: dict[str, list[tuple[str, str]]] = field(default_factory=dict)

    def split_images(self, split: str) -> list[AnnotatedImage]:
        return [im for im in self.images.values() if im.split == split]

    def pair_list(self, split: str) -> list[tuple[AnnotatedImage, AnnotatedImage]]:
        return [(self.images[s], self.images[t]) for s, t in self.pairs.get(split, [])]

    def categories(self, split: str) -> list[str]:
        return sorted({im.category for im in self.split_images(split)})


def split_categories(categories: list[str], fractions, rng: np.random.Generator) -> dict[str, str]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(categories)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    shuffled = [categories[i] for i in rng.permutation(n)]
    out = {}
    for i, c in enumerate(shuffled):
        out[c] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return out


def enumerate_pairs(images: list[AnnotatedImage]) -> list[tuple[str, str]]:
    by_cat: dict[str, list[str]] = {}
    for im in images:
        by_cat.setdefault(im.category, []).append(im.id)
    pairs = []
    for cat in sorted(by_cat):
        ids = by_cat[cat]
        pairs.extend((s, t) for s in ids for t in ids if s != t)
    return pairs


def generate_dataset(n_categories: int, images_per_category: int, n_parts: int = 10,
                     fractions=(0.8, 0.1, 0.1), seed: int = 0,
                     ranges: TransformRanges | None = None) -> Dataset:
    """In-memory benchmark with category-disjoint splits."""
    if images_per_category < 2:
        raise ValueError("need at least two images per category to form pairs")
    ranges = ranges or TransformRanges()
    cats = [f"cat{c:03d}" for c in range(n_categories)]
    assignment = split_categories(cats, fractions, np.random.default_rng([seed, 7919]))
    images: dict[str, AnnotatedImage] = {}
    for c, cat in enumerate(cats):
        proto = gen_prototype([seed, c], n_parts)
        for i in range(images_per_category):
            im = render_instance(proto, np.random.default_rng([seed, c, i]), ranges,
                                 image_id=f"{cat}_{i:02d}", category=cat)
            im.split = assignment[cat]
            images[im.id] = im
    ds = Dataset(None, images)
    for split in SPLITS:
        ds.pairs[split] = enumerate_pairs(ds.split_images(split))
    return ds


def _fmt(v: float) -> str:
    return f"{v:.{COORD_DIGITS}f}"


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for im in ds.images.values():
        rel = f"images/{im.id}.pgm"
        write_pgm(root / rel, im.raster)
        parts = ", ".join(
            f'{{"name": {json.dumps(p.name)}, "x": {_fmt(p.x)}, "y": {_fmt(p.y)}}}' for p in im.parts
        )
        lines.append(
            f'{{"id": {json.dumps(im.id)}, "category": {json.dumps(im.category)}, '
            f'"split": {json.dumps(im.split)}, "raster_path": {json.dumps(rel)}, "parts": [{parts}]}}'
        )
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    for split, pairs in ds.pairs.items():
        text = "".join(f"{s}\t{t}\n" for s, t in pairs)
        (root / f"pairs_{split}.tsv").write_text("source_id\ttarget_id\n" + text)
    ds.root = root
    return root / "manifest.jsonl"


def build_dataset(root, n_categories: int, images_per_category: int, n_parts: int = 10,
                  fractions=(0.8, 0.1, 0.1), seed: int = 0, ranges: TransformRanges | None = None) -> Dataset:
    ds = generate_dataset(n_categories, images_per_category, n_parts, fractions, seed, ranges)
    save_dataset(ds, root)
    return ds


def check_disjoint(images) -> None:
    owner: dict[str, str] = {}
    for im in images:
        prev = owner.setdefault(im.category, im.split)
        if prev != im.split:
            raise DataError(f"category {im.category!r} appears in both {prev!r} and {im.split!r} splits")


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"no manifest.jsonl under {root}")
    images: dict[str, AnnotatedImage] = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            parts = [PartPoint(p["name"], float(p["x"]), float(p["y"])) for p in rec["parts"]]
            raster = read_pgm(root / rec["raster_path"])
            im = AnnotatedImage(rec["id"], raster, parts, rec["category"], rec.get("split"))
        except (KeyError, ValueError, OSError) as e:
            raise DataError(f"{manifest}:{lineno}: {e}") from None
        if im.id in images:
            raise DataError(f"{manifest}:{lineno}: duplicate image id {im.id!r}")
        images[im.id] = im
    check_disjoint(images.values())
    ds = Dataset(root, images)
    for split in SPLITS:
        path = root / f"pairs_{split}.tsv"
        if not path.exists():
            continue
        pairs = []
        for row in path.read_text().splitlines()[1:]:
            if not row.strip():
                continue
            s, t = row.split("\t")
            if s not in images or t not in images:
                raise DataError(f"{path}: unknown image id in pair {s!r}, {t!r}")
            if images[s].category != images[t].category:
                raise DataError(f"{path}: pair {s!r}, {t!r} crosses categories")
            pairs.append((s, t))
        ds.pairs[split] = pairs
    return ds
