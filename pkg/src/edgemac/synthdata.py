"""Procedurally rendered shape data for desk-scale experiments.

Ten stroke-drawn shape classes (polygons, star, ellipse, crosses, line
patterns). Every *instance* of a class has its own base geometry (rotation,
size, aspect, class-specific knobs) and acts as one matching group: views
of the same instance are renderings under stroke jitter, small rotations
and rescaling, varying stroke intensity, and background speckle noise.
Views of the same instance are matching pairs; different instances are
non-matching even within a class.

All geometry and noise flow from one seed through named substreams, so a
dataset is a pure function of its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .edgemap import EdgeMap
from .rng import substream
from .training import TrainingData, TrainingItem, TrainingTuple, initial_negatives

CLASS_NAMES = (
    "triangle", "square", "pentagon", "hexagon", "star",
    "ellipse", "cross", "tee", "zigzag", "grid",
)


def _regular_polygon(k: int):
    angles = np.linspace(0.0, 2.0 * math.pi, k, endpoint=False)
    pts = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return [np.concatenate([pts, pts[:1]])]


def _star(inner: float):
    pts = []
    for i in range(10):
        r = 1.0 if i % 2 == 0 else inner
        a = math.pi * i / 5.0
        pts.append((r * math.cos(a), r * math.sin(a)))
    pts.append(pts[0])
    return [np.asarray(pts)]


def _ellipse(aspect: float):
    angles = np.linspace(0.0, 2.0 * math.pi, 48)
    return [np.stack([np.cos(angles), aspect * np.sin(angles)], axis=1)]


def _cross(arm: float):
    a = arm
    pts = [
        (-a, -1), (a, -1), (a, -a), (1, -a), (1, a), (a, a),
        (a, 1), (-a, 1), (-a, a), (-1, a), (-1, -a), (-a, -a), (-a, -1),
    ]
    return [np.asarray(pts, dtype=float)]


def _tee():
    return [
        np.asarray([(-1.0, -1.0), (1.0, -1.0)]),
        np.asarray([(0.0, -1.0), (0.0, 1.0)]),
    ]


def _zigzag():
    return [np.asarray([(-1.0, 0.8), (-0.5, -0.8), (0.0, 0.8), (0.5, -0.8), (1.0, 0.8)])]


def _grid():
    t = 1.0 / 3.0
    return [
        np.asarray([(-1.0, -t), (1.0, -t)]),
        np.asarray([(-1.0, t), (1.0, t)]),
        np.asarray([(-t, -1.0), (-t, 1.0)]),
        np.asarray([(t, -1.0), (t, 1.0)]),
    ]


def _class_outline(name: str, rng):
    if name == "triangle":
        return _regular_polygon(3)
    if name == "square":
        return _regular_polygon(4)
    if name == "pentagon":
        return _regular_polygon(5)
    if name == "hexagon":
        return _regular_polygon(6)
    if name == "star":
        return _star(inner=rng.uniform(0.35, 0.55))
    if name == "ellipse":
        return _ellipse(aspect=rng.uniform(0.45, 0.7))
    if name == "cross":
        return _cross(arm=rng.uniform(0.25, 0.4))
    if name == "tee":
        return _tee()
    if name == "zigzag":
        return _zigzag()
    if name == "grid":
        return _grid()
    raise ValueError(f"unknown shape class {name!r}")


@dataclass(frozen=True)
class ShapeInstance:
    class_name: str
    model_id: str
    polylines: tuple
    rotation: float
    radius: float
    aspect: float


def make_instance(class_name: str, model_id: str, rng) -> ShapeInstance:
    return ShapeInstance(
        class_name=class_name,
        model_id=model_id,
        polylines=tuple(_class_outline(class_name, rng)),
        rotation=rng.uniform(0.0, 2.0 * math.pi),
        radius=rng.uniform(0.30, 0.42),
        aspect=rng.uniform(0.85, 1.15),
    )


def render_view(instance: ShapeInstance, size: int, rng) -> EdgeMap:
    """One jittered rendering of an instance on a size x size canvas."""
    grid = np.zeros((size, size))
    rot = instance.rotation + rng.uniform(-0.12, 0.12)
    scale = instance.radius * size * rng.uniform(0.85, 1.15)
    cx = size / 2.0 + rng.uniform(-0.06, 0.06) * size
    cy = size / 2.0 + rng.uniform(-0.06, 0.06) * size
    cos_r, sin_r = math.cos(rot), math.sin(rot)
    for line in instance.polylines:
        pts = np.asarray(line, dtype=float).copy()
        pts += rng.uniform(-0.03, 0.03, size=pts.shape)  # stroke jitter
        pts[:, 0] *= instance.aspect
        xs = (pts[:, 0] * cos_r - pts[:, 1] * sin_r) * scale + cx
        ys = (pts[:, 0] * sin_r + pts[:, 1] * cos_r) * scale + cy
        for i in range(len(pts) - 1):
            intensity = rng.uniform(0.55, 1.0)
            _draw_segment(grid, xs[i], ys[i], xs[i + 1], ys[i + 1], intensity)
    # faint background speckle, mostly below the initial filter threshold
    n_noise = int(0.02 * size * size)
    px = rng.integers(0, size, size=n_noise)
    py = rng.integers(0, size, size=n_noise)
    grid[py, px] = np.maximum(grid[py, px], rng.uniform(0.04, 0.18, size=n_noise))
    return EdgeMap(np.clip(grid, 0.0, 1.0))


def _draw_segment(grid, x0, y0, x1, y1, intensity):
    size = grid.shape[0]
    length = math.hypot(x1 - x0, y1 - y0)
    steps = max(2, int(2.0 * length))
    ts = np.linspace(0.0, 1.0, steps)
    xs = np.clip(np.rint(x0 + (x1 - x0) * ts).astype(int), 0, size - 1)
    ys = np.clip(np.rint(y0 + (y1 - y0) * ts).astype(int), 0, size - 1)
    grid[ys, xs] = np.maximum(grid[ys, xs], intensity)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeDataset:
    """Toy training data plus a held-out instance-retrieval evaluation set."""

    train: TrainingData
    test_queries: list      # (item_id, EdgeMap)
    test_db: list           # (item_id, EdgeMap)
    test_true_match: dict   # query id -> matching db id
    test_relevance: dict    # query id -> set of relevant db ids
    class_of: dict          # item id -> class name


def _build_split(split: str, classes, per_class: int, size: int, seed: int):
    items, tuples = [], []
    for class_name in classes:
        for i in range(per_class):
            model_id = f"{class_name}-{split}{i:02d}"
            inst = make_instance(class_name, model_id, substream(seed, "geom", model_id))
            view_rng = substream(seed, "view", model_id)
            query = TrainingItem(
                id=f"{model_id}-q", edge_map=render_view(inst, size, view_rng),
                model_id=model_id, is_query=True,
            )
            positive = TrainingItem(
                id=f"{model_id}-p", edge_map=render_view(inst, size, view_rng),
                model_id=model_id,
            )
            items.extend([query, positive])
            tuples.append((query, positive))
    finished = [
        TrainingTuple(query=q, positive=p, negatives=initial_negatives(items, q.model_id))
        for q, p in tuples
    ]
    return finished, items


def toy_shape_dataset(seed: int, size: int = 48, classes=CLASS_NAMES,
                      train_instances: int = 20, val_instances: int = 5,
                      test_instances: int = 4) -> ShapeDataset:
    """Self-contained dataset: train/validation tuples and a test retrieval set.

    Each class contributes ``train_instances`` training tuples (one per
    instance). Test instances are disjoint from training: one query view and
    one database view each, so instance retrieval has a single true match
    per query.
    """
    train_tuples, train_items = _build_split("train", classes, train_instances, size, seed)
    val_tuples, val_items = _build_split("val", classes, val_instances, size, seed)

    test_queries, test_db = [], []
    true_match, relevance, class_of = {}, {}, {}
    for class_name in classes:
        for i in range(test_instances):
            model_id = f"{class_name}-test{i:02d}"
            inst = make_instance(class_name, model_id, substream(seed, "geom", model_id))
            view_rng = substream(seed, "view", model_id)
            qid, dbid = f"{model_id}-q", f"{model_id}-db"
            test_queries.append((qid, render_view(inst, size, view_rng)))
            test_db.append((dbid, render_view(inst, size, view_rng)))
            true_match[qid] = dbid
            relevance[qid] = {dbid}
            class_of[qid] = class_name
            class_of[dbid] = class_name
    for item in train_items + val_items:
        class_of[item.id] = item.model_id.split("-")[0]

    data = TrainingData(
        tuples=train_tuples, pool=train_items,
        val_tuples=val_tuples, val_pool=val_items,
    )
    return ShapeDataset(
        train=data, test_queries=test_queries, test_db=test_db,
        test_true_match=true_match, test_relevance=relevance, class_of=class_of,
    )
