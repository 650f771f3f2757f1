"""Symbolic scene sampling for the shape world.

Scenes hold 1-3 colored shapes on a square canvas. Geometry is defined on a
fixed 32-pixel base grid; bounding boxes must stay inside the canvas and may
overlap pairwise by at most 20% IoU.
"""

from dataclasses import dataclass

import numpy as np

BASE_RESOLUTION = 32
MAX_OBJECTS = 3
MAX_BBOX_IOU = 0.2
REJECTION_LIMIT = 1000

SHAPES = ("circle", "square", "triangle", "cross", "star")

# u8 color triples so rendered images quantize exactly to bytes
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 40),
    "blue": (50, 90, 255),
    "yellow": (250, 230, 40),
    "orange": (255, 140, 30),
    "purple": (150, 50, 210),
    "cyan": (40, 220, 220),
    "pink": (255, 130, 180),
}

BACKGROUNDS = {
    "black": (0, 0, 0),
    "gray": (60, 60, 60),
}

# half-extent of the bounding box, in base-grid pixels
SIZES = {"small": 3, "large": 6}


class SceneGenerationError(Exception):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    size: str
    x: int
    y: int

    @property
    def half(self) -> int:
        return SIZES[self.size]

    def bbox(self):
        h = self.half
        return (self.x - h, self.y - h, self.x + h, self.y + h)


@dataclass(frozen=True)
class Scene:
    objects: tuple
    background: str = "black"
    resolution: int = BASE_RESOLUTION

    def to_json(self) -> dict:
        return {
            "background": self.background,
            "resolution": self.resolution,
            "objects": [
                {"shape": o.shape, "color": o.color, "size": o.size, "x": o.x, "y": o.y}
                for o in self.objects
            ],
        }

    @staticmethod
    def from_json(d: dict) -> "Scene":
        objs = tuple(
            ObjectSpec(o["shape"], o["color"], o["size"], o["x"], o["y"])
            for o in d["objects"]
        )
        return Scene(objs, d["background"], d["resolution"])


@dataclass(frozen=True)
class DomainSplit:
    name: str
    shapes: tuple
    colors: tuple
    novel_shapes: tuple = ()
    novel_colors: tuple = ()


_IN_SHAPES = SHAPES[:3]
_IN_COLORS = ("red", "green", "blue", "yellow", "orange")

DOMAINS = {
    "in": DomainSplit("in", _IN_SHAPES, _IN_COLORS),
    "near": DomainSplit("near", SHAPES[:4], _IN_COLORS, novel_shapes=("cross",)),
    "out": DomainSplit(
        "out",
        SHAPES,
        tuple(COLORS),
        novel_shapes=("star",),
        novel_colors=("purple", "cyan", "pink"),
    ),
}


def _bbox_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / area


def _has_novelty(objects, domain: DomainSplit) -> bool:
    if not domain.novel_shapes and not domain.novel_colors:
        return True
    return any(
        o.shape in domain.novel_shapes or o.color in domain.novel_colors
        for o in objects
    )


def scene_valid(objects) -> bool:
    res = BASE_RESOLUTION
    for o in objects:
        x0, y0, x1, y1 = o.bbox()
        if x0 < 0 or y0 < 0 or x1 > res - 1 or y1 > res - 1:
            return False
    for i in range(len(objects)):
        for j in range(i + 1, len(objects)):
            if _bbox_iou(objects[i].bbox(), objects[j].bbox()) > MAX_BBOX_IOU:
                return False
    return True


def sample_scene(rng: np.random.Generator, domain: DomainSplit) -> Scene:
    """Rejection-sample a valid scene for ``domain``.

    The object count is drawn once (uniform over 1..3) before the rejection
    loop, so the count distribution is not skewed by geometric rejections.
    Near/out-domain scenes must contain at least one novel attribute.
    """
    n = int(rng.integers(1, MAX_OBJECTS + 1))
    background = str(rng.choice(sorted(BACKGROUNDS)))
    res = BASE_RESOLUTION
    for _ in range(REJECTION_LIMIT):
        objects = []
        for _ in range(n):
            shape = str(rng.choice(domain.shapes))
            color = str(rng.choice(domain.colors))
            size = str(rng.choice(sorted(SIZES)))
            h = SIZES[size]
            x = int(rng.integers(h, res - h))
            y = int(rng.integers(h, res - h))
            objects.append(ObjectSpec(shape, color, size, x, y))
        if scene_valid(objects) and _has_novelty(objects, domain):
            return Scene(tuple(objects), background, res)
    raise SceneGenerationError(
        f"no valid {n}-object scene for domain {domain.name!r} "
        f"after {REJECTION_LIMIT} rejections"
    )
