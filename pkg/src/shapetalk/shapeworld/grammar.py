"""Caption grammar, reference generation, and tuple extraction.

Captions follow ``a <size?> <color> <shape> (<relation> a <size?> <color>
<shape>)*`` over the objects in canonical (x, then y) order. Sizes are
stated for scenes with up to two objects and omitted for three-object
scenes, which keeps every caption inside the token budget while all
references of a record share one tuple set.

Relation tuples are canonicalized so that mirrored surface forms ("x left
of y" vs "y right of x") extract identically.
"""

import math

import numpy as np

from .scenes import COLORS, SHAPES, SIZES, Scene

RELATIONS = ("left of", "right of", "above", "below", "next to")
INVERSE_RELATION = {
    "left of": "right of",
    "right of": "left of",
    "above": "below",
    "below": "above",
    "next to": "next to",
}

# center distance below which two objects read as "next to" each other
NEXT_TO_DISTANCE = 9.0

LEXICON = sorted(
    {"a"}
    | set(SHAPES)
    | set(COLORS)
    | set(SIZES)
    | {w for rel in RELATIONS for w in rel.split()}
)


def _sorted_objects(scene: Scene):
    return sorted(scene.objects, key=lambda o: (o.x, o.y))


def _sizes_included(scene: Scene) -> bool:
    return len(scene.objects) <= 2


def _relation(a, b) -> str:
    """Geometric relation from ``a`` to ``b``, with ``a`` canonically first."""
    dx, dy = b.x - a.x, b.y - a.y
    if math.hypot(dx, dy) < NEXT_TO_DISTANCE:
        return "next to"
    if abs(dx) >= abs(dy):
        return "left of"
    return "above" if dy > 0 else "below"


def _canonical_relation_tuple(shape_a: str, rel: str, shape_b: str):
    if rel == "right of":
        return (shape_b, "left of", shape_a)
    if rel == "below":
        return (shape_b, "above", shape_a)
    if rel == "next to":
        s1, s2 = sorted((shape_a, shape_b))
        return (s1, "next to", s2)
    return (shape_a, rel, shape_b)


def scene_tuples(scene: Scene) -> set:
    """Ground-truth tuple set of a scene, as expressed by its captions."""
    objs = _sorted_objects(scene)
    with_sizes = _sizes_included(scene)
    tuples = set()
    for o in objs:
        tuples.add((o.shape,))
        tuples.add((o.shape, o.color))
        if with_sizes:
            tuples.add((o.shape, o.size))
    for a, b in zip(objs, objs[1:]):
        tuples.add(_canonical_relation_tuple(a.shape, _relation(a, b), b.shape))
    return tuples


def _object_phrase(obj, with_size: bool, color_first: bool) -> str:
    attrs = [obj.color]
    if with_size:
        attrs = [obj.color, obj.size] if color_first else [obj.size, obj.color]
    return "a " + " ".join(attrs) + " " + obj.shape


def _surface_forms(scene: Scene):
    """Enumerate all truthful surface forms of a scene's caption."""
    objs = _sorted_objects(scene)
    with_sizes = _sizes_included(scene)
    rels = [_relation(a, b) for a, b in zip(objs, objs[1:])]
    n = len(objs)
    forms = []
    n_attr_bits = n if with_sizes else 0
    for reverse in (False, True):
        if reverse and n == 1:
            continue
        order = list(reversed(objs)) if reverse else list(objs)
        order_rels = (
            [INVERSE_RELATION[r] for r in reversed(rels)] if reverse else list(rels)
        )
        for bits in range(2**n_attr_bits):
            parts = []
            for i, obj in enumerate(order):
                if i > 0:
                    parts.append(order_rels[i - 1])
                color_first = bool(bits >> i & 1) if with_sizes else True
                parts.append(_object_phrase(obj, with_sizes, color_first))
            forms.append(" ".join(parts))
    return forms


def describe(scene: Scene, rng: np.random.Generator, n_refs: int = 5) -> list:
    """Generate ``n_refs`` reference captions sharing the scene's tuple set.

    Surface forms are drawn without replacement until exhausted, then cycle
    (single-object scenes have few distinct forms).
    """
    if n_refs < 1:
        raise ValueError("n_refs must be >= 1")
    forms = _surface_forms(scene)
    perm = list(rng.permutation(len(forms)))
    return [forms[perm[i % len(forms)]] for i in range(n_refs)]


def extract_tuples(caption: str) -> set:
    """Best-effort parse of a caption back into its tuple set.

    Grammar-valid captions extract exactly; unparseable fragments are
    skipped and never raise.
    """
    words = caption.lower().split()
    objects = []  # (shape, color or None, size or None)
    relations = []  # (object index of left operand, relation)
    color = size = None
    i = 0
    while i < len(words):
        w = words[i]
        nxt = words[i + 1] if i + 1 < len(words) else None
        if w in SHAPES:
            objects.append((w, color, size))
            color = size = None
        elif w in COLORS:
            color = w
        elif w in SIZES:
            size = w
        elif w in ("left", "right") and nxt == "of":
            relations.append((len(objects) - 1, f"{w} of"))
            i += 1
        elif w == "next" and nxt == "to":
            relations.append((len(objects) - 1, "next to"))
            i += 1
        elif w in ("above", "below"):
            relations.append((len(objects) - 1, w))
        i += 1

    tuples = set()
    for shape, col, sz in objects:
        tuples.add((shape,))
        if col:
            tuples.add((shape, col))
        if sz:
            tuples.add((shape, sz))
    for left_idx, rel in relations:
        if 0 <= left_idx < len(objects) - 1:
            shape_a = objects[left_idx][0]
            shape_b = objects[left_idx + 1][0]
            tuples.add(_canonical_relation_tuple(shape_a, rel, shape_b))
    return tuples
