"""Brute-force answer oracle.

Recomputes targets from a SceneSpec and the instruction text alone. It is
written separately from the generator on purpose: tests compare the two.
"""
from __future__ import annotations

import re

from ..vocab_io import Vocabulary, quantize_coord

_COLOR = r"(red|green|blue|yellow)"
_SHAPE = r"(circle|square|triangle)"

_RULES = [
    ("caption", re.compile(r"what does the image describe \?")),
    ("detection", re.compile(r"detect the objects")),
    ("mim", re.compile(r"what is the color of the masked region \?")),
    ("color_of", re.compile(rf"what color is the {_SHAPE} \?")),
    ("count", re.compile(rf"how many {_SHAPE}s are there \?")),
    ("left_of", re.compile(rf"is the {_COLOR} {_SHAPE} left of the {_COLOR} {_SHAPE} \?")),
    ("describes", re.compile(r"does the image describe (.+) \?")),
    ("grounding", re.compile(rf"which region does the text {_COLOR} {_SHAPE} describe \?")),
]


class OracleError(ValueError):
    pass


def _bins(obj, canvas, vocab: Vocabulary) -> list[str]:
    h, w = canvas
    x0, y0, x1, y1 = obj.bbox
    coords = (x0 / (w - 1), y0 / (h - 1), x1 / (w - 1), y1 / (h - 1))
    return [f"<bin>{quantize_coord(c, vocab.num_bins)}" for c in coords]


def _ordered(scene):
    # leftmost first; ties broken top-down
    objs = list(scene.objects)
    out = []
    while objs:
        best = objs[0]
        for o in objs[1:]:
            if o.bbox[0] < best.bbox[0] or (o.bbox[0] == best.bbox[0] and o.bbox[1] < best.bbox[1]):
                best = o
        out.append(best)
        objs.remove(best)
    return out


def _describe(scene) -> str:
    parts = []
    for o in _ordered(scene):
        parts.append("a " + o.color + " " + o.shape)
    return " and ".join(parts)


def _find(scene, color, shape):
    hits = [o for o in scene.objects if o.color == color and o.shape == shape]
    if len(hits) != 1:
        raise OracleError(f"referent {color} {shape} matches {len(hits)} objects")
    return hits[0]


def oracle_text(scene, instruction: str, vocab: Vocabulary) -> str:
    for kind, rx in _RULES:
        m = rx.fullmatch(instruction)
        if m is None:
            continue
        g = m.groups()
        if kind == "caption":
            return _describe(scene)
        if kind == "detection":
            return " ".join(" ".join(_bins(o, scene.canvas, vocab) + [o.shape, o.color]) for o in _ordered(scene))
        if kind == "mim":
            if scene.mask is None:
                raise OracleError("scene has no masked region")
            mx0, my0, mx1, my1 = scene.mask
            for o in scene.objects:
                x0, y0, x1, y1 = o.bbox
                if x0 <= mx0 and mx1 <= x1 and y0 <= my0 and my1 <= y1:
                    return o.color
            raise OracleError("masked region covers no object")
        if kind == "color_of":
            hits = [o for o in scene.objects if o.shape == g[0]]
            if len(hits) != 1:
                raise OracleError(f"{len(hits)} objects of shape {g[0]}")
            return hits[0].color
        if kind == "count":
            return str(sum(1 for o in scene.objects if o.shape == g[0]))
        if kind == "left_of":
            a, b = _find(scene, g[0], g[1]), _find(scene, g[2], g[3])
            ca, cb = a.bbox[0] + a.bbox[2], b.bbox[0] + b.bbox[2]
            if ca == cb:
                raise OracleError("equal x-centers")
            return "yes" if ca < cb else "no"
        if kind == "describes":
            return "yes" if g[0] == _describe(scene) else "no"
        if kind == "grounding":
            return " ".join(_bins(_find(scene, g[0], g[1]), scene.canvas, vocab))
    raise OracleError(f"unparseable instruction: {instruction!r}")


def oracle_answer(scene, instruction: str, vocab: Vocabulary) -> list[int]:
    """Target token ids recomputed from the scene for ``instruction``."""
    return vocab.encode(oracle_text(scene, instruction, vocab))
