"""Task grammars and mixed-dataset generation over synthetic scenes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from ..vocab_io import MultimodalTriple, Vocabulary, build_vocabulary, serialize_target_box
from .scene import COLORS, SHAPES, SceneSpec, render_scene, sample_scene

TASKS = ("caption", "vqa", "grounding", "detection", "mim")

CAPTION_PROMPT = "what does the image describe ?"
DETECTION_PROMPT = "detect the objects"
MIM_PROMPT = "what is the color of the masked region ?"
NUMBER_WORDS = ("0", "1", "2", "3", "4")

WORDS = (
    *SHAPES,
    *(s + "s" for s in SHAPES),
    *COLORS,
    *NUMBER_WORDS,
    "yes", "no", "a", "and", "the", "of", "is", "are", "there", "what", "does",
    "image", "describe", "color", "how", "many", "left", "which", "region", "text",
    "detect", "objects", "masked", "?",
)


class AmbiguousSceneError(ValueError):
    """The scene admits no unambiguous question or referent for the task."""


def task_vocabulary(num_bins: int = 1000) -> Vocabulary:
    return build_vocabulary(list(WORDS), num_bins)


@dataclass
class TaskSample:
    id: str
    task: str
    triple: MultimodalTriple
    scene: SceneSpec
    instruction_text: str
    target_text: str
    bbox: Optional[tuple[int, int, int, int]] = None


def left_to_right(objects):
    return sorted(objects, key=lambda o: (o.bbox[0], o.bbox[1]))


def caption_text(objects) -> str:
    return " and ".join(f"a {o.color} {o.shape}" for o in left_to_right(objects))


def normalized_box(bbox, canvas) -> tuple[float, float, float, float]:
    h, w = canvas
    x0, y0, x1, y1 = bbox
    return (x0 / (w - 1), y0 / (h - 1), x1 / (w - 1), y1 / (h - 1))


def box_tokens(bbox, canvas, vocab: Vocabulary) -> list[str]:
    ids = serialize_target_box(normalized_box(bbox, canvas), vocab)
    return [vocab.id_to_token(i) for i in ids]


def _unique_pairs(scene: SceneSpec):
    counts = {}
    for o in scene.objects:
        counts[(o.color, o.shape)] = counts.get((o.color, o.shape), 0) + 1
    return [o for o in scene.objects if counts[(o.color, o.shape)] == 1]


def _vqa_candidates(scene: SceneSpec, rng: np.random.Generator):
    """All admissible (question, answer) pairs, one list per template."""
    objs = scene.objects
    out = []
    by_shape = {s: [o for o in objs if o.shape == s] for s in SHAPES}
    color_q = [
        (f"what color is the {s} ?", by_shape[s][0].color) for s in SHAPES if len(by_shape[s]) == 1
    ]
    out.append(color_q)
    out.append([(f"how many {s}s are there ?", NUMBER_WORDS[len(by_shape[s])]) for s in SHAPES])
    uniq = _unique_pairs(scene)
    left_q = []
    for a in uniq:
        for b in uniq:
            if a is b or a.x_center == b.x_center:
                continue
            left_q.append(
                (
                    f"is the {a.color} {a.shape} left of the {b.color} {b.shape} ?",
                    "yes" if a.x_center < b.x_center else "no",
                )
            )
    out.append(left_q)
    true_cap = caption_text(objs)
    # a false caption recolors one object
    k = int(rng.integers(len(objs)))
    alt = [c for c in COLORS if c != objs[k].color]
    recolored = [
        type(o)(o.shape, alt[int(rng.integers(len(alt)))], o.bbox) if i == k else o
        for i, o in enumerate(objs)
    ]
    out.append(
        [
            (f"does the image describe {true_cap} ?", "yes"),
            (f"does the image describe {caption_text(recolored)} ?", "no"),
        ]
    )
    return [c for c in out if c]


def make_sample(
    scene: SceneSpec,
    task: str,
    rng_seed,
    vocab: Vocabulary,
    sample_id: str = "",
) -> TaskSample:
    """Build one task sample for ``scene``.

    Raises AmbiguousSceneError when the task cannot be posed without an
    ambiguous referent; callers resample the scene.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    rng = np.random.default_rng(rng_seed)
    bbox = None
    if task == "caption":
        instr, target = CAPTION_PROMPT, caption_text(scene.objects)
    elif task == "vqa":
        templates = _vqa_candidates(scene, rng)
        pool = templates[int(rng.integers(len(templates)))]
        instr, target = pool[int(rng.integers(len(pool)))]
    elif task == "grounding":
        uniq = _unique_pairs(scene)
        if not uniq:
            raise AmbiguousSceneError("no object with a unique color and shape")
        obj = uniq[int(rng.integers(len(uniq)))]
        instr = f"which region does the text {obj.color} {obj.shape} describe ?"
        target = " ".join(box_tokens(obj.bbox, scene.canvas, vocab))
        bbox = obj.bbox
    elif task == "detection":
        instr = DETECTION_PROMPT
        groups = [
            " ".join(box_tokens(o.bbox, scene.canvas, vocab) + [o.shape, o.color])
            for o in left_to_right(scene.objects)
        ]
        target = " ".join(groups)
    else:
        obj = scene.objects[int(rng.integers(len(scene.objects)))]
        x0, y0, x1, y1 = obj.bbox
        qw, qh = (x1 - x0 + 1) // 4, (y1 - y0 + 1) // 4
        scene = scene.with_mask((x0 + qw, y0 + qh, x1 - qw, y1 - qh))
        instr, target = MIM_PROMPT, obj.color
        bbox = obj.bbox
    triple = MultimodalTriple(render_scene(scene), vocab.encode(instr), vocab.encode(target))
    triple.validate(vocab)
    return TaskSample(sample_id, task, triple, scene, instr, target, bbox)


def task_of_instruction(instruction: str) -> str:
    """Task tag implied by an instruction string under the fixed grammars."""
    if instruction == CAPTION_PROMPT:
        return "caption"
    if instruction == DETECTION_PROMPT:
        return "detection"
    if instruction == MIM_PROMPT:
        return "mim"
    if instruction.startswith("which region does the text "):
        return "grounding"
    return "vqa"


def mixture_counts(size: int, mix: Mapping[str, float], exclude: Sequence[str] = ()) -> dict[str, int]:
    """Integer per-task counts for ``size`` samples, within one of ``size * p``.

    Excluded tasks are dropped and the remaining proportions renormalized.
    Largest-remainder rounding keeps the total exact.
    """
    for t in list(mix) + list(exclude):
        if t not in TASKS:
            raise ValueError(f"unknown task {t!r}")
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"mixture proportions sum to {total}, expected 1")
    if any(p < 0 for p in mix.values()):
        raise ValueError("mixture proportions must be non-negative")
    kept = {t: p for t, p in mix.items() if t not in exclude and p > 0}
    if not kept:
        raise ValueError("mixture is empty after exclusions")
    z = sum(kept.values())
    raw = {t: size * p / z for t, p in kept.items()}
    counts = {t: int(np.floor(v)) for t, v in raw.items()}
    short = size - sum(counts.values())
    order = sorted(kept, key=lambda t: (-(raw[t] - counts[t]), TASKS.index(t)))
    for t in order[:short]:
        counts[t] += 1
    return {t: counts[t] for t in TASKS if t in counts}


def parse_mix(text: str) -> dict[str, float]:
    """Parse ``"caption:0.3,vqa:0.7"``."""
    mix = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, val = part.partition(":")
        if not val:
            raise ValueError(f"bad mixture entry {part!r}")
        mix[name.strip()] = float(val)
    return mix


DEFAULT_MIX = {"caption": 0.3, "vqa": 0.3, "grounding": 0.2, "detection": 0.1, "mim": 0.1}


def generate_dataset(
    size: int,
    mix: Mapping[str, float] = DEFAULT_MIX,
    seed: int = 0,
    canvas: tuple[int, int] = (64, 64),
    vocab: Optional[Vocabulary] = None,
    exclude: Sequence[str] = (),
    id_prefix: str = "s",
) -> list[TaskSample]:
    vocab = vocab or task_vocabulary()
    counts = mixture_counts(size, mix, exclude)
    tasks = [t for t, c in counts.items() for _ in range(c)]
    order = np.random.default_rng([seed, 0xD17]).permutation(len(tasks))
    samples = []
    for i, j in enumerate(order):
        task = tasks[j]
        attempt = 0
        while True:
            scene = sample_scene([seed, i, attempt], canvas)
            try:
                s = make_sample(scene, task, [seed, i, attempt, 1], vocab, f"{id_prefix}{i:06d}")
                break
            except AmbiguousSceneError:
                attempt += 1
        samples.append(s)
    return samples
