"""
The five ShapeWorld tasks
=========================

Samples one scene, renders it and prints the instruction/target pair
each task makes from it. The rendered image is written as a PPM file
next to this script.
"""

from pathlib import Path

from mixtune.shapeworld import TASKS, AmbiguousSceneError, make_sample, oracle_answer, sample_scene, task_vocabulary
from mixtune.shapeworld.store import write_ppm

vocab = task_vocabulary(1000)

# a scene is a list of non-overlapping objects on a white canvas
scene = sample_scene(7)
for obj in scene.objects:
    print(obj.color, obj.shape, obj.bbox)

# each task turns the scene into (image, instruction, target);
# coordinates become <bin>k tokens
for task in TASKS:
    try:
        s = make_sample(scene, task, 0, vocab)
    except AmbiguousSceneError as exc:
        print(f"{task:10s} skipped: {exc}")
        continue
    print(f"{task:10s} {s.instruction_text!r} -> {s.target_text!r}")
    # the independent answer checker agrees with the generator
    assert oracle_answer(s.scene, s.instruction_text, vocab) == s.triple.target

out = Path(__file__).with_name("scene.ppm")
write_ppm(out, make_sample(scene, "caption", 0, vocab).triple.image)
print("wrote", out)
