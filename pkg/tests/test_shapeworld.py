from collections import Counter

import numpy as np
import pytest

from mixtune.shapeworld import (
    TASKS,
    DatasetError,
    OracleError,
    SceneObject,
    SceneSpec,
    fnv1a64,
    generate_dataset,
    make_sample,
    mixture_counts,
    oracle_answer,
    read_dataset,
    render_scene,
    sample_scene,
    write_dataset,
)
from mixtune.shapeworld.scene import MIN_SIDE, RGB, boxes_disjoint
from mixtune.shapeworld.store import fnv1a64_many


def test_sample_scene_deterministic():
    assert sample_scene(0) == sample_scene(0)
    assert sample_scene(0) != sample_scene(1)


def test_scene_invariants_and_count_distribution():
    counts = Counter()
    for seed in range(10_000):
        sc = sample_scene(seed)
        n = len(sc.objects)
        assert 1 <= n <= 4
        counts[n] += 1
        for i, a in enumerate(sc.objects):
            x0, y0, x1, y1 = a.bbox
            assert 0 <= x0 and 0 <= y0 and x1 < 64 and y1 < 64
            assert x1 - x0 >= MIN_SIDE and y1 - y0 >= MIN_SIDE
            for b in sc.objects[i + 1 :]:
                assert boxes_disjoint(a.bbox, b.bbox)
    for n in range(1, 5):
        assert abs(counts[n] / 10_000 - 0.25) <= 0.03


def test_render_background_and_color():
    sc = SceneSpec((64, 64), (SceneObject("square", "red", (10, 10, 29, 29)),))
    img = render_scene(sc)
    assert tuple(img[0, 0]) == (255, 255, 255)
    region = img[10:30, 10:30].reshape(-1, 3)
    frac = np.mean(np.all(region == RGB["red"], axis=1))
    assert frac >= 0.6
    assert render_scene(sc).tobytes() == img.tobytes()


def test_render_dominant_color_per_object():
    for seed in range(300):
        sc = sample_scene(seed)
        img = render_scene(sc)
        for o in sc.objects:
            x0, y0, x1, y1 = o.bbox
            px = img[y0 : y1 + 1, x0 : x1 + 1].reshape(-1, 3)
            colored = Counter(tuple(p) for p in px if tuple(p) != (255, 255, 255))
            assert colored.most_common(1)[0][0] == RGB[o.color]


def test_vqa_single_object(vocab):
    sc = SceneSpec((64, 64), (SceneObject("circle", "red", (8, 8, 24, 24)),))
    assert vocab.decode(oracle_answer(sc, "what color is the circle ?", vocab)) == "red"


def test_grounding_bins(vocab):
    sc = SceneSpec((64, 64), (SceneObject("circle", "red", (8, 8, 24, 24)),))
    s = make_sample(sc, "grounding", 0, vocab)
    # round(8/63*999) = round(126.857) = 127, round(24/63*999) = round(380.571) = 381
    assert [vocab.bin_index(i) for i in s.triple.target] == [127, 127, 381, 381]
    assert s.instruction_text == "which region does the text red circle describe ?"


def test_caption_yes_no_question(vocab):
    sc = SceneSpec(
        (64, 64),
        (SceneObject("square", "blue", (40, 5, 55, 20)), SceneObject("circle", "red", (2, 30, 17, 45))),
    )
    cap = "a red circle and a blue square"
    assert vocab.decode(oracle_answer(sc, "what does the image describe ?", vocab)) == cap
    assert vocab.decode(oracle_answer(sc, f"does the image describe {cap} ?", vocab)) == "yes"
    assert vocab.decode(oracle_answer(sc, "does the image describe a red circle ?", vocab)) == "no"


def test_count_question(vocab):
    objs = tuple(SceneObject("circle", "green", (i * 20, 0, i * 20 + 10, 10)) for i in range(3))
    sc = SceneSpec((64, 64), objs)
    assert vocab.decode(oracle_answer(sc, "how many circles are there ?", vocab)) == "3"


def test_ambiguous_referents_rejected(vocab):
    objs = (SceneObject("circle", "red", (0, 0, 10, 10)), SceneObject("circle", "red", (20, 20, 30, 30)))
    sc = SceneSpec((64, 64), objs)
    from mixtune.shapeworld import AmbiguousSceneError

    with pytest.raises(AmbiguousSceneError):
        make_sample(sc, "grounding", 0, vocab)
    with pytest.raises(OracleError):
        oracle_answer(sc, "which region does the text red circle describe ?", vocab)
    with pytest.raises(OracleError):
        oracle_answer(sc, "tell me a joke", vocab)


def test_mim_mask_hides_part_of_object(vocab):
    sc = SceneSpec((64, 64), (SceneObject("square", "yellow", (10, 10, 29, 29)),))
    s = make_sample(sc, "mim", 0, vocab)
    assert s.target_text == "yellow"
    assert tuple(s.triple.image[20, 20]) == (128, 128, 128)
    assert tuple(s.triple.image[10, 10]) == RGB["yellow"]


@pytest.mark.parametrize("task", TASKS)
def test_oracle_equivalence_per_task(vocab, task):
    samples = generate_dataset(300, mix={task: 1.0}, seed=11, vocab=vocab)
    for s in samples:
        assert oracle_answer(s.scene, s.instruction_text, vocab) == s.triple.target, s.id


def test_mixture_counts_within_one():
    mix = {"caption": 0.3, "vqa": 0.3, "grounding": 0.2, "detection": 0.1, "mim": 0.1}
    for size in (7, 13, 100, 999):
        c = mixture_counts(size, mix)
        assert sum(c.values()) == size
        for t, p in mix.items():
            assert abs(c[t] - size * p) <= 1
    c = mixture_counts(100, mix, exclude=["grounding"])
    assert "grounding" not in c and sum(c.values()) == 100
    with pytest.raises(ValueError):
        mixture_counts(10, {"caption": 0.5, "vqa": 0.4})


def test_generation_deterministic(vocab):
    a = generate_dataset(40, seed=5, vocab=vocab)
    b = generate_dataset(40, seed=5, vocab=vocab)
    assert [(s.id, s.task, s.target_text, s.triple.image.tobytes()) for s in a] == [
        (s.id, s.task, s.target_text, s.triple.image.tobytes()) for s in b
    ]


def test_fnv1a64_known_values():
    # published FNV-1a 64-bit test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8
    blobs = [b"foobar", b"a", b"", b"barfoo", b"abc"]
    assert fnv1a64_many(blobs) == [fnv1a64(b) for b in blobs]


def test_dataset_roundtrip(tmp_path, vocab):
    samples = generate_dataset(100, seed=2, vocab=vocab)
    write_dataset(samples, tmp_path / "d", vocab)
    back = read_dataset(tmp_path / "d")
    assert len(back) == 100
    for a, b in zip(samples, back):
        assert (a.id, a.task, a.instruction_text, a.target_text, a.bbox, a.scene) == (
            b.id, b.task, b.instruction_text, b.target_text, b.bbox, b.scene
        )
        assert a.triple.instruction == b.triple.instruction and a.triple.target == b.triple.target
        assert np.array_equal(a.triple.image, b.triple.image)


def test_dataset_corruption_names_sample(tmp_path, vocab):
    samples = generate_dataset(10, seed=2, vocab=vocab)
    d = write_dataset(samples, tmp_path / "d", vocab)
    victim = d / "images" / f"{samples[4].id}.ppm"
    data = bytearray(victim.read_bytes())
    data[-1] ^= 0xFF
    victim.write_bytes(bytes(data))
    with pytest.raises(DatasetError, match=samples[4].id):
        read_dataset(d)
    victim.unlink()
    with pytest.raises(DatasetError, match="missing image"):
        read_dataset(d)


def test_empty_dataset(tmp_path, vocab):
    d = write_dataset([], tmp_path / "e", vocab)
    assert (d / "manifest.jsonl").read_bytes() == b""
    assert read_dataset(d) == []


@pytest.mark.parametrize("blob", [b"", b"not an image", b"P6\n3 2\n255\n12", b"P3\n1 1\n255\n0 0 0"])
def test_decode_ppm_rejects_garbage(blob):
    from mixtune.shapeworld.store import decode_ppm

    with pytest.raises(ValueError):
        decode_ppm(blob)
