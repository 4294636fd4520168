import numpy as np
import pytest
import torch

from mixtune.backbone import Backbone, BackboneConfig
from mixtune.mixt import IclModel, init_from_backbone
from mixtune.shapeworld import generate_dataset, task_vocabulary

torch.set_num_threads(1)

CANVAS = (32, 32)


@pytest.fixture(scope="session")
def vocab():
    return task_vocabulary(1000)


@pytest.fixture(scope="session")
def small_vocab():
    return task_vocabulary(64)


@pytest.fixture(scope="session")
def small_samples(small_vocab):
    return generate_dataset(120, seed=3, canvas=CANVAS, vocab=small_vocab)


def tiny_config(vocab, **kw):
    base = dict(vocab_size=vocab.size, d_model=32, n_heads=4, enc_layers=1, dec_layers=1, ffn_dim=64,
                patch_size=8, max_positions=256)
    base.update(kw)
    return BackboneConfig(**base)


def tiny_model(vocab, seed=0, mixt=True, dtype=torch.float32, **kw):
    bb = Backbone(tiny_config(vocab, **kw), seed).to(dtype)
    mx = init_from_backbone(bb, seed + 1, vocab.bos_id, vocab.eos_id) if mixt else None
    return IclModel(bb, mx).eval()


def random_image(rng, shape=CANVAS):
    return rng.integers(0, 256, size=(*shape, 3), dtype=np.uint8)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        title, ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:>2}. {title}: {detail}")
