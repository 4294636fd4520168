"""
Few-shot grounding with a frozen backbone
=========================================

A deliberately short version of the full experiment: pretrain a small
backbone zero-shot on a task mixture, freeze it, train the in-context
prefix module with two shots, and compare grounding accuracy.

With the step counts below this runs in about two minutes on one core.
Both accuracies stay near chance at this length, so raise STEPS (and the
backbone batch size) for a meaningful comparison.
"""

import time

import torch

from mixtune.backbone import Backbone, BackboneConfig
from mixtune.evaluator import EvalConfig, eval_task
from mixtune.mixt import IclModel, init_from_backbone
from mixtune.shapeworld import generate_dataset, task_vocabulary
from mixtune.trainer import TrainConfig, Trainer

torch.set_num_threads(1)
STEPS = 300
t0 = time.time()

# coarse bins keep the coordinate vocabulary small for a short run
vocab = task_vocabulary(32)
train = generate_dataset(2000, seed=0, vocab=vocab)
held = generate_dataset(300, mix={"grounding": 1.0}, seed=99, vocab=vocab, id_prefix="h")
queries, support = held[:100], held[100:]

backbone = Backbone(BackboneConfig(vocab_size=vocab.size), 0)
zero = IclModel(backbone)
Trainer(zero, train, vocab, TrainConfig(lr=1e-3, batch_size=16, shot_policy="fixed:0", train_mode="backbone",
                                         max_steps=STEPS)).run()
zs = eval_task(zero.eval(), queries, vocab, EvalConfig(shots=0, beam=1), support=support)[0]

# the prefix module starts from the backbone's token tables; the backbone stays frozen
model = IclModel(backbone, init_from_backbone(backbone, 1, vocab.bos_id, vocab.eos_id))
Trainer(model, train, vocab, TrainConfig(lr=3e-3, batch_size=16, shot_policy="fixed:2", max_steps=STEPS)).run()
fs = eval_task(model.eval(), queries, vocab, EvalConfig(shots=2, beam=1), support=support)[0]

print(f"zero-shot acc@0.5 {zs['value']:.3f}")
print(f"2-shot    acc@0.5 {fs['value']:.3f}")
print(f"{time.time() - t0:.0f}s")
