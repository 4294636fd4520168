"""
Packing in-context examples
===========================

Shows how support examples and a query are laid out in one context
window, how the token budget is counted, and how windows are batched.
"""

from mixtune.shapeworld import generate_dataset, task_vocabulary
from mixtune.vocab_io import ContextBudgetError, MultimodalTriple, collate_batch, pack_context_window

vocab = task_vocabulary(1000)
samples = generate_dataset(20, mix={"vqa": 1.0}, seed=1, vocab=vocab)

context = [s.triple for s in samples[:2]]
q = samples[2].triple
query = MultimodalTriple(q.image, q.instruction)

# every support example is [BOS, patches, instruction, target, EOS];
# the query contributes its patches and instruction
window = pack_context_window(context, query, patch_size=8)
print("shots:", window.n_shots)
print("segment boundaries:", window.boundaries)
print("context budget:", window.context_budget, "query source:", window.query_source_len, "total:", window.budget)

# a window that does not fit is rejected with the overflow
try:
    pack_context_window(context, query, patch_size=8, context_limit=100)
except ContextBudgetError as exc:
    print("rejected:", exc)

# batching pads each shot position to its own maximum
windows = [pack_context_window([a.triple, b.triple], c.triple, 8) for a, b, c in zip(samples[3:], samples[6:], samples[9:12])]
batch = collate_batch(windows, vocab.pad_id, vocab.bos_id, vocab.eos_id)
print("decoder input:", batch.decoder_input.shape, "labels:", batch.labels.shape)
print("first label row:", vocab.decode(batch.labels[0][batch.label_mask[0]].tolist()))
