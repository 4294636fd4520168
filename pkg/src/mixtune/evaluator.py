"""Decoding, per-task metrics and the shots-matrix harness."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .mixt import IclModel
from .shapeworld.store import fnv1a64
from .shapeworld.tasks import TaskSample
from .vocab_io import MultimodalTriple, Vocabulary, deserialize_box, pack_context_window


@dataclass
class EvalConfig:
    shots: int = 0
    beam: int = 4
    max_len: int = 31
    seed: int = 0
    length_normalize: bool = False
    run_id: str = "eval"

    def __post_init__(self):
        if self.beam < 1 or self.shots < 0:
            raise ValueError("beam must be >= 1 and shots >= 0")


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    finished: bool


def beam_search(
    step_logprobs: Callable[[list[list[int]]], np.ndarray],
    eos_id: int,
    beam: int,
    max_len: int,
    length_normalize: bool = False,
) -> Hypothesis:
    """Width-``beam`` search over summed log-probabilities.

    ``step_logprobs`` maps a list of token prefixes to an array of
    next-token log-probabilities, one row per prefix. Each step keeps the
    ``beam`` best expansions of the live hypotheses; expansions ending in
    EOS move to the finished set. Search stops once no live hypothesis can
    beat the best finished one. If nothing finishes within ``max_len`` the
    best live hypothesis is returned with ``finished=False``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    live: list[tuple[list[int], float]] = [([], 0.0)]
    done: list[Hypothesis] = []

    def score(tokens, lp):
        return lp / max(len(tokens), 1) if length_normalize else lp

    for _ in range(max_len):
        lps = np.asarray(step_logprobs([t for t, _ in live]), dtype=np.float64)
        totals = lps + np.array([lp for _, lp in live])[:, None]
        flat = totals.ravel()
        k = min(beam, flat.size)
        # stable sort keeps lower token ids first among ties, matching argmax
        top = np.argsort(-flat, kind="stable")[:k]
        vocab = lps.shape[1]
        nxt = []
        for j in top:
            h, tok = divmod(int(j), vocab)
            toks = live[h][0] + [tok]
            if tok == eos_id:
                done.append(Hypothesis(toks, float(flat[j]), True))
            else:
                nxt.append((toks, float(flat[j])))
        live = nxt
        if not live:
            break
        if done and not length_normalize:
            best_done = max(h.logprob for h in done)
            if best_done >= max(lp for _, lp in live):
                break
    if done:
        return max(done, key=lambda h: score(h.tokens, h.logprob))
    toks, lp = max(live, key=lambda t: score(t[0], t[1]))
    return Hypothesis(toks, lp, False)


def greedy_decode(step_logprobs, eos_id: int, max_len: int) -> Hypothesis:
    toks, total = [], 0.0
    for _ in range(max_len):
        lp = np.asarray(step_logprobs([toks]), dtype=np.float64)[0]
        tok = int(np.argmax(lp))
        total += float(lp[tok])
        toks.append(tok)
        if tok == eos_id:
            return Hypothesis(toks, total, True)
    return Hypothesis(toks, total, False)


class ModelScorer:
    """Encodes one window once and scores decoder prefixes against it."""

    def __init__(self, model: IclModel, vocab: Vocabulary, context: Sequence[MultimodalTriple], query: MultimodalTriple):
        self.model = model
        self.vocab = vocab
        q = MultimodalTriple(query.image, query.instruction, None)
        window = pack_context_window(context, q, model.backbone.cfg.patch_size)
        tb = model.collate([window], vocab)
        with torch.no_grad():
            self.memory, self.mask = model.encode(tb)

    def __call__(self, prefixes: list[list[int]]) -> np.ndarray:
        bos = self.vocab.bos_id
        width = max(len(p) for p in prefixes) + 1
        dec = torch.full((len(prefixes), width), self.vocab.pad_id, dtype=torch.long)
        lens = []
        for r, p in enumerate(prefixes):
            dec[r, : len(p) + 1] = torch.tensor([bos] + p, dtype=torch.long)
            lens.append(len(p))
        n = len(prefixes)
        with torch.no_grad():
            logits = self.model.backbone.decode(
                dec, self.memory.expand(n, -1, -1), self.mask.expand(n, -1)
            )
            rows = logits[torch.arange(n), torch.tensor(lens)]
            return rows.double().log_softmax(-1).numpy()


def generate(model: IclModel, vocab: Vocabulary, context, query: MultimodalTriple, beam: int = 4, max_len: int = 31,
             length_normalize: bool = False) -> Hypothesis:
    """Decode the query target; trailing EOS is stripped from ``tokens``."""
    scorer = ModelScorer(model, vocab, context, query)
    if beam == 1 and not length_normalize:
        hyp = greedy_decode(scorer, vocab.eos_id, max_len)
    else:
        hyp = beam_search(scorer, vocab.eos_id, beam, max_len, length_normalize)
    if hyp.finished:
        hyp.tokens = hyp.tokens[:-1]
    return hyp


def draw_context(query_id: str, support: Sequence[TaskSample], m: int, seed: int) -> list[TaskSample]:
    """Uniform draw of ``m`` support samples without replacement, excluding the query.

    Seeded from (seed, query id) so each query's draw is independent of
    evaluation order.
    """
    cands = [s for s in support if s.id != query_id]
    if len(cands) < m:
        raise ValueError(f"support set has {len(cands)} candidates for query {query_id}, need {m}")
    if m == 0:
        return []
    rng = np.random.default_rng([seed, fnv1a64(query_id.encode("utf-8"))])
    return [cands[int(i)] for i in rng.choice(len(cands), size=m, replace=False)]


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def token_f1(pred: Sequence, gold: Sequence) -> float:
    common = {}
    for t in pred:
        common[t] = common.get(t, 0) + 1
    overlap = 0
    for t in gold:
        if common.get(t, 0) > 0:
            overlap += 1
            common[t] -= 1
    if overlap == 0:
        return 1.0 if not pred and not gold else 0.0
    p, r = overlap / len(pred), overlap / len(gold)
    return 2 * p * r / (p + r)


def _canon(text: str) -> str:
    return text.strip().lower()


def _detections(ids: Sequence[int], vocab: Vocabulary):
    """Parse (box, shape, color) groups; stops at the first malformed group."""
    out = []
    for i in range(0, len(ids) - 5, 6):
        g = ids[i : i + 6]
        if not all(vocab.is_bin(t) for t in g[:4]) or not all(vocab.is_text(t) for t in g[4:]):
            break
        out.append((deserialize_box(g[:4], vocab), vocab.id_to_token(g[4]), vocab.id_to_token(g[5])))
    return out


@dataclass
class TaskScore:
    """Per-sample metric values for one task."""

    task: str
    values: dict[str, list[float]] = field(default_factory=dict)
    malformed: int = 0
    n_samples: int = 0
    # detection is micro-averaged over gold objects
    det_hits: int = 0
    det_total: int = 0

    def add(self, metric: str, v: float):
        self.values.setdefault(metric, []).append(v)

    def summary(self) -> dict[str, float]:
        out = {k: float(np.mean(v)) for k, v in self.values.items()}
        if self.task == "detection":
            out["acc@0.5"] = self.det_hits / self.det_total if self.det_total else 0.0
        return out


def score_prediction(score: TaskScore, pred: Sequence[int], gold: Sequence[int], vocab: Vocabulary) -> None:
    task = score.task
    pred = [int(t) for t in pred]
    gold = [int(t) for t in gold]
    if task in ("vqa", "mim"):
        score.add("accuracy", float(_canon(vocab.decode(pred)) == _canon(vocab.decode(gold))))
    elif task == "caption":
        score.add("exact_match", float(_canon(vocab.decode(pred)) == _canon(vocab.decode(gold))))
        score.add("token_f1", token_f1(vocab.decode(pred).split(), vocab.decode(gold).split()))
    elif task == "grounding":
        box = deserialize_box(pred, vocab)
        if box is None:
            score.malformed += 1
            score.add("acc@0.5", 0.0)
        else:
            score.add("acc@0.5", float(iou(box, deserialize_box(gold, vocab)) >= 0.5))
    elif task == "detection":
        gold_objs = _detections(gold, vocab)
        preds = _detections(pred, vocab)
        if pred and not preds:
            score.malformed += 1
        used = [False] * len(gold_objs)
        for box, shape, color in preds:
            for gi, (gbox, gshape, gcolor) in enumerate(gold_objs):
                if not used[gi] and (shape, color) == (gshape, gcolor) and iou(box, gbox) >= 0.5:
                    used[gi] = True
                    break
        score.det_hits += sum(used)
        score.det_total += len(gold_objs)
    else:
        raise ValueError(f"unknown task {task!r}")


def metric_records(scores: Mapping[str, TaskScore], config: EvalConfig, extra: Optional[dict] = None) -> list[dict]:
    recs = []
    for task, sc in scores.items():
        for metric, value in sc.summary().items():
            rec = {
                "run_id": config.run_id,
                "task": task,
                "shots": config.shots,
                "metric": metric,
                "value": value,
                "n_samples": sc.n_samples,
                "malformed_count": sc.malformed,
            }
            rec.update(extra or {})
            recs.append(rec)
    return recs


def eval_task(
    model,
    samples: Sequence[TaskSample],
    vocab: Vocabulary,
    config: EvalConfig,
    support: Optional[Sequence[TaskSample]] = None,
) -> list[dict]:
    """Decode every sample and return metric records per task.

    ``model`` is an IclModel or any object with a ``generate(context,
    query, sample)`` method returning token ids. Context for each query is
    drawn from the same-task part of ``support`` (defaults to ``samples``,
    with the query itself excluded).
    """
    support = samples if support is None else support
    by_task: dict[str, list[TaskSample]] = {}
    for s in support:
        by_task.setdefault(s.task, []).append(s)
    scores: dict[str, TaskScore] = {}
    for s in samples:
        ctx = draw_context(s.id, by_task.get(s.task, []), config.shots, config.seed)
        triples = [c.triple for c in ctx]
        if isinstance(model, IclModel):
            pred = generate(model, vocab, triples, s.triple, config.beam, config.max_len, config.length_normalize).tokens
        else:
            pred = model.generate(triples, s.triple, s)
        sc = scores.setdefault(s.task, TaskScore(s.task))
        score_prediction(sc, pred, s.triple.target, vocab)
        sc.n_samples += 1
    return metric_records(scores, config)


def write_records(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


PRIMARY_METRIC = {"caption": "exact_match", "vqa": "accuracy", "grounding": "acc@0.5", "detection": "acc@0.5", "mim": "accuracy"}


def shots_matrix(
    models: Mapping[int, object],
    eval_shots: Sequence[int],
    samples: Sequence[TaskSample],
    vocab: Vocabulary,
    config: EvalConfig,
    support: Optional[Sequence[TaskSample]] = None,
) -> dict:
    """Evaluate every (trained shots, eval shots) pair.

    Returns ``{"records": [...], "summary": {...}}``; the summary compares
    the mean primary metric on the matched-shot diagonal against the
    off-diagonal cells per task. No threshold is applied.
    """
    if not models:
        raise ValueError("no checkpoints given")
    records = []
    for n, model in models.items():
        for m in eval_shots:
            cfg = EvalConfig(m, config.beam, config.max_len, config.seed, config.length_normalize, config.run_id)
            for r in eval_task(model, samples, vocab, cfg, support=support):
                records.append(dict(r, trained_shots=n, eval_shots=m))
    summary = {}
    for task, metric in PRIMARY_METRIC.items():
        cells = [r for r in records if r["task"] == task and r["metric"] == metric]
        if not cells:
            continue
        diag = [r["value"] for r in cells if r["trained_shots"] == r["eval_shots"]]
        off = [r["value"] for r in cells if r["trained_shots"] != r["eval_shots"]]
        summary[task] = {
            "metric": metric,
            "diagonal_mean": float(np.mean(diag)) if diag else None,
            "off_diagonal_mean": float(np.mean(off)) if off else None,
        }
    return {"records": records, "summary": summary}


def render_matrix(records: Sequence[dict], task: str, metric: str) -> str:
    """Plain-text grid: rows are trained shots, columns eval shots."""
    cells = {(r["trained_shots"], r["eval_shots"]): r["value"] for r in records if r["task"] == task and r["metric"] == metric}
    rows = sorted({k[0] for k in cells})
    cols = sorted({k[1] for k in cells})
    head = f"{task}/{metric}".ljust(18) + "".join(f"eval={c}".rjust(10) for c in cols)
    lines = [head]
    for n in rows:
        line = f"trained={n}".ljust(18)
        for m in cols:
            v = cells.get((n, m))
            line += ("-" if v is None else f"{v:.4f}").rjust(10)
        lines.append(line)
    return "\n".join(lines)
