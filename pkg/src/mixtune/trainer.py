"""Mixed-task in-context tuning loop.

Batches come from a global per-epoch shuffle of the whole mixed dataset,
so most batches mix several tasks. Every window in a batch shares one shot
count; context examples for a query are drawn from samples of the same
task, never including the query itself. All randomness is derived from
``(rng_seed, epoch)`` or ``(rng_seed, step)``, which makes a resumed run
reproduce an uninterrupted one exactly.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig
from .checkpoint import CheckpointError, ParameterStore, config_hash, load_checkpoint, save_checkpoint
from .mixt import IclModel, init_from_backbone
from .shapeworld.tasks import TaskSample
from .vocab_io import Vocabulary, pack_context_window

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShotPolicy:
    kind: str  # "fixed" or "uniform"
    counts: tuple[int, ...]

    @classmethod
    def parse(cls, text: str) -> "ShotPolicy":
        kind, _, rest = text.partition(":")
        try:
            counts = tuple(int(c) for c in rest.split(",") if c.strip())
        except ValueError as exc:
            raise ValueError(f"bad shot policy {text!r}") from exc
        if kind not in ("fixed", "uniform") or not counts or any(c < 0 for c in counts):
            raise ValueError(f"bad shot policy {text!r}; use fixed:N or uniform:a,b,c")
        if kind == "fixed" and len(counts) != 1:
            raise ValueError(f"fixed policy takes one count, got {text!r}")
        return cls(kind, counts)

    @property
    def max_shots(self) -> int:
        return max(self.counts)

    def draw(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return self.counts[0]
        return self.counts[int(rng.integers(len(self.counts)))]

    def __str__(self) -> str:
        return f"{self.kind}:{','.join(map(str, self.counts))}"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    warmup_ratio: float = 0.01
    weight_decay: float = 0.01
    grad_clip: float = 5.0
    epochs: int = 20
    batch_size: int = 8
    shot_policy: str = "fixed:2"
    rng_seed: int = 0
    # "caption:100,vqa:50" caps per-task sample counts; empty keeps everything
    mixture: str = ""
    exclude_tasks: str = ""
    data_fraction: float = 1.0
    max_steps: int = 0
    # "mixt" trains the prefix module over a frozen backbone; "backbone"
    # trains the bare backbone zero-shot
    train_mode: str = "mixt"

    def __post_init__(self):
        for name in ("lr", "grad_clip", "batch_size", "epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.warmup_ratio < 1 or self.weight_decay < 0:
            raise ValueError("warmup_ratio must be in [0, 1) and weight_decay >= 0")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must be in (0, 1]")
        if self.train_mode not in ("mixt", "backbone"):
            raise ValueError(f"unknown train_mode {self.train_mode!r}")
        ShotPolicy.parse(self.shot_policy)

    @property
    def policy(self) -> ShotPolicy:
        return ShotPolicy.parse(self.shot_policy)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        """Parse flat ``key=value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep:
                raise ValueError(f"line {lineno}: expected key=value")
            if key not in types:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _coerce(types[key], val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text("utf-8"), **overrides)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())


def _coerce(typ, val: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "int":
        return int(val)
    if typ == "float":
        return float(val)
    return val


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup over ceil(warmup_ratio * total) steps, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = math.ceil(config.warmup_ratio * total_steps)
    if step < warm:
        return config.lr * step / warm
    if total_steps == warm:
        return config.lr
    progress = (step - warm) / (total_steps - warm)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_mixed_batches(dataset, batch_size: int, rng_seed: int, epoch: int = 0) -> list[np.ndarray]:
    """Index batches for one epoch: global shuffle, then sequential slices.

    ``dataset`` is a sequence or its length. The trailing partial batch is
    dropped.
    """
    n_samples = dataset if isinstance(dataset, int) else len(dataset)
    if batch_size > n_samples:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n_samples}")
    perm = np.random.default_rng([rng_seed, epoch]).permutation(n_samples)
    return [perm[i : i + batch_size] for i in range(0, n_samples - batch_size + 1, batch_size)]


def sample_context(pool: Sequence[int], query: int, n: int, rng: np.random.Generator) -> list[int]:
    """``n`` distinct pool members other than ``query``, in random order."""
    cands = [i for i in pool if i != query]
    if len(cands) < n:
        raise ValueError(f"context pool has {len(cands)} candidates, need {n}")
    if n == 0:
        return []
    pick = rng.choice(len(cands), size=n, replace=False)
    return [cands[int(j)] for j in pick]


def sample_shots(policy: ShotPolicy, pool: Sequence[int], query: int, rng: np.random.Generator) -> list[int]:
    if len([i for i in pool if i != query]) < policy.max_shots:
        raise ValueError(f"pool too small for {policy}")
    return sample_context(pool, query, policy.draw(rng), rng)


def select_samples(samples: Sequence[TaskSample], config: TrainConfig) -> list[TaskSample]:
    """Apply task exclusion, per-task caps and the data fraction, keeping order."""
    excluded = {t.strip() for t in config.exclude_tasks.split(",") if t.strip()}
    caps = {}
    for part in config.mixture.split(","):
        if part.strip():
            k, _, v = part.partition(":")
            caps[k.strip()] = int(v)
    out, seen = [], {}
    for s in samples:
        if s.task in excluded:
            continue
        if caps and seen.get(s.task, 0) >= caps.get(s.task, 0):
            continue
        seen[s.task] = seen.get(s.task, 0) + 1
        out.append(s)
    if config.data_fraction < 1:
        out = out[: math.ceil(len(out) * config.data_fraction)]
    return out


def clip_grad_norm(params, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


def model_config(cfg: BackboneConfig, vocab: Vocabulary) -> dict:
    return {"backbone": cfg.to_dict(), "num_bins": vocab.num_bins, "vocab_size": vocab.size}


class Trainer:
    """Mixed-task training over ``samples`` for ``model``.

    In ``mixt`` mode the backbone is frozen and only the prefix module
    updates; in ``backbone`` mode the bare backbone trains zero-shot.
    The global torch generator (used by dropout) is reseeded from
    ``config.rng_seed`` so runs do not depend on earlier process state.
    """

    def __init__(self, model: IclModel, samples: Sequence[TaskSample], vocab: Vocabulary, config: TrainConfig):
        self.model = model
        self.vocab = vocab
        self.config = config
        self.samples = select_samples(samples, config)
        self.policy = config.policy
        if config.train_mode == "mixt":
            if model.mixt is None:
                raise ValueError("mixt training needs a prefix module")
            model.freeze_backbone()
        else:
            if self.policy.max_shots:
                raise ValueError("backbone training is zero-shot; use shot_policy fixed:0")
            for p in model.backbone.parameters():
                p.requires_grad_(True)
        self.params = [p for p in model.parameters() if p.requires_grad]
        torch.manual_seed(config.rng_seed)
        self.optimizer = torch.optim.AdamW(
            self.params, lr=config.lr, weight_decay=config.weight_decay, foreach=False
        )
        self.pools: dict[str, list[int]] = {}
        for i, s in enumerate(self.samples):
            self.pools.setdefault(s.task, []).append(i)
        if self.policy.max_shots:
            for task, pool in self.pools.items():
                if len(pool) <= self.policy.max_shots:
                    raise ValueError(f"task {task} has {len(pool)} samples, too few for {self.policy}")
        n = len(self.samples)
        self.steps_per_epoch = n // config.batch_size
        if self.steps_per_epoch == 0:
            raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {n}")
        total = self.steps_per_epoch * config.epochs
        self.total_steps = min(total, config.max_steps) if config.max_steps else total
        self.step = 0
        self.loss_trace: list[float] = []
        self.shot_counts: dict[int, int] = {}
        self._epoch_batches: tuple[int, list] = (-1, [])

    def batch_at(self, step: int) -> tuple[list[int], int, dict]:
        epoch, k = divmod(step, self.steps_per_epoch)
        if self._epoch_batches[0] != epoch:
            self._epoch_batches = (epoch, make_mixed_batches(len(self.samples), self.config.batch_size, self.config.rng_seed, epoch))
        idx = self._epoch_batches[1][k]
        rng = np.random.default_rng([self.config.rng_seed, 1, step])
        n = self.policy.draw(rng)
        windows = []
        for qi in idx:
            q = self.samples[int(qi)]
            ctx = sample_context(self.pools[q.task], int(qi), n, rng)
            windows.append(pack_context_window([self.samples[c].triple for c in ctx], q.triple, self.model.backbone.cfg.patch_size))
        return [int(i) for i in idx], n, self.model.collate(windows, self.vocab)

    def train_step(self) -> dict:
        ids, n, tb = self.batch_at(self.step)
        lr = lr_at(self.step + 1, self.total_steps, self.config)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss = self.model.loss(tb)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss {float(loss.detach())} at step {self.step}, batch {[self.samples[i].id for i in ids]}"
            )
        loss.backward()
        gnorm = clip_grad_norm(self.params, self.config.grad_clip)
        self.optimizer.step()
        self.step += 1
        value = float(loss.detach())
        self.loss_trace.append(value)
        self.shot_counts[n] = self.shot_counts.get(n, 0) + 1
        tasks = sorted({self.samples[i].task for i in ids})
        return {"step": self.step, "lr": lr, "loss": value, "grad_norm": gnorm, "shots": n, "tasks_in_batch": tasks}

    def run(self, steps: Optional[int] = None, log_file=None) -> list[dict]:
        end = self.total_steps if steps is None else min(self.total_steps, self.step + steps)
        records = []
        while self.step < end:
            rec = self.train_step()
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            if rec["step"] % 100 == 0:
                log.info("step %d/%d loss %.4f lr %.2e", rec["step"], self.total_steps, rec["loss"], rec["lr"])
        return records

    # checkpointing

    def state_store(self) -> ParameterStore:
        store = ParameterStore.from_module(self.model)
        name_of = {id(p): n for n, p in self.model.named_parameters()}
        for p in self.params:
            st = self.optimizer.state.get(p)
            if not st:
                continue
            base = name_of[id(p)]
            for key in ("step", "exp_avg", "exp_avg_sq"):
                t = st[key]
                t = t.reshape(1) if key == "step" else t
                store.tensors[f"optim/{base}/{key}"] = t
                store.trainable[f"optim/{base}/{key}"] = False
        return store

    def header(self) -> dict:
        mc = model_config(self.model.backbone.cfg, self.vocab)
        return {
            "kind": "trainer",
            "model_config": mc,
            "config_hash": config_hash(mc),
            "train_config": self.config.to_dict(),
            "train_config_hash": config_hash(self.config.to_dict()),
            "step": self.step,
            "rng": {"seed": self.config.rng_seed, "step": self.step},
            "has_mixt": self.model.mixt is not None,
            "loss_trace": self.loss_trace,
            "shot_counts": {str(k): v for k, v in self.shot_counts.items()},
            "torch_rng": torch.get_rng_state().tolist(),
        }

    def save_checkpoint(self, path) -> None:
        save_checkpoint(path, self.state_store(), self.header())

    def load_checkpoint(self, path) -> None:
        """Restore parameters, optimizer moments, step and rng state in place."""
        mc = model_config(self.model.backbone.cfg, self.vocab)
        header, store = load_checkpoint(path, expected_config_hash=config_hash(mc))
        if header.get("train_config_hash") != config_hash(self.config.to_dict()):
            raise CheckpointError(f"{path}: training config differs from the checkpointed run")
        load_model_tensors(self.model, store)
        name_of = {id(p): n for n, p in self.model.named_parameters()}
        for p in self.params:
            base = name_of[id(p)]
            if f"optim/{base}/step" not in store.tensors:
                continue
            self.optimizer.state[p] = {
                "step": store.tensors[f"optim/{base}/step"].reshape(()).clone(),
                "exp_avg": store.tensors[f"optim/{base}/exp_avg"].clone(),
                "exp_avg_sq": store.tensors[f"optim/{base}/exp_avg_sq"].clone(),
            }
        self.step = header["step"]
        self.loss_trace = list(header["loss_trace"])
        self.shot_counts = {int(k): v for k, v in header["shot_counts"].items()}
        torch.set_rng_state(torch.tensor(header["torch_rng"], dtype=torch.uint8))


def load_model_tensors(model: torch.nn.Module, store: ParameterStore) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in store.tensors:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            src = store.tensors[name]
            if tuple(src.shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name}: {tuple(src.shape)} vs {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))


def save_model(path, model: IclModel, vocab: Vocabulary, extra: Optional[dict] = None) -> None:
    mc = model_config(model.backbone.cfg, vocab)
    header = {"kind": "model", "model_config": mc, "config_hash": config_hash(mc), "has_mixt": model.mixt is not None}
    header.update(extra or {})
    save_checkpoint(path, ParameterStore.from_module(model), header)


def load_model(path, vocab: Vocabulary, expected_config_hash: Optional[str] = None) -> tuple[IclModel, dict]:
    """Rebuild an IclModel (with prefix module if checkpointed) from ``path``."""
    header, store = load_checkpoint(path, expected_config_hash)
    mc = header["model_config"]
    if mc["vocab_size"] != vocab.size or mc["num_bins"] != vocab.num_bins:
        raise CheckpointError(f"{path}: vocabulary does not match checkpoint")
    cfg = BackboneConfig(**mc["backbone"])
    backbone = Backbone(cfg)
    mixt = init_from_backbone(backbone, 0, vocab.bos_id, vocab.eos_id) if header.get("has_mixt") else None
    model = IclModel(backbone, mixt)
    load_model_tensors(model, store)
    for name, p in model.named_parameters():
        p.requires_grad_(store.trainable.get(name, False))
    model.eval()
    return model, header
