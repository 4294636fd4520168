"""Command-line entry point: ``mixtune <command> --flag value ...``.

Commands: gen-data, train, eval, shots-matrix, infer. Every command that
takes ``--out`` writes under a fixed layout (checkpoints/, logs/, metrics/,
manifest.json). Failures exit nonzero after printing one JSON error record
to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .backbone import Backbone, BackboneConfig
from .evaluator import EvalConfig, draw_context, eval_task, generate, render_matrix, shots_matrix, write_records
from .mixt import IclModel, init_from_backbone
from .shapeworld import (
    DEFAULT_MIX,
    TASKS,
    generate_dataset,
    load_vocabulary,
    parse_mix,
    read_dataset,
    read_ppm,
    task_vocabulary,
    write_dataset,
    write_ppm,
)
from .shapeworld.tasks import task_of_instruction
from .trainer import ShotPolicy, TrainConfig, Trainer, load_model, save_model
from .vocab_io import MultimodalTriple, VocabError, deserialize_box


class CliError(RuntimeError):
    pass


def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def dataset_digest(directory) -> str:
    d = Path(directory)
    h = hashlib.sha256()
    for name in ("manifest.jsonl", "checksums", "vocab.txt"):
        p = d / name
        if p.exists():
            h.update(p.read_bytes())
    return h.hexdigest()


def _layout(out) -> Path:
    out = Path(out)
    for sub in ("checkpoints", "logs", "metrics"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, t0: float, config: dict, datasets: dict, artifacts: dict, extra: Optional[dict] = None) -> dict:
    m = {
        "command": args.command,
        "argv": list(args.argv),
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "config": config,
        "dataset_checksums": datasets,
        "artifacts": artifacts,
        "timings": {"wall_seconds": round(time.time() - t0, 3)},
    }
    m.update(extra or {})
    return m


def _parse_canvas(text: str) -> tuple[int, int]:
    if "x" in text:
        h, w = text.split("x", 1)
        return int(h), int(w)
    return int(text), int(text)


# gen-data


def cmd_gen_data(args) -> dict:
    t0 = time.time()
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CliError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    mix = parse_mix(args.mix) if args.mix else dict(DEFAULT_MIX)
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-9:
        raise CliError(f"--mix proportions sum to {total}, expected 1")
    vocab = task_vocabulary(args.num_bins)
    samples = generate_dataset(
        args.size, mix, args.seed, _parse_canvas(args.canvas), vocab, exclude=args.exclude_task or ()
    )
    write_dataset(samples, out, vocab)
    counts = {t: sum(1 for s in samples if s.task == t) for t in TASKS}
    manifest = _manifest(
        args,
        t0,
        {"size": args.size, "mix": mix, "canvas": args.canvas, "exclude_task": args.exclude_task or [],
         "num_bins": args.num_bins},
        {str(out): dataset_digest(out)},
        {"dataset": str(out)},
        {"task_counts": counts},
    )
    # the run manifest stays out of the dataset so reruns are byte-identical
    if args.manifest:
        _write_json_atomic(Path(args.manifest), manifest)
    print(json.dumps({"dataset": str(out), "task_counts": counts}, sort_keys=True))
    return manifest


# train


def _backbone_config(args, vocab) -> BackboneConfig:
    return BackboneConfig(
        vocab_size=vocab.size,
        d_model=args.d_model,
        n_heads=args.n_heads,
        enc_layers=args.enc_layers,
        dec_layers=args.dec_layers,
        ffn_dim=args.ffn_dim,
        patch_size=args.patch_size,
        max_positions=args.max_positions,
        dropout=args.dropout,
        coord_features=not args.no_coord_features,
    )


def cmd_train(args) -> dict:
    t0 = time.time()
    if args.threads:
        torch.set_num_threads(args.threads)
    overrides = {
        "shot_policy": args.shots,
        "data_fraction": args.data_fraction,
        "lr": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "max_steps": args.max_steps,
        "rng_seed": args.seed,
        "train_mode": args.mode,
        "exclude_tasks": ",".join(args.exclude_task) if args.exclude_task else None,
    }
    config = TrainConfig.from_file(args.config, **overrides) if args.config else TrainConfig(
        **{k: v for k, v in overrides.items() if v is not None}
    )
    vocab = load_vocabulary(args.data)
    samples = read_dataset(args.data)
    if args.backbone:
        model, _ = load_model(args.backbone, vocab)
        backbone = model.backbone
    else:
        backbone = Backbone(_backbone_config(args, vocab), config.rng_seed)
    mixt = None
    if config.train_mode == "mixt":
        mixt = init_from_backbone(backbone, config.rng_seed + 1, vocab.bos_id, vocab.eos_id)
    model = IclModel(backbone, mixt)
    trainer = Trainer(model, samples, vocab, config)
    out = _layout(args.out)
    log_path = out / "logs" / "train.jsonl"
    state_path = out / "checkpoints" / "trainer.ckpt"
    if args.resume:
        trainer.load_checkpoint(state_path)
    with open(log_path, "a" if args.resume else "w", encoding="utf-8") as f:
        trainer.run(args.stop_after or None, log_file=f)
    trainer.save_checkpoint(state_path)
    model_path = out / "checkpoints" / "model.ckpt"
    save_model(model_path, model, vocab, {"train_config": config.to_dict()})
    vocab.save(out / "checkpoints" / "vocab.txt")
    manifest = _manifest(
        args,
        t0,
        {"train": config.to_dict(), "backbone": backbone.cfg.to_dict()},
        {str(args.data): dataset_digest(args.data)},
        {"model": str(model_path), "trainer_state": str(state_path), "log": str(log_path)},
        {
            "n_train_samples": len(trainer.samples),
            "steps": trainer.step,
            "final_loss": trainer.loss_trace[-1] if trainer.loss_trace else None,
            "shot_counts": {str(k): v for k, v in sorted(trainer.shot_counts.items())},
        },
    )
    _write_json_atomic(out / "manifest.json", manifest)
    return manifest


# eval


def _support(spec: str, eval_pool):
    if spec == "eval":
        return eval_pool, None
    if spec.startswith("external:"):
        d = spec[len("external:") :]
        return read_dataset(d), d
    raise CliError(f"--support must be 'eval' or 'external:<dir>', got {spec!r}")


def _check_support(samples, support, shots: int, label: str):
    by_task = {}
    for s in support:
        by_task[s.task] = by_task.get(s.task, 0) + 1
    ids = {s.id for s in support}
    for s in samples:
        have = by_task.get(s.task, 0) - (s.id in ids)
        if have < shots:
            raise CliError(f"support pool {label} has {have} {s.task} samples, need {shots}")


def _beam(args) -> int:
    return 1 if args.greedy else args.beam


def cmd_eval(args) -> dict:
    t0 = time.time()
    vocab = load_vocabulary(args.data)
    model, header = load_model(args.ckpt, vocab)
    samples = read_dataset(args.data)
    if args.tasks:
        keep = set(args.tasks.split(","))
        samples = [s for s in samples if s.task in keep]
    pool = samples
    if args.limit:
        samples = samples[: args.limit]
    support, ext = _support(args.support, pool)
    _check_support(samples, support, args.shots, ext or "eval")
    cfg = EvalConfig(shots=args.shots, beam=_beam(args), max_len=args.max_len, seed=args.seed, run_id=args.run_id)
    records = eval_task(model, samples, vocab, cfg, support=support)
    out = _layout(args.out)
    path = out / "metrics" / "metrics.jsonl"
    write_records(path, records)
    datasets = {str(args.data): dataset_digest(args.data)}
    if ext:
        datasets[ext] = dataset_digest(ext)
    manifest = _manifest(args, t0, {"eval": vars(cfg), "ckpt": str(args.ckpt)}, datasets, {"metrics": str(path)})
    _write_json_atomic(out / "manifest.json", manifest)
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return manifest


# shots-matrix


def _trained_shots_label(header: dict, path: str):
    tc = header.get("train_config")
    if not tc:
        raise CliError(f"checkpoint {path} carries no training config")
    pol = ShotPolicy.parse(tc["shot_policy"])
    return pol.counts[0] if pol.kind == "fixed" else str(pol)


def cmd_shots_matrix(args) -> dict:
    t0 = time.time()
    paths = [str(Path(p).resolve()) for p in args.ckpt]
    if len(set(paths)) != len(paths):
        raise CliError("duplicate checkpoint paths")
    vocab = load_vocabulary(args.data)
    models = {}
    for p in args.ckpt:
        if not Path(p).is_file():
            raise CliError(f"missing checkpoint {p}")
        model, header = load_model(p, vocab)
        label = _trained_shots_label(header, p)
        if label in models:
            raise CliError(f"two checkpoints trained with shots {label}")
        models[label] = model
    samples = read_dataset(args.data)
    if args.tasks:
        keep = set(args.tasks.split(","))
        samples = [s for s in samples if s.task in keep]
    pool = samples
    if args.limit:
        samples = samples[: args.limit]
    eval_shots = [int(x) for x in args.eval_shots.split(",")]
    support, ext = _support(args.support, pool)
    _check_support(samples, support, max(eval_shots), ext or "eval")
    cfg = EvalConfig(beam=_beam(args), max_len=args.max_len, seed=args.seed, run_id=args.run_id)
    result = shots_matrix(models, eval_shots, samples, vocab, cfg, support=support)
    out = _layout(args.out)
    write_records(out / "metrics" / "matrix.jsonl", result["records"])
    tables = []
    for task, info in result["summary"].items():
        tables.append(render_matrix(result["records"], task, info["metric"]))
    (out / "metrics" / "matrix.txt").write_text("\n\n".join(tables) + "\n", encoding="utf-8")
    print("\n\n".join(tables))
    manifest = _manifest(
        args,
        t0,
        {"eval_shots": eval_shots, "ckpts": args.ckpt, "beam": cfg.beam},
        {str(args.data): dataset_digest(args.data)},
        {"matrix": str(out / "metrics" / "matrix.jsonl"), "table": str(out / "metrics" / "matrix.txt")},
        {"summary": result["summary"]},
    )
    _write_json_atomic(out / "manifest.json", manifest)
    return manifest


# infer


def draw_box(image: np.ndarray, box, color=(255, 0, 255)) -> np.ndarray:
    """Copy of ``image`` with a 1-px outline of the normalized ``box``."""
    img = image.copy()
    h, w, _ = img.shape
    x0, y0, x1, y1 = (int(round(v * (s - 1))) for v, s in zip(box, (w, h, w, h)))
    x0, x1 = sorted((min(max(x0, 0), w - 1), min(max(x1, 0), w - 1)))
    y0, y1 = sorted((min(max(y0, 0), h - 1), min(max(y1, 0), h - 1)))
    img[y0, x0 : x1 + 1] = color
    img[y1, x0 : x1 + 1] = color
    img[y0 : y1 + 1, x0] = color
    img[y0 : y1 + 1, x1] = color
    return img


def cmd_infer(args) -> dict:
    t0 = time.time()
    vocab = load_vocabulary(args.support) if args.support else None
    if vocab is None:
        vocab = load_vocabulary(Path(args.ckpt).parent)
    model, _ = load_model(args.ckpt, vocab)
    try:
        image = read_ppm(args.image)
    except (OSError, ValueError, IndexError) as exc:
        raise CliError(f"unreadable image {args.image}: {exc}") from exc
    unknown = vocab.unknown_words(args.instruction)
    if unknown:
        raise VocabError(f"out-of-vocabulary words in instruction: {', '.join(unknown)}")
    query = MultimodalTriple(image, vocab.encode(args.instruction))
    task = task_of_instruction(args.instruction)
    context = []
    if args.shots:
        if not args.support:
            raise CliError("--shots > 0 needs --support <dataset dir>")
        pool = [s for s in read_dataset(args.support) if s.task == task]
        context = [s.triple for s in draw_context("infer", pool, args.shots, args.seed)]
    hyp = generate(model, vocab, context, query, _beam(args), args.max_len)
    text = vocab.decode(hyp.tokens)
    result = {"prediction": text, "task": task, "logprob": hyp.logprob, "finished": hyp.finished}
    artifacts = {}
    if args.out:
        out = _layout(args.out)
        if task == "grounding":
            box = deserialize_box(hyp.tokens, vocab)
            if box is not None:
                path = out / "prediction.ppm"
                write_ppm(path, draw_box(image, box))
                artifacts["drawn_image"] = str(path)
                result["box"] = list(box)
        (out / "metrics" / "prediction.json").write_text(json.dumps(result, sort_keys=True) + "\n", encoding="utf-8")
        artifacts["prediction"] = str(out / "metrics" / "prediction.json")
        _write_json_atomic(out / "manifest.json", _manifest(args, t0, {"shots": args.shots}, {}, artifacts, result))
    print(text)
    return result


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixtune", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic mixed-task dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, default=1000)
    g.add_argument("--mix", default="")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--canvas", default="64")
    g.add_argument("--num-bins", type=int, default=1000)
    g.add_argument("--exclude-task", action="append", choices=TASKS)
    g.add_argument("--force", action="store_true")
    g.add_argument("--manifest", default="")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a backbone or the in-context prefix module")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--shots")
    t.add_argument("--mode", choices=("mixt", "backbone"))
    t.add_argument("--backbone", help="frozen backbone checkpoint to wrap")
    t.add_argument("--data-fraction", type=float)
    t.add_argument("--exclude-task", action="append", choices=TASKS)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--stop-after", type=int, default=0, help="stop after this many updates in this invocation")
    t.add_argument("--threads", type=int, default=0)
    t.add_argument("--d-model", type=int, default=128)
    t.add_argument("--n-heads", type=int, default=4)
    t.add_argument("--enc-layers", type=int, default=2)
    t.add_argument("--dec-layers", type=int, default=2)
    t.add_argument("--ffn-dim", type=int, default=512)
    t.add_argument("--patch-size", type=int, default=8)
    t.add_argument("--max-positions", type=int, default=1024)
    t.add_argument("--dropout", type=float, default=0.0)
    t.add_argument("--no-coord-features", action="store_true", help="plain RGB patches without x/y channels")
    t.set_defaults(func=cmd_train)

    def decode_flags(sp):
        sp.add_argument("--beam", type=int, default=4)
        sp.add_argument("--greedy", action="store_true")
        sp.add_argument("--max-len", type=int, default=31)
        sp.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--shots", type=int, default=0)
    e.add_argument("--support", default="eval")
    e.add_argument("--tasks", default="")
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--run-id", default="eval")
    decode_flags(e)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("shots-matrix", help="trained-shots x eval-shots grid")
    m.add_argument("--ckpt", action="append", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--eval-shots", default="1,2,3")
    m.add_argument("--support", default="eval")
    m.add_argument("--tasks", default="")
    m.add_argument("--limit", type=int, default=0)
    m.add_argument("--run-id", default="matrix")
    decode_flags(m)
    m.set_defaults(func=cmd_shots_matrix)

    i = sub.add_parser("infer", help="decode one query")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--instruction", required=True)
    i.add_argument("--support", default="")
    i.add_argument("--shots", type=int, default=0)
    i.add_argument("--out", default="")
    decode_flags(i)
    i.set_defaults(func=cmd_infer)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        args.func(args)
    except Exception as exc:  # one machine-parseable line per failure
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
