"""Command-line entry point: ``mqnet gen-data | train | eval | ablate | gradcheck``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 gradcheck failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import PROFILES, RunConfig, load_config
from .data import generate_split, load_manifest, write_pgm, write_pgm_gray
from .metrics import evaluate, per_category
from .model import load_checkpoint, save_checkpoint, SegModel
from .text import Vocab, tokenize
from .train import (build_vocab, corpus_from_samples, encode_titles, fit, make_optimizer, predict,
                    pretrain_text)

log = logging.getLogger("mqnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_set(items: list[str]) -> dict:
    """``section.key=value`` pairs into a nested dict; values are parsed as JSON when possible."""
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _run_config(args) -> RunConfig:
    overrides = _parse_set(getattr(args, "set", None))
    for flag, section, key in (("seed", None, "seed"), ("precision", None, "precision"),
                               ("epochs", "optim", "epochs"), ("lr", "optim", "lr"),
                               ("batch_size", "optim", "batch_size"), ("input_size", "model", "input_size")):
        value = getattr(args, flag, None)
        if value is not None:
            (overrides.setdefault(section, {}) if section else overrides)[key] = value
    if getattr(args, "manifest", None):
        overrides.setdefault("data", {})["manifest"] = str(args.manifest)
    try:
        return load_config(getattr(args, "config", None), getattr(args, "profile", None), overrides)
    except (KeyError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.precision == "float32" else np.float64


def _load_split(manifest, size: int, split: str):
    recs = list(load_manifest(manifest, size, split))
    if not recs:
        raise RuntimeError(f"{manifest}: no {split!r} records")
    return recs


def save_vocab(vocab: Vocab, directory: Path) -> None:
    vocab.save(directory / "vocab.txt", directory / "words.tsv")


def load_vocab(directory: Path) -> Vocab:
    return Vocab.load(directory / "vocab.txt", directory / "words.tsv")


# ----------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    manifest = generate_split(args.n, args.out, args.difficulty, args.seed, args.size)
    counts = manifest.counts()
    print(f"{manifest.path}  train={counts.get('train', 0)} test={counts.get('test', 0)}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    start_step = 0
    optimizer = None
    if args.resume:
        cfg = RunConfig.from_dict(json.loads((Path(args.resume) / "config.json").read_text("utf-8"))["run"])
        vocab = load_vocab(Path(args.resume))
    else:
        cfg = _run_config(args)
        vocab = None
    if not cfg.data.manifest:
        raise UsageError("train needs --manifest (or data.manifest in the config)")
    dtype = _dtype(cfg)
    size = cfg.model.input_size
    train = _load_split(cfg.data.manifest, size, "train")
    if args.overfit:
        train = train[:args.overfit]
    if vocab is None:
        vocab = build_vocab([s.title for s in train])
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.toml")
    save_vocab(vocab, out)
    o = cfg.optim

    with T.precision(dtype):
        if args.resume:
            model, manifest, optimizer = load_checkpoint(
                args.resume, lambda m: make_optimizer(m, o.lr, (o.beta1, o.beta2), o.eps, o.weight_decay))
            start_step = manifest["step"]
        else:
            model = SegModel(cfg.model_config(len(vocab)), seed=cfg.seed, dtype=dtype)
            if cfg.text.pretrain_steps:
                pretrain_text(model, corpus_from_samples(train), vocab, cfg.text.pretrain_steps, o.batch_size,
                              o.lr, seed=cfg.seed, rate=cfg.text.mask_rate, replacement=cfg.text.mask_replacement)
        if optimizer is None:
            optimizer = make_optimizer(model, o.lr, (o.beta1, o.beta2), o.eps, o.weight_decay)

        epochs, max_steps = o.epochs, args.steps
        if args.overfit:
            max_steps = args.steps or 200
            epochs = -(-max_steps * o.batch_size // max(len(train), 1)) + 1
        log_path = out / "loss.csv"
        fh = open(log_path, "a" if args.resume else "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        if not args.resume:
            writer.writerow(["step", "epoch", "loss"])

        def save(step: int, name: str):
            ckpt = out / "checkpoints" / name
            save_checkpoint(ckpt, model, {"step": step, "run": cfg.to_dict()}, optimizer)
            save_vocab(vocab, ckpt)

        def on_step(step, epoch, loss):
            writer.writerow([step, epoch, repr(loss)])
            fh.flush()
            if args.checkpoint_every and (step + 1) % args.checkpoint_every == 0:
                save(step + 1, f"step_{step + 1:06d}")

        try:
            losses = fit(model, optimizer, train, vocab, epochs, o.batch_size, seed=cfg.seed,
                         start_step=start_step, max_steps=max_steps, on_step=on_step)
        finally:
            fh.close()
        save(start_step + len(losses), "final")
    if losses:
        print(f"trained {len(losses)} steps; first loss {losses[0]:.6f}, last loss {losses[-1]:.6f}")
    print(f"checkpoint: {out / 'checkpoints' / 'final'}")
    return EXIT_OK


def _dump(model: SegModel, samples, preds, vocab: Vocab, out: Path) -> None:
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    index = []
    length = model.cfg.text.length
    for i, (s, pred) in enumerate(zip(samples, preds)):
        stem = f"{i:05d}"
        write_pgm(out / "masks" / f"{stem}.pgm", pred)
        entry = {"index": i, "title": s.title, "mask": f"masks/{stem}.pgm", "heatmaps": []}
        if model.cfg.use_lqv:
            ids, valid = encode_titles([s.title], vocab, length)
            with T.no_grad():
                state = model.forward(s.image[None], ids, valid, return_state=True)
            seq = tokenize(s.title, vocab, length)
            for stage, fo in enumerate(state.fusion, start=1):
                for t in range(seq.n_valid):
                    name = f"heatmaps/{stem}_s{stage}_t{t:02d}.pgm"
                    write_pgm_gray(out / name, fo.F_M.data[0, ..., t])
                    entry["heatmaps"].append({"stage": stage, "token": vocab.tokens[seq.ids[t]], "path": name})
        index.append(entry)
    (out / "index.json").write_text(json.dumps(index, ensure_ascii=False, indent=1), encoding="utf-8")


def _emit(text: str, payload: dict, json_path) -> None:
    print(text)
    if json_path:
        Path(json_path).write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding="utf-8")


def cmd_eval(args) -> int:
    if args.ablate:
        return cmd_ablate(args)
    if not args.checkpoint and not args.ground_truth:
        raise UsageError("eval needs --checkpoint (or --ground-truth)")
    if args.ground_truth:
        cfg = _run_config(args)
        manifest_path = args.manifest or cfg.data.manifest
        test = _load_split(manifest_path, cfg.model.input_size, args.split)
        preds = [s.mask for s in test]
        model = vocab = None
    else:
        ckpt = Path(args.checkpoint)
        with T.precision(np.float64):
            model, manifest, _ = load_checkpoint(ckpt)
        cfg = RunConfig.from_dict(manifest["run"])
        vocab = load_vocab(ckpt)
        manifest_path = args.manifest or cfg.data.manifest
        test = _load_split(manifest_path, model.cfg.backbone.input_size, args.split)
        with T.precision(model.dtype):
            preds = predict(model, test, vocab)
    report = evaluate(zip(preds, [s.mask for s in test]))
    payload = report.to_dict()
    text = report.format()
    if args.per_category:
        labels = [s.meta.get("category", "unknown") for s in test]
        cats = per_category(zip(preds, [s.mask for s in test]), labels)
        payload["per_category_mIoU"] = cats
        text += "\n\nper-category mIoU\n" + "\n".join(f"{k:<12}{100 * v:8.2f}" for k, v in cats.items())
    if args.dump_masks:
        if model is None:
            raise UsageError("--dump-masks needs a checkpoint")
        _dump(model, test, preds, vocab, Path(args.dump_masks))
    _emit(text, payload, args.json)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    cfg = _run_config(args)
    manifest_path = args.manifest or cfg.data.manifest
    if not manifest_path:
        raise UsageError("ablate needs --manifest")
    seeds = args.seeds or [0, 1, 2]
    size = cfg.model.input_size
    train, test = _load_split(manifest_path, size, "train"), _load_split(manifest_path, size, "test")

    def on_cell(name, seed, report):
        msg = "diverged" if report is None else f"mIoU {100 * report.mIoU:.2f}"
        print(f"  {name:<14} seed {seed}: {msg}", flush=True)

    table = run_ablation(train, test, cfg, seeds, on_cell=on_cell)
    _emit(table.format(), table.to_dict(), args.json)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_gradcheck

    try:
        results = run_gradcheck(include_model=not args.no_model, seed=args.seed, only=args.only)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK


# ----------------------------------------------------------------------
# parser


def _add_run_options(p):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--profile", choices=sorted(PROFILES), help="named defaults (default: desk)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")
    p.add_argument("--manifest", help="manifest.jsonl of the dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--input-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mqnet", description="Title-guided product segmentation with mutual query fusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic train/test split")
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", choices=["easy", "normal", "hard"], default="normal")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_run_options(p)
    p.add_argument("--out", default="run")
    p.add_argument("--overfit", type=int, default=0, metavar="N", help="train on the first N samples only")
    p.add_argument("--steps", type=int, help="stop after this many steps")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="K")
    p.add_argument("--resume", metavar="CHECKPOINT")
    p.set_defaults(func=cmd_train)

    for name, helptext in (("eval", "evaluate a checkpoint"), ("ablate", "three-row fusion ablation")):
        p = sub.add_parser(name, help=helptext)
        _add_run_options(p)
        p.add_argument("--checkpoint")
        p.add_argument("--split", choices=["train", "test"], default="test")
        p.add_argument("--json", help="also write the report as JSON")
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--per-category", action="store_true")
        p.add_argument("--dump-masks", metavar="DIR")
        p.add_argument("--ground-truth", action="store_true", help="score the ground truth against itself")
        p.add_argument("--ablate", action="store_true", default=name == "ablate")
        p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--only", nargs="+", metavar="OP")
    p.add_argument("--no-model", action="store_true", help="skip the end-to-end model check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, KeyError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
