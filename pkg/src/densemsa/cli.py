"""Command-line entry points: train, recognize, evaluate, synth, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage/config/input error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, convert, dump_config, load_config
from .data import DataError, Sample, load_dataset, load_vocab, preprocess, read_image, read_manifest, write_manifest, write_pgm
from .inference import IncompatibleEnsemble, attention_maps, check_ensemble, recognize
from .metrics import exprate_report
from .model import Model
from .synth import builtin_vocab, synth_corpus
from .trainer import TrainingDiverged, train

log = logging.getLogger("densemsa")


class UsageError(Exception):
    pass


def _vocab_for(cfg: RunConfig):
    return load_vocab(cfg.vocab) if cfg.vocab else builtin_vocab()


def _datasets(cfg: RunConfig):
    if cfg.train_manifest:
        if not Path(cfg.train_manifest).is_file():
            raise UsageError(f"training manifest not found: {cfg.train_manifest}")
        train_set = load_dataset(cfg.train_manifest, cfg.max_side)
    elif cfg.synth_train > 0:
        train_set = synth_corpus(cfg.synth_train, cfg.synth_seed, cfg.synth_tier)
    else:
        raise UsageError("no training data: set train_manifest or synth_train")
    if cfg.valid_manifest:
        if not Path(cfg.valid_manifest).is_file():
            raise UsageError(f"validation manifest not found: {cfg.valid_manifest}")
        valid_set = load_dataset(cfg.valid_manifest, cfg.max_side)
    elif cfg.synth_valid > 0:
        valid_set = synth_corpus(cfg.synth_valid, cfg.synth_seed + 1, cfg.synth_tier)
    else:
        valid_set = train_set
    return train_set, valid_set


def cmd_train(cfg: RunConfig) -> int:
    vocab = _vocab_for(cfg)
    train_set, valid_set = _datasets(cfg)
    for s in list(train_set) + list(valid_set):
        vocab.encode(s.label)
    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
    model = Model(model_cfg, vocab, seed=cfg.seed)
    log_path = out / "train.log"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("# step\ttrain_loss\tvalid_wer\n")

        def on_validate(step, loss, wer):
            fh.write(f"{step}\t{loss:.6f}\t{wer:.6f}\n")
            fh.flush()

        result = train(model, train_set, valid_set, train_cfg, on_validate)
    for name, snap in (("best", result.best), ("last", result.last)):
        meta = {"seed": cfg.seed, "step": snap.step, "epoch": snap.epoch,
                "valid_wer": snap.valid_wer, "best_valid_wer": result.best.valid_wer}
        save_checkpoint(Checkpoint(model_cfg, vocab, snap.arrays, meta), out / f"{name}.ckpt")
    print(f"best validation WER {result.best.valid_wer:.4f} at step {result.best.step}; "
          f"checkpoints in {out}")
    return 0


def _read_image_list(path: Path) -> list[Path]:
    if not path.is_file():
        raise UsageError(f"image list not found: {path}")
    items = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        name = line.split("\t", 1)[0]
        p = Path(name)
        items.append(p if p.is_absolute() else path.parent / p)
    return items


def cmd_recognize(checkpoints: Sequence[str], image_list: str, output: str, beam: int = 10,
                  max_len: int = 200, dump_attention: Optional[str] = None, max_side: int = 256,
                  workers: int = 1) -> int:
    if not checkpoints:
        raise UsageError("recognize needs at least one checkpoint")
    models = []
    for c in checkpoints:
        if not Path(c).is_file():
            raise UsageError(f"checkpoint not found: {c}")
        models.append(load_checkpoint(c).build_model())
    vocab = check_ensemble(models)
    paths = _read_image_list(Path(image_list))
    samples = []
    for p in paths:
        if not p.is_file():
            raise UsageError(f"image not found: {p}")
        img, extent = preprocess(read_image(p), max_side, return_extent=True)
        samples.append(Sample(img, [], extent, p.name))
    hyps = recognize(models, samples, beam, max_len, workers)
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    with open(output, "w", encoding="utf-8") as fh:
        for h in hyps:
            fh.write(" ".join(vocab.decode(h.tokens)) + "\n")
    if dump_attention:
        from .viz import save_heatmap

        out = Path(dump_attention)
        out.mkdir(parents=True, exist_ok=True)
        for sample, h in zip(samples, hyps):
            stem = Path(sample.name).stem
            for t, (a, b) in enumerate(attention_maps(models[0], sample, h.tokens)):
                save_heatmap(out / f"{stem}_t{t:03d}_low.png", sample.image, sample.extent, a)
                if b is not None:
                    save_heatmap(out / f"{stem}_t{t:03d}_high.png", sample.image, sample.extent, b)
    return 0


def cmd_evaluate(predictions: str, references: str, out_dir: str) -> int:
    for p in (predictions, references):
        if not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    preds = [ln for ln in Path(predictions).read_text(encoding="utf-8").splitlines()]
    refs = read_manifest(references)
    if len(preds) != len(refs):
        raise UsageError(f"{len(preds)} predictions but {len(refs)} references")
    report = exprate_report([(" ".join(toks), p) for (_, toks), p in zip(refs, preds)])
    report.write(out_dir)
    for k, v in report.summary().items():
        print(f"{k}\t{v}")
    return 0


def cmd_synth(out_dir: str, n: int, seed: int, tier: int) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = synth_corpus(n, seed, tier)
    for s in samples:
        h, w = s.extent
        write_pgm(out / s.name, s.image[:h, :w])
    write_manifest(out / "manifest.tsv", [(s.name, s.label) for s in samples])
    builtin_vocab().save(out / "vocab.txt")
    print(f"wrote {n} samples to {out}")
    return 0


def cmd_gradcheck(seed: int, samples: int) -> int:
    from .gradcheck import run_all

    results = run_all(seed, model_samples=samples)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    total = sum(r.checked for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: {total} sampled entries")
    return 0 if ok else 1


def _add_config_flags(p: argparse.ArgumentParser):
    for f in fields(RunConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", default=None,
                       metavar="VALUE", help=f"override '{f.name}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densemsa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", help="flat key = value config file")
    _add_config_flags(p)

    p = sub.add_parser("recognize", help="decode images into LaTeX token strings")
    p.add_argument("--checkpoint", action="append", default=[], help="repeat for an ensemble")
    p.add_argument("--images", required=True, help="file listing one image path per line")
    p.add_argument("--out", required=True, help="predictions file")
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--max-len", type=int, default=200)
    p.add_argument("--max-side", type=int, default=256)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dump-attention", metavar="DIR")

    p = sub.add_parser("evaluate", help="score predictions against a reference manifest")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tier", type=int, default=1, choices=(0, 1, 2))

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200, help="entries sampled from the full model")
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    for f in fields(RunConfig):
        raw = getattr(args, f"cfg_{f.name}")
        if raw is not None:
            over[f.name] = convert(f.name, raw)
    return RunConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, **over})


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(_run_config(args))
        if args.command == "recognize":
            return cmd_recognize(args.checkpoint, args.images, args.out, args.beam, args.max_len,
                                 args.dump_attention, args.max_side, args.workers)
        if args.command == "evaluate":
            return cmd_evaluate(args.predictions, args.references, args.out)
        if args.command == "synth":
            return cmd_synth(args.out, args.n, args.seed, args.tier)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.samples)
    except (UsageError, ConfigError, DataError, IncompatibleEnsemble) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    parser.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
