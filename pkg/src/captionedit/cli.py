"""Command line: gen, train, eval, edit, gradcheck, stats."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import CheckpointError
from .config import PRESETS, load_config
from .data import UNK, content_words, corpus_stats, make_features, read_corpus, single_batch, tokenize, write_corpus
from .metrics import format_report, write_json_report
from .models import alignment_lines, greedy_decode
from .train import SPLITS, Editor, TrainingAborted, evaluate_split, generate_splits, train_pipeline


def _config(args):
    return load_config(args.config, args.preset, seed=args.seed)


def _read_splits(data_dir, names=SPLITS) -> dict:
    return {name: read_corpus(Path(data_dir) / f"{name}.jsonl") for name in names}


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, examples in generate_splits(cfg).items():
        write_corpus(out / f"{name}.jsonl", examples)
        print(f"wrote {len(examples)} examples to {out / f'{name}.jsonl'}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    splits = _read_splits(args.data, ("train", "dev"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    try:
        train_pipeline(cfg, splits["train"], splits["dev"], out_dir=out)
    except TrainingAborted as e:
        print(f"error: training aborted: {e}", file=sys.stderr)
        return 1
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def _run_config(editor: Editor, args):
    # feature shapes always follow the checkpoint's model
    return replace(_config(args), d_v=editor.config.d_v, k=editor.config.k)


def cmd_eval(args) -> int:
    editor = Editor.load(args.checkpoint)
    cfg = _run_config(editor, args)
    examples = _read_splits(args.data, (args.split,))[args.split]
    report = evaluate_split(editor, examples, cfg)
    print(format_report(report["model"], "model\t"), end="")
    print(format_report(report["baseline"], "baseline\t"), end="")
    path = Path(args.checkpoint).with_name(f"metrics_{args.split}.json")
    write_json_report(path, {"split": args.split, "model": report["model"], "baseline": report["baseline"]})
    print(f"report: {path}")
    return 0


def cmd_edit(args) -> int:
    editor = Editor.load(args.checkpoint)
    cfg = _run_config(editor, args)
    words = tokenize(args.caption)
    if not words:
        print("error: empty caption", file=sys.stderr)
        return 2
    ids = editor.vocab.encode(words)
    if all(i == UNK for i in ids):
        print("warning: no caption word is in the vocabulary", file=sys.stderr)
    objects = tokenize(args.objects) if args.objects else content_words(words)
    feats = make_features(tuple(objects), args.feature_seed, cfg.d_v, cfg.k).V
    batch = single_batch(words, feats, editor.vocab)
    decoded = greedy_decode(editor.decoders(), batch, cfg.max_len, trace=True)
    print(" ".join(editor.vocab.decode(decoded.tokens[0])))
    print("step\tword\tsrc\talpha_max\tgate_mean")
    for line in alignment_lines(decoded, words, editor.vocab.itos):
        print(line)
    return 0


def cmd_gradcheck(args) -> int:
    ok, _, _ = gradcheck.run(seed=args.seed)
    return 0 if ok else 1


def cmd_stats(args) -> int:
    for name, examples in _read_splits(args.data).items():
        stats = corpus_stats(examples)
        lengths = [len(e.existing) for e in examples]
        print(f"{name}\texamples\t{len(examples)}")
        print(f"{name}\tmean_existing_len\t{np.mean(lengths):.3f}")
        for kind, count in stats["corruptions"].items():
            print(f"{name}\t{kind}\t{count}")
        print(f"{name}\tdistinct_tokens\t{len(stats['tokens'])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--preset", choices=sorted(PRESETS))

    p = argparse.ArgumentParser(prog="captionedit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="write the synthetic train/dev/test corpus")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", parents=[common], help="train DCNet and EditNet")
    s.add_argument("--data", required=True, help="directory with train.jsonl and dev.jsonl")
    s.add_argument("--out", required=True, help="directory for the checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="metrics for model and identity baseline")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=SPLITS)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("edit", parents=[common], help="edit one caption and show the alignment")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--caption", required=True)
    s.add_argument("--feature-seed", type=int, default=0)
    s.add_argument("--objects", help="words the synthetic image features should encode "
                                     "(default: content words of the caption)")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("stats", parents=[common], help="corpus statistics")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gradcheck" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (FileNotFoundError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
