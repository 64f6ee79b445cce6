"""Command-line entry points.

Exit status: 0 success, 2 usage error, 3 data error (bad corpus, config or
checkpoint), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .document import DocumentError, load_corpus, write_corpus
from .encoder import LADDER, Ablation
from .numerics import NumericError
from .synth import GenerationError, generate_corpus
from .training import (
    CheckpointError,
    Finetuner,
    Pretrainer,
    load_checkpoint,
    prepare_inputs,
    save_checkpoint,
    vocab_for,
)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
RESOLUTIONS = (256, 512, 768)


class DataError(RuntimeError):
    pass


def _corpus(path, split):
    docs = load_corpus(path, split)
    if not docs:
        raise DataError(f"corpus {path} has no documents in split {split!r}")
    return docs


def _metrics_path(out: Path) -> Path:
    return out.with_name(out.name + ".metrics.tsv")


def cmd_gen_corpus(a) -> None:
    docs, splits = generate_corpus(a.docs, a.seed, a.templates)
    write_corpus(a.out, docs, splits)
    print(f"wrote {len(docs)} documents to {a.out}")


def cmd_pretrain(a) -> None:
    cfg = load_config(a.config)
    if a.seed is not None:
        cfg = cfg.replace(seed=a.seed)
    if a.tasks:
        cfg = cfg.replace(tasks=tuple(t.strip() for t in a.tasks.split(",") if t.strip()))
    out = Path(a.out)
    if a.resume:
        ck_docs = _corpus(a.corpus, "train")
        ck = load_checkpoint(a.resume)
        tr = Pretrainer.resume(a.resume, prepare_inputs(ck_docs, ck.vocab, ck.config))
    else:
        docs = _corpus(a.corpus, "train")
        vocab = vocab_for(docs, cfg.vocab_size)
        tr = Pretrainer(cfg, vocab, prepare_inputs(docs, vocab, cfg))
    tr.run(_metrics_path(out), max_steps=a.max_steps)
    tr.save(out)
    tr.vocab.save(out.with_name(out.name + ".vocab.txt"))
    print(f"pre-trained {tr.step} steps -> {out}")


def _ablation(name):
    return LADDER[name] if name else Ablation()


def cmd_finetune(a) -> None:
    pre = load_checkpoint(a.ckpt)
    cfg = load_config(a.config) if a.config else pre.config
    if a.seed is not None:
        cfg = cfg.replace(seed=a.seed)
    if a.resolution:
        cfg = cfg.replace(image_side=a.resolution)
    if pre.kind != "pretrain":
        raise DataError(f"{a.ckpt} is a {pre.kind} checkpoint; pass a pre-trained one")
    ft = Finetuner(cfg, pre.vocab, a.task, _ablation(a.ablate), pretrained=pre)
    train = prepare_inputs(_corpus(a.corpus, "train"), pre.vocab, cfg)
    out = Path(a.out or str(a.ckpt) + f".{a.task}.ft")
    ft.train(train, _metrics_path(out))
    save_checkpoint(ft.checkpoint(), out)
    report = ft.evaluate(prepare_inputs(_corpus(a.corpus, a.split), pre.vocab, cfg)).report()
    out.with_name(out.name + ".report.tsv").write_text(report, encoding="utf-8")
    sys.stdout.write(report)


def cmd_eval(a) -> None:
    ck = load_checkpoint(a.ckpt)
    if ck.kind != "finetune":
        raise DataError(f"{a.ckpt} is a {ck.kind} checkpoint; eval needs a fine-tuned one")
    cfg = ck.config.replace(image_side=a.resolution) if a.resolution else ck.config
    ft = Finetuner.from_checkpoint(ck, cfg)
    if a.ablate:
        ft.ablation = LADDER[a.ablate]
    report = ft.evaluate(prepare_inputs(_corpus(a.corpus, a.split), ck.vocab, cfg)).report()
    if a.out:
        Path(a.out).write_text(report, encoding="utf-8")
    sys.stdout.write(report)


def cmd_inspect_bias(a) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .training import build_encoder, load_module

    ck = load_checkpoint(a.ckpt)
    model = build_encoder(ck.config, ck.vocab)
    load_module("encoder", model, ck.tensors)
    grids = model.bias.grids()
    if not grids:
        raise DataError(f"bias variant {ck.config.bias_variant} has no tables to inspect")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for (head, pair), grid in sorted(grids.items()):
        stem = f"head{head}_{pair}"
        np.savetxt(out / f"{stem}.csv", grid, delimiter=",", fmt="%.17g")
        fig, ax = plt.subplots(figsize=(4, 3.4))
        im = ax.imshow(grid.T, origin="lower", cmap="RdBu_r")
        ax.set_xlabel("x bucket (key - query)")
        ax.set_ylabel("y bucket (key - query)")
        ax.set_title(f"head {head}, {pair}")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        fig.savefig(out / f"{stem}.png", dpi=80, metadata={"Software": None})
        plt.close(fig)
    print(f"wrote {len(grids)} bias grids to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matrix-vdu", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--docs", type=int, default=512)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--templates", type=int, default=8)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("pretrain", help="self-supervised pre-training")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--tasks", help="comma-separated subset of lreg,lred,mlm,ts,ltr,tdi")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="fine-tune on labels or page classes")
    f.add_argument("--config")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--task", choices=("labels", "classify"), required=True)
    f.add_argument("--corpus", required=True)
    f.add_argument("--ablate", choices=tuple(LADDER))
    f.add_argument("--resolution", type=int, choices=RESOLUTIONS)
    f.add_argument("--split", default="test", choices=("train", "val", "test"))
    f.add_argument("--seed", type=int)
    f.add_argument("--out")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--resolution", type=int, choices=RESOLUTIONS)
    e.add_argument("--ablate", choices=tuple(LADDER))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("inspect-bias", help="dump bias tables as CSV and PNG")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_inspect_bias)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DocumentError, ConfigError, CheckpointError, GenerationError, DataError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
