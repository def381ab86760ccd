"""Command line entry point: ``python -m ctxnmt <subcommand> ...``.

A *model directory* holds ``model.ckpt`` plus the source and target BPE
merge tables and vocabularies, so later subcommands need only its path.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .decoding import DecodeConfig, EvaluationInputError, bleu_tokens, corpus_bleu, translate, write_hypotheses
from .experiment import (
    SHAPES,
    Cell,
    ExperimentConfig,
    ExperimentConfigError,
    ExperimentReport,
    emit_report,
    parse_config_text,
    run_grid,
)
from .integration import ContextAwareTransformer
from .model import Checkpoint, ConfigurationError
from .rng import RngStream
from .synth import generate_corpus
from .text import (
    EMPTY_CONTEXT,
    BpeModel,
    ContextMode,
    CorpusFormatError,
    Document,
    PipelineInputError,
    Tokenizer,
    Vocab,
    load_document_corpus,
    make_context_triples,
    sample_random_context,
)
from .training import TrainingError, continue_training, fit, train_stage1, train_stage2

USAGE_ERRORS = (ExperimentConfigError, ConfigurationError)
RUNTIME_ERRORS = (OSError, CorpusFormatError, PipelineInputError, EvaluationInputError, TrainingError, ValueError)


class UsageError(Exception):
    pass


# -- model directories ---------------------------------------------------------


def save_model_dir(out, ckpt: Checkpoint, src_tok: Tokenizer, tgt_tok: Tokenizer) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "model.ckpt")
    save_tokenizers(out, src_tok, tgt_tok)
    return out


def save_tokenizers(out, src_tok: Tokenizer, tgt_tok: Tokenizer) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for side, tok in (("src", src_tok), ("tgt", tgt_tok)):
        tok.bpe.save(out / f"{side}.bpe")
        tok.vocab.save(out / f"{side}.vocab")


def load_tokenizers(path) -> tuple:
    path = Path(path)
    return tuple(Tokenizer(BpeModel.load(path / f"{s}.bpe"), Vocab.load(path / f"{s}.vocab")) for s in ("src", "tgt"))


def load_model_dir(path) -> tuple:
    ckpt = Checkpoint.load(Path(path) / "model.ckpt")
    src_tok, tgt_tok = load_tokenizers(path)
    return ContextAwareTransformer.from_checkpoint(ckpt), ckpt, src_tok, tgt_tok


# -- helpers -------------------------------------------------------------------


def _load_config(args) -> ExperimentConfig:
    if args.config:
        return ExperimentConfig.load(args.config)
    return ExperimentConfig()


def _pick(value, default):
    return default if value is None else value


def read_source_documents(path) -> list:
    """Source-only text: one sentence per line, blank lines between documents.

    Lines holding a tab are treated as ``source<TAB>target`` and keep both sides.
    """
    docs, pairs = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            if pairs:
                docs.append(Document(len(docs), pairs))
                pairs = []
            continue
        src, _, tgt = line.partition("\t")
        pairs.append((src.strip(), tgt.strip()))
    if pairs:
        docs.append(Document(len(docs), pairs))
    return docs


def build_inference_triples(docs, ckpt: Checkpoint, src_tok, tgt_tok, mode, seed, context_file=None) -> list:
    if context_file is not None:
        lines = [l for l in Path(context_file).read_text(encoding="utf-8").splitlines()]
        triples = make_context_triples(docs, "none", src_tok, tgt_tok)
        if len(lines) < len(triples):
            raise PipelineInputError(f"context file has {len(lines)} lines for {len(triples)} source sentences")
        for t, line in zip(triples, lines):
            t.context = src_tok.encode(line) or list(EMPTY_CONTEXT)
            t.mode = ContextMode.CONTEXT
        return triples
    if not ckpt.config.multi_encoder and ckpt.config.integration != "single":
        mode = "none"
    fixed = None
    if mode == "fixed":
        stored = ckpt.extra.get("fixed_context", "")
        fixed = [int(x) for x in stored.split(",") if x] or sample_random_context(
            src_tok.vocab, RngStream(seed).child("fixed-context"), _policy(ckpt))
    return make_context_triples(docs, mode, src_tok, tgt_tok, RngStream(seed).child("context-test"), _policy(ckpt), fixed)


def _policy(ckpt: Checkpoint):
    lo, hi = ckpt.extra.get("random_min_len"), ckpt.extra.get("random_max_len")
    base = ExperimentConfig()
    return base.replace(random_min_len=int(lo or base.random_min_len), random_max_len=int(hi or base.random_max_len)).random_policy()


# -- subcommands ---------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    cfg = _load_config(args)
    spec = cfg.task_spec(seed=args.seed)
    out = Path(args.out) if args.out else cfg.path("corpus_dir")
    paths = generate_corpus(spec, out)
    for name, p in paths.items():
        print(f"{name}={p}")
    return 0


def cmd_learn_bpe(args) -> int:
    cfg = _load_config(args)
    if not args.input:
        raise UsageError("learn-bpe needs --input")
    docs = load_document_corpus(args.input)
    merges = _pick(args.merges, cfg.bpe_merges)
    src_tok = Tokenizer.train([s for d in docs for s in d.sources], merges)
    tgt_tok = Tokenizer.train([t for d in docs for t in d.targets], merges)
    out = Path(args.out or ".")
    save_tokenizers(out, src_tok, tgt_tok)
    print(f"src_vocab={len(src_tok.vocab)} tgt_vocab={len(tgt_tok.vocab)} out={out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not args.out:
        raise UsageError("train needs --out")
    seed = _pick(args.seed, cfg.seeds[0])
    stage = args.stage or "sentence"
    mode = args.mode or ("outside" if stage == "finetune" else cfg.mode[0])
    context = args.context or cfg.context[0]
    dropout = _pick(args.dropout, cfg.dropout[0])
    sigma = _pick(args.sigma, cfg.sigma[0])
    cell = Cell.make(mode, context, dropout, sigma, "all", cfg.context_layers[0], cfg.weight_sharing[0], stage == "finetune")
    if stage == "finetune":
        if not args.init:
            raise UsageError("--stage finetune needs --init <stage-1 model directory>")
    corpus = cfg.path("corpus_dir")
    train_docs = load_document_corpus(corpus / "train.txt")
    valid_docs = load_document_corpus(corpus / "valid.txt")
    if args.init:
        src_tok, tgt_tok = load_tokenizers(args.init)
    elif args.bpe:
        src_tok, tgt_tok = load_tokenizers(args.bpe)
    else:
        src_tok = Tokenizer.train([s for d in train_docs for s in d.sources], cfg.bpe_merges)
        tgt_tok = Tokenizer.train([t for d in train_docs for t in d.targets], cfg.bpe_merges)
    tmode = "none" if cell.mode == "none" else cell.context
    policy = cfg.random_policy()
    fixed = sample_random_context(src_tok.vocab, RngStream(seed).child("fixed-context"), policy) if tmode == "fixed" else None

    def triples(docs, split):
        return make_context_triples(docs, tmode, src_tok, tgt_tok, RngStream(seed).child(f"context-{split}"), policy, fixed)

    train, valid = triples(train_docs, "train"), triples(valid_docs, "valid")
    mcfg = cfg.model_config(len(src_tok.vocab), len(tgt_tok.vocab), cell)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_fh = open(out / "train.log", "w", encoding="utf-8")

    def sink(rec):
        log_fh.write(rec + "\n")
        log_fh.flush()
        print(rec)

    try:
        if stage == "finetune":
            init = Checkpoint.load(Path(args.init) / "model.ckpt")
            tc = cfg.train_config("finetune", seed, cfg.finetune_steps, cell.context)
            if cell.multi_encoder:
                res = train_stage2(init, train, valid, mcfg, tc, sink, src_tok.vocab)
            else:
                res = continue_training(init, train, valid, mcfg, tc, sink, src_tok.vocab)
        elif cell.multi_encoder:
            tc = cfg.train_config("sentence", seed, cfg.steps, cell.context)
            res = fit(ContextAwareTransformer(mcfg, seed), train, valid, tc, log_sink=sink, src_vocab=src_tok.vocab,
                      policy=policy)
        else:
            tc = cfg.train_config("sentence", seed, cfg.steps, cell.context or "context")
            res = train_stage1(train, valid, mcfg, tc, sink, src_tok.vocab)
    finally:
        log_fh.close()
    ckpt = res.checkpoint
    ckpt.extra.update(context_mode=tmode, seed=seed, random_min_len=policy.min_len, random_max_len=policy.max_len)
    if fixed is not None:
        ckpt.extra["fixed_context"] = ",".join(map(str, fixed))
    save_model_dir(out, ckpt, src_tok, tgt_tok)
    print(f"checkpoint={out / 'model.ckpt'} steps={res.steps} best_valid_loss={res.best_valid_loss:.6f}")
    return 0


def _decode_cfg(args) -> DecodeConfig:
    schema = args.schema or "aware"
    return DecodeConfig(schema=schema, beam=_pick(args.beam, 4))


def _inference(args):
    if not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint <model directory>")
    if not args.input:
        raise UsageError(f"{args.command} needs --input")
    model, ckpt, src_tok, tgt_tok = load_model_dir(args.checkpoint)
    seed = _pick(args.seed, int(ckpt.extra.get("seed", 1)))
    mode = args.context or ckpt.extra.get("context_mode", "context")
    if mode == "none" and ckpt.config.multi_encoder:
        mode = "context"
    docs = read_source_documents(args.input)
    triples = build_inference_triples(docs, ckpt, src_tok, tgt_tok, mode, seed, args.context_file)
    hyps = [tgt_tok.decode(ids) for ids in translate(model, triples, _decode_cfg(args))]
    return docs, hyps


def cmd_translate(args) -> int:
    _, hyps = _inference(args)
    if args.out:
        write_hypotheses(hyps, args.out)
    else:
        sys.stdout.write("".join(h + "\n" for h in hyps))
    return 0


def cmd_evaluate(args) -> int:
    docs, hyps = _inference(args)
    refs = [t for d in docs for t in d.targets]
    if not all(refs):
        raise EvaluationInputError("evaluate needs source<TAB>reference lines")
    report = corpus_bleu([bleu_tokens(h) for h in hyps], [bleu_tokens(r) for r in refs])
    print(report)
    if args.out:
        line = f"bleu={report.bleu:.4f} schema={args.schema or 'aware'} beam={_pick(args.beam, 4)} sentences={len(hyps)}"
        Path(args.out).write_text(line + "\n", encoding="utf-8")
    return 0


def _grid_config(args, out_is_work_dir=True) -> ExperimentConfig:
    if not args.config:
        raise UsageError(f"{args.command} needs --config")
    cfg = ExperimentConfig.load(args.config)
    overrides = {}
    for flag, key in (("mode", "mode"), ("context", "context"), ("sigma", "sigma"), ("dropout", "dropout")):
        v = getattr(args, flag)
        if v is not None:
            overrides[key] = str(v)
    if args.seed is not None:
        overrides["seeds"] = str(args.seed)
    if overrides:
        raw = parse_config_text(Path(args.config).read_text(encoding="utf-8"), args.config)
        raw.update(overrides)
        cfg = ExperimentConfig.from_dict(raw, Path(args.config).parent)
    if args.out and out_is_work_dir:
        cfg = cfg.replace(work_dir=str(Path(args.out).resolve()))
    return cfg


def cmd_run_grid(args) -> int:
    cfg = _grid_config(args)
    report = run_grid(cfg, workers=args.workers)
    print(f"records={len(report.records)} trained={report.trained} failed={report.failed}")
    return 1 if report.failed else 0


def cmd_report(args) -> int:
    if args.records:
        records = Path(args.records)
        default_out = records.with_name(f"{args.shape}.txt")
    else:
        cfg = _grid_config(args, out_is_work_dir=False)
        records = cfg.path("work_dir") / "records.txt"
        default_out = cfg.path("work_dir") / f"{args.shape}.txt"
    report = ExperimentReport.load(records)
    out, rec_path = emit_report(report, args.shape, args.out or default_out)
    sys.stdout.write(out.read_text(encoding="utf-8"))
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "learn-bpe": cmd_learn_bpe,
    "train": cmd_train,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "run-grid": cmd_run_grid,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxnmt", description="Toy context-aware NMT laboratory.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (key = value lines)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file or directory")
    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--mode", choices=["none", "single", "outside", "inside"])
    model_flags.add_argument("--context", choices=["context", "random", "fixed"])
    model_flags.add_argument("--sigma", type=float)
    model_flags.add_argument("--dropout", type=float)
    decode_flags = argparse.ArgumentParser(add_help=False)
    decode_flags.add_argument("--checkpoint", help="model directory")
    decode_flags.add_argument("--input", help="source file (blank line between documents)")
    decode_flags.add_argument("--context-file", help="one context sentence per source line")
    decode_flags.add_argument("--context", choices=["context", "random", "fixed"])
    decode_flags.add_argument("--schema", choices=["aware", "agnostic"])
    decode_flags.add_argument("--beam", type=int)

    sub.add_parser("gen-corpus", parents=[common], help="write a synthetic document corpus")
    s = sub.add_parser("learn-bpe", parents=[common], help="learn source and target BPE")
    s.add_argument("--input", help="document corpus (source<TAB>target)")
    s.add_argument("--merges", type=int)
    s = sub.add_parser("train", parents=[common, model_flags], help="train one model")
    s.add_argument("--stage", choices=["sentence", "finetune"])
    s.add_argument("--init", help="stage-1 model directory for --stage finetune")
    s.add_argument("--bpe", help="directory written by learn-bpe")
    sub.add_parser("translate", parents=[common, decode_flags], help="decode a source file")
    sub.add_parser("evaluate", parents=[common, decode_flags], help="decode and score against references")
    s = sub.add_parser("run-grid", parents=[common, model_flags], help="run (or resume) an experiment grid")
    s.add_argument("--workers", type=int, default=1)
    s = sub.add_parser("report", parents=[common, model_flags], help="format grid records as a table")
    s.add_argument("--shape", choices=SHAPES, required=True)
    s.add_argument("--records", help="records file (default: <work_dir>/records.txt)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError,) + USAGE_ERRORS as e:
        parser.print_usage(sys.stderr)
        print(f"ctxnmt {args.command}: error: {e}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as e:
        print(f"ctxnmt {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
