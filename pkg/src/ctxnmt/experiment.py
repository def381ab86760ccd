"""Experiment grids: configuration, resumable execution and report tables.

A config file is flat ``key = value`` text.  Keys listed in ``AXES`` may
hold comma-separated values; their cartesian product (after collapsing
combinations that mean the same thing) is the grid.  Every (cell, seed)
pair gets a fingerprint and one line in ``records.txt``.
"""

from __future__ import annotations

import dataclasses
import fcntl
import hashlib
import itertools
import json
import math
import os
import statistics
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .decoding import DecodeConfig, evaluate
from .integration import ContextAwareTransformer, compose_modes
from .model import Checkpoint, ConfigurationError, ModelConfig
from .rng import RngStream
from .synth import SynthTaskSpec, ambiguous_accuracy, generate_corpus, load_meta
from .text import (
    ContextMode,
    RandomContextPolicy,
    Tokenizer,
    load_document_corpus,
    make_context_triples,
)
from .training import TrainConfig, continue_training, fit, train_stage1, train_stage2

AXES = ("mode", "context", "dropout", "sigma", "data_size", "context_layers", "weight_sharing", "two_stage")
SHAPES = ("table2", "table3", "table4", "table5", "figure2")
ABSENT = "-"


class ExperimentConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_data_size(text: str):
    t = text.strip().lower()
    if t == "all":
        return "all"
    n = int(t)
    if n < 1:
        raise ValueError("data_size must be positive or 'all'")
    return n


_AXIS_TYPES = {
    "mode": str,
    "context": str,
    "dropout": float,
    "sigma": float,
    "data_size": _parse_data_size,
    "context_layers": int,
    "weight_sharing": _parse_bool,
    "two_stage": _parse_bool,
    "seeds": int,
    "schemas": str,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines into a dict of raw strings; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq or not key:
            raise ExperimentConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key in out:
            raise ExperimentConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


@dataclass
class ExperimentConfig:
    # corpus
    task: str = "lexical"
    vocab_size: int = 200
    documents: int = 3000
    sentences_per_doc: int = 3
    min_len: int = 4
    max_len: int = 10
    ambiguity_rate: float = 0.0
    senses: int = 2
    ambiguous_words: int = 8
    zipf: float = 1.0
    valid_documents: int = 100
    test_documents: int = 200
    corpus_seed: int = 1
    bpe_merges: int = 500
    # model
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 256
    encoder_layers: int = 2
    decoder_layers: int = 2
    label_smoothing: float = 0.1
    gate_bias_init: float = 2.0
    # training
    steps: int = 3000
    finetune_steps: int = 1500
    warmup: int = 400
    lr_scale: float = 1.0
    max_tokens: int = 1024
    valid_every: int = 200
    patience: int = 5
    random_min_len: int = 5
    random_max_len: int = 30
    random_resample: str = "epoch"
    # decoding
    beam: int = 4
    alpha: float = 0.6
    # grid
    mode: tuple = ("none",)
    context: tuple = ("context",)
    dropout: tuple = (0.1,)
    sigma: tuple = (0.0,)
    data_size: tuple = ("all",)
    context_layers: tuple = (1,)
    weight_sharing: tuple = (False,)
    two_stage: tuple = (True,)
    schemas: tuple = ("aware", "agnostic")
    seeds: tuple = (1, 2, 3)
    # paths, relative ones resolve against the config file's directory
    corpus_dir: str = "corpus"
    work_dir: str = "runs"
    base_dir: str = field(default=".", repr=False)

    LIST_KEYS = AXES + ("schemas", "seeds")
    PATH_KEYS = ("corpus_dir", "work_dir")

    @classmethod
    def from_dict(cls, values: dict, base_dir=".") -> "ExperimentConfig":
        kwargs = {}
        known = {f.name: f for f in dataclasses.fields(cls) if f.name != "base_dir"}
        for key, raw in values.items():
            if key not in known:
                raise ExperimentConfigError(f"unknown config key {key!r}")
            try:
                if key in cls.LIST_KEYS:
                    items = [v.strip() for v in str(raw).split(",") if v.strip()]
                    if not items:
                        raise ValueError("empty list")
                    kwargs[key] = tuple(_AXIS_TYPES[key](v) for v in items)
                else:
                    default = known[key].default
                    if isinstance(default, bool):
                        kwargs[key] = _parse_bool(raw)
                    else:
                        kwargs[key] = type(default)(raw)
            except ValueError as e:
                raise ExperimentConfigError(f"bad value for {key!r}: {e}") from None
        cfg = cls(base_dir=str(base_dir), **kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(parse_config_text(path.read_text(encoding="utf-8"), str(path)), path.parent)

    def validate(self) -> None:
        for s in self.schemas:
            if s not in ("aware", "agnostic"):
                raise ExperimentConfigError(f"unknown schema {s!r}")
        try:
            self.task_spec()
        except ValueError as e:
            raise ExperimentConfigError(str(e)) from None

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def path(self, key: str) -> Path:
        p = Path(getattr(self, key))
        return p if p.is_absolute() else Path(self.base_dir) / p

    def task_spec(self, seed: Optional[int] = None) -> SynthTaskSpec:
        return SynthTaskSpec(
            task=self.task, vocab_size=self.vocab_size, documents=self.documents,
            sentences_per_doc=self.sentences_per_doc, min_len=self.min_len, max_len=self.max_len,
            ambiguity_rate=self.ambiguity_rate, senses=self.senses, ambiguous_words=self.ambiguous_words,
            zipf=self.zipf, valid_documents=self.valid_documents, test_documents=self.test_documents,
            seed=self.corpus_seed if seed is None else seed,
        )

    def shared_items(self) -> dict:
        """Settings every cell depends on besides its axes, seed and corpus."""
        skip = set(self.LIST_KEYS) | set(self.PATH_KEYS) | {"base_dir"}
        skip |= {f.name for f in dataclasses.fields(SynthTaskSpec)} | {"corpus_seed"}
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name not in skip}
        out["schemas"] = ",".join(self.schemas)
        return out

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(_fmt_value(x) for x in v)
            else:
                v = _fmt_value(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def random_policy(self) -> RandomContextPolicy:
        return RandomContextPolicy(self.random_min_len, self.random_max_len, self.random_resample)

    def model_config(self, src_vocab: int, tgt_vocab: int, cell: "Cell") -> ModelConfig:
        return ModelConfig(
            src_vocab_size=src_vocab, tgt_vocab_size=tgt_vocab, d_model=self.d_model,
            num_heads=self.num_heads, d_ff=self.d_ff, encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers, dropout=cell.dropout, label_smoothing=self.label_smoothing,
            integration=cell.mode, noise_sigma=cell.sigma,
            context_encoder_layers=cell.context_layers or 1,
            weight_sharing=bool(cell.weight_sharing), gate_bias_init=self.gate_bias_init,
        )

    def train_config(self, stage: str, seed: int, steps: int, context_mode: str = "context") -> TrainConfig:
        return TrainConfig(
            stage=stage, max_steps=steps, warmup=self.warmup, lr_scale=self.lr_scale,
            max_tokens=self.max_tokens, valid_every=self.valid_every, patience=self.patience,
            random_resample=self.random_resample, seed=seed, context_mode=context_mode,
        )


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class Cell:
    """One grid point; fields that do not apply to ``mode`` are ``None``."""

    mode: str
    context: Optional[str]
    dropout: float
    sigma: float
    data_size: object = "all"
    context_layers: Optional[int] = None
    weight_sharing: Optional[bool] = None
    two_stage: Optional[bool] = None

    @property
    def multi_encoder(self) -> bool:
        return self.mode in ("outside", "inside")

    def key(self) -> str:
        def f(v):
            if v is None:
                return ABSENT
            return _fmt_value(v)

        return (
            f"mode={self.mode} context={f(self.context)} dropout={f(self.dropout)} sigma={f(self.sigma)} "
            f"data={f(self.data_size)} layers={f(self.context_layers)} ws={f(self.weight_sharing)} "
            f"ts={f(self.two_stage)}"
        )

    @classmethod
    def make(cls, mode, context, dropout, sigma, data_size="all", context_layers=1, weight_sharing=False,
             two_stage=True) -> "Cell":
        """Normalise and validate a raw axis combination."""
        compose_modes(mode, float(sigma))
        if context is not None:
            ContextMode(context)
        if mode == "none":
            return cls("none", None, float(dropout), float(sigma), data_size, two_stage=bool(two_stage))
        if mode == "single":
            return cls("single", "context", float(dropout), float(sigma), data_size, two_stage=bool(two_stage))
        if context in (None, "none"):
            raise ConfigurationError(f"{mode} integration needs a context mode")
        return cls(mode, context, float(dropout), float(sigma), data_size, int(context_layers),
                   bool(weight_sharing), bool(two_stage))

    def stage1_cell(self) -> "Cell":
        """Sentence-level parent a two-stage cell is fine-tuned from (``two_stage`` unset)."""
        return Cell("none", None, self.dropout, 0.0, self.data_size)

    @property
    def is_parent(self) -> bool:
        return self.two_stage is None


def expand_grid(cfg: ExperimentConfig) -> list:
    cells, seen = [], set()
    for data, drop, sig, mode, ctx, layers, ws, ts in itertools.product(
        cfg.data_size, cfg.dropout, cfg.sigma, cfg.mode, cfg.context, cfg.context_layers,
        cfg.weight_sharing, cfg.two_stage,
    ):
        try:
            cell = Cell.make(mode, ctx, drop, sig, data, layers, ws, ts)
        except (ValueError, ConfigurationError) as e:
            raise ExperimentConfigError(f"invalid grid cell mode={mode} context={ctx} sigma={sig}: {e}") from None
        if cell not in seen:
            seen.add(cell)
            cells.append(cell)
    if not cells:
        raise ExperimentConfigError("grid is empty")
    return cells


def corpus_hash(corpus_dir) -> str:
    h = hashlib.sha256()
    for name in ("train.txt", "valid.txt", "test.txt"):
        h.update(name.encode())
        h.update((Path(corpus_dir) / name).read_bytes())
    return h.hexdigest()[:16]


def cell_fingerprint(cfg: ExperimentConfig, cell: Cell, seed: int, corpus_digest: str) -> str:
    shared = "".join(f"{k}={_fmt_value(v)}\n" for k, v in sorted(cfg.shared_items().items()))
    payload = f"{shared}{cell.key()}\nseed={seed}\ncorpus={corpus_digest}\n"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# -- records -------------------------------------------------------------------

RECORD_FIELDS = (
    "fingerprint", "mode", "context", "dropout", "sigma", "data", "layers", "ws", "ts", "seed", "status",
    "steps", "final_loss", "valid_bleu", "test_bleu_aware", "test_bleu_agnostic",
    "amb_aware", "amb_agnostic", "amb_total", "wall_time",
)
TIMING_FIELDS = ("wall_time",)


def format_record(rec: dict) -> str:
    parts = []
    for k in RECORD_FIELDS + tuple(k for k in rec if k not in RECORD_FIELDS):
        v = rec.get(k, ABSENT)
        v = ABSENT if v is None else str(v)
        parts.append(f"{k}={'_'.join(v.split()) or ABSENT}")
    return " ".join(parts)


def parse_record(line: str) -> dict:
    rec = {}
    for part in line.split():
        k, _, v = part.partition("=")
        rec[k] = v
    return rec


def append_record(path, rec: dict) -> None:
    """Append one line under an exclusive lock (safe across worker processes)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.write(format_record(rec) + "\n")
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_records(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    return [parse_record(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]


def _num(v):
    try:
        x = float(v)
    except (TypeError, ValueError):
        return None
    return None if math.isnan(x) else x


def cell_key_of(rec: dict) -> tuple:
    return tuple(rec.get(k, ABSENT) for k in ("mode", "context", "dropout", "sigma", "data", "layers", "ws", "ts"))


@dataclass
class Aggregate:
    mean: float
    stdev: float
    n: int

    def __str__(self) -> str:
        return f"{self.mean:.2f}±{self.stdev:.2f}"


@dataclass
class ExperimentReport:
    records: list = field(default_factory=list)
    trained: int = 0  # cells trained by the run that produced this report
    failed: int = 0

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        return cls(read_records(path))

    def ok_records(self) -> list:
        return [r for r in self.records if r.get("status") == "ok"]

    def aggregate(self, metric: str) -> dict:
        """``cell key -> Aggregate`` of ``metric`` over seeds (sample stdev, 0 for one seed)."""
        groups: dict = {}
        seen = set()
        for r in self.ok_records():
            if (r["fingerprint"]) in seen:
                continue
            seen.add(r["fingerprint"])
            x = _num(r.get(metric))
            if x is not None:
                groups.setdefault(cell_key_of(r), []).append(x)
        return {
            k: Aggregate(statistics.fmean(v), statistics.stdev(v) if len(v) > 1 else 0.0, len(v))
            for k, v in groups.items()
        }

    def find(self, metric: str, **want) -> Optional[Aggregate]:
        """Aggregate of the one cell whose record fields match ``want`` (strings or values)."""
        want = {k: _fmt_value(v) if not isinstance(v, str) else v for k, v in want.items()}
        matches = [
            agg for key, agg in self.aggregate(metric).items()
            if all(dict(zip(("mode", "context", "dropout", "sigma", "data", "layers", "ws", "ts"), key))[k] == v
                   for k, v in want.items())
        ]
        return matches[0] if len(matches) == 1 else None


# -- running cells -------------------------------------------------------------


@dataclass
class GridData:
    train: list
    valid: list
    test: list
    src_tok: Tokenizer
    tgt_tok: Tokenizer
    digest: str
    ambiguous: list


def ensure_corpus(cfg: ExperimentConfig) -> Path:
    d = cfg.path("corpus_dir")
    spec = cfg.task_spec()
    if not (d / "train.txt").exists():
        generate_corpus(spec, d)
    elif (d / "meta.json").exists():
        found = load_meta(d / "meta.json")["spec"]
        want = json.loads(json.dumps(dataclasses.asdict(spec)))
        if found != want:
            diff = sorted(k for k in want if found.get(k) != want[k])
            raise ExperimentConfigError(f"{d} holds a corpus generated with different settings ({', '.join(diff)})")
    return d


def load_grid_data(cfg: ExperimentConfig) -> GridData:
    d = ensure_corpus(cfg)
    train = load_document_corpus(d / "train.txt")
    valid = load_document_corpus(d / "valid.txt")
    test = load_document_corpus(d / "test.txt")
    src_tok = Tokenizer.train([s for doc in train for s in doc.sources], cfg.bpe_merges)
    tgt_tok = Tokenizer.train([t for doc in train for t in doc.targets], cfg.bpe_merges)
    ambiguous = []
    if (d / "meta.json").exists():
        ambiguous = load_meta(d / "meta.json")["lexicon"].get("ambiguous_source", [])
    return GridData(train, valid, test, src_tok, tgt_tok, corpus_hash(d), ambiguous)


def fixed_context_for(cfg: ExperimentConfig, tok: Tokenizer, seed: int) -> list:
    from .text import sample_random_context

    return sample_random_context(tok.vocab, RngStream(seed).child("fixed-context"), cfg.random_policy())


def cell_triples(cfg: ExperimentConfig, cell: Cell, docs, data: GridData, seed: int, split: str) -> list:
    mode = "none" if cell.mode == "none" else cell.context
    fixed = fixed_context_for(cfg, data.src_tok, seed) if mode == "fixed" else None
    rng = RngStream(seed).child(f"context-{split}")
    return make_context_triples(docs, mode, data.src_tok, data.tgt_tok, rng, cfg.random_policy(), fixed)


def _subset(docs, size):
    return list(docs) if size == "all" else list(docs[:size])


def _atomic_save(ckpt: Checkpoint, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    ckpt.save(tmp)
    os.replace(tmp, path)


def train_cell(cfg: ExperimentConfig, cell: Cell, seed: int, data: GridData,
               log_sink: Optional[Callable[[str], None]] = None, ckpt_dir: Optional[Path] = None):
    """Train one cell; returns a ``TrainResult``.  Stage-1 parents are cached in ``ckpt_dir``."""
    train_docs = _subset(data.train, cell.data_size)
    train = cell_triples(cfg, cell, train_docs, data, seed, "train")
    valid = cell_triples(cfg, cell, data.valid, data, seed, "valid")
    mcfg = cfg.model_config(len(data.src_tok.vocab), len(data.tgt_tok.vocab), cell)
    ctx_mode = cell.context or "context"
    if cell.is_parent:
        tc = cfg.train_config("sentence", seed, cfg.steps, ctx_mode)
        return train_stage1(train, valid, mcfg, tc, log_sink, data.src_tok.vocab)
    if not cell.two_stage:
        # one stage with the same total budget as parent plus fine-tuning
        tc = cfg.train_config("sentence", seed, cfg.steps + cfg.finetune_steps, ctx_mode)
        model = ContextAwareTransformer(mcfg, seed=seed)
        return fit(model, train, valid, tc, log_sink=log_sink, src_vocab=data.src_tok.vocab,
                   policy=cfg.random_policy())
    parent = stage1_checkpoint(cfg, cell.stage1_cell(), seed, data, ckpt_dir, log_sink)
    tc = cfg.train_config("finetune", seed, cfg.finetune_steps, ctx_mode)
    if not cell.multi_encoder:
        return continue_training(parent, train, valid, mcfg, tc, log_sink, data.src_tok.vocab)
    return train_stage2(parent, train, valid, mcfg, tc, log_sink, data.src_tok.vocab)


def stage1_checkpoint(cfg, cell: Cell, seed: int, data: GridData, ckpt_dir, log_sink=None) -> Checkpoint:
    if ckpt_dir is not None:
        path = Path(ckpt_dir) / f"{cell_fingerprint(cfg, cell, seed, data.digest)}.ckpt"
        if path.exists():
            return Checkpoint.load(path)
    res = train_cell(cfg, cell, seed, data, log_sink, ckpt_dir)
    if ckpt_dir is not None:
        _atomic_save(res.checkpoint, path)
    return res.checkpoint


def _bleu(model, triples, data: GridData, cfg: ExperimentConfig, schema: str):
    return evaluate(model, triples, data.tgt_tok, DecodeConfig(schema=schema, beam=cfg.beam, alpha=cfg.alpha))


def run_cell(cfg: ExperimentConfig, cell: Cell, seed: int, data: GridData, ckpt_dir: Optional[Path] = None,
             log_sink=None) -> dict:
    """Train and evaluate one (cell, seed); returns its record."""
    start = time.perf_counter()
    fp = cell_fingerprint(cfg, cell, seed, data.digest)
    res = train_cell(cfg, cell, seed, data, log_sink, ckpt_dir)
    if ckpt_dir is not None:
        _atomic_save(res.checkpoint, Path(ckpt_dir) / f"{fp}.ckpt")
    model = res.model
    valid = cell_triples(cfg, cell, data.valid, data, seed, "valid")
    test = cell_triples(cfg, cell, data.test, data, seed, "test")
    rec = _cell_fields(cell, fp, seed)
    rec.update(status="ok", steps=res.steps, final_loss=f"{res.best_valid_loss:.6f}")
    rec["valid_bleu"] = f"{_bleu(model, valid, data, cfg, 'aware').report.bleu:.4f}"
    sources = [s for d in data.test for s in d.sources]
    for schema in cfg.schemas:
        if schema == "agnostic" and not cell.multi_encoder:
            continue
        ev = _bleu(model, test, data, cfg, schema)
        rec[f"test_bleu_{schema}"] = f"{ev.report.bleu:.4f}"
        if data.ambiguous:
            c, t = ambiguous_accuracy(sources, ev.hypotheses, ev.references, data.ambiguous)
            rec[f"amb_{schema}"] = c
            rec["amb_total"] = t
    rec["wall_time"] = f"{time.perf_counter() - start:.1f}"
    return rec


def _cell_fields(cell: Cell, fp: str, seed: int) -> dict:
    f = lambda v: None if v is None else _fmt_value(v)  # noqa: E731
    return {
        "fingerprint": fp, "mode": cell.mode, "context": cell.context, "dropout": f(cell.dropout),
        "sigma": f(cell.sigma), "data": f(cell.data_size), "layers": f(cell.context_layers),
        "ws": f(cell.weight_sharing), "ts": f(cell.two_stage), "seed": seed,
    }


def _worker(args):
    cfg, cell, seed, ckpt_dir = args
    data = load_grid_data(cfg)
    try:
        return run_cell(cfg, cell, seed, data, ckpt_dir)
    except Exception as e:  # recorded, not fatal
        rec = _cell_fields(cell, cell_fingerprint(cfg, cell, seed, data.digest), seed)
        rec.update(status="failed", error=f"{type(e).__name__}:{e}")
        return rec


def run_grid(cfg: ExperimentConfig, log: Callable[[str], None] = print, workers: int = 1) -> ExperimentReport:
    """Run every missing (cell, seed) of the grid and return the full report.

    Cells whose fingerprint already has an ``ok`` record are skipped, so an
    interrupted grid resumes where it stopped.  A cell that raises gets a
    ``failed`` record and the grid continues.
    """
    cells = expand_grid(cfg)
    work = cfg.path("work_dir")
    work.mkdir(parents=True, exist_ok=True)
    records_path = work / "records.txt"
    ckpt_dir = work / "checkpoints"
    data = load_grid_data(cfg)
    done = {r["fingerprint"] for r in read_records(records_path) if r.get("status") == "ok"}
    todo = []
    for cell in cells:
        for seed in cfg.seeds:
            fp = cell_fingerprint(cfg, cell, seed, data.digest)
            if fp in done:
                log(f"skip {fp} {cell.key()} seed={seed}")
            else:
                todo.append((cell, seed))
    trained = failed = 0

    def finish(rec):
        nonlocal trained, failed
        append_record(records_path, rec)
        trained += 1
        failed += rec["status"] != "ok"
        log(format_record(rec))

    if workers > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            for rec in pool.map(_worker, [(cfg, c, s, ckpt_dir) for c, s in todo]):
                finish(rec)
    else:
        for cell, seed in todo:
            log(f"run {cell.key()} seed={seed}")
            try:
                rec = run_cell(cfg, cell, seed, data, ckpt_dir)
            except Exception as e:
                log(traceback.format_exc())
                rec = _cell_fields(cell, cell_fingerprint(cfg, cell, seed, data.digest), seed)
                rec.update(status="failed", error=f"{type(e).__name__}:{e}")
            finish(rec)
    wanted = {cell_fingerprint(cfg, c, s, data.digest) for c in cells for s in cfg.seeds}
    records = [r for r in read_records(records_path) if r["fingerprint"] in wanted]
    return ExperimentReport(records, trained, failed)


# -- report tables -------------------------------------------------------------


def _table(title: str, header: list, rows: list) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    out = [title, line(header), line(["-" * w for w in widths])]
    out.extend(line(r) for r in rows)
    return "\n".join(out) + "\n"


def _distinct(report: ExperimentReport, key: str, default: list, **where) -> list:
    vals = sorted(
        {float(r[key]) for r in report.ok_records() if all(r.get(k) == v for k, v in where.items())}
    )
    return vals or default


def _cellv(report, metric="test_bleu_aware", **want) -> str:
    agg = None
    if want.get("mode") in ("none", "single") and "ts" not in want:
        # a grid with both training strategies reports the two-stage sentence-level model
        agg = report.find(metric, ts="true", **want)
    agg = agg or report.find(metric, **want)
    return str(agg) if agg is not None else ABSENT


def _table2(report: ExperimentReport) -> str:
    variants = sorted(
        {(r["layers"], r["ws"], r["ts"]) for r in report.ok_records()
         if r["mode"] == "outside" and r["context"] == "context" and r["sigma"] == "0.0"}
    ) or [("6", "false", "false"), ("6", "true", "false"), ("6", "false", "true"), ("1", "false", "true")]
    mark = {"true": "yes", "false": "no"}
    blocks = []
    for p in _distinct(report, "dropout", [0.1], mode="outside"):
        rows = [["Sentence-level", ABSENT, ABSENT, ABSENT, _cellv(report, mode="none", dropout=p, sigma=0.0, data="all")]]
        for layers, ws, ts in variants:
            rows.append(["Outside Context", layers, mark[ws], mark[ts],
                         _cellv(report, mode="outside", context="context", dropout=p, sigma=0.0, data="all",
                                layers=layers, ws=ws, ts=ts)])
        blocks.append(_table(f"# training strategies, dropout={p}", ["System", "Layers", "WS", "TS", "BLEU"], rows))
    return "\n".join(blocks)


_STD = dict(sigma=0.0, data="all")
_MULTI = dict(layers="1", ws="false", ts="true")


def _table3(report: ExperimentReport) -> str:
    ps = _distinct(report, "dropout", [0.1, 0.3])
    header = ["System", "Context"] + [f"p={p}" for p in ps]
    rows = [
        ["Sentence-level", ABSENT] + [_cellv(report, mode="none", dropout=p, **_STD) for p in ps],
        ["Single-encoder", ABSENT] + [_cellv(report, mode="single", dropout=p, **_STD) for p in ps],
    ]
    for mode in ("inside", "outside"):
        for ctx in ("context", "random", "fixed"):
            rows.append([mode.capitalize(), ctx.capitalize()] +
                        [_cellv(report, mode=mode, context=ctx, dropout=p, **_STD, **_MULTI) for p in ps])
    return _table("# test BLEU by context input", header, rows)


def _table4(report: ExperimentReport) -> str:
    blocks = []
    for p in _distinct(report, "dropout", [0.1], mode="outside") if report.ok_records() else [0.1]:
        rows = []
        for ctx in ("context", "random", "fixed"):
            row = [ctx.capitalize()]
            for mode in ("inside", "outside"):
                for schema in ("aware", "agnostic"):
                    row.append(_cellv(report, f"test_bleu_{schema}", mode=mode, context=ctx, dropout=p,
                                      **_STD, **_MULTI))
            rows.append(row)
        header = ["System", "Inside Aware", "Inside Agnostic", "Outside Aware", "Outside Agnostic"]
        blocks.append(_table(f"# inference schemas, dropout={p}", header, rows))
    return "\n".join(blocks)


def _table5(report: ExperimentReport) -> str:
    sigmas = [s for s in _distinct(report, "sigma", [0.3]) if s > 0] or [0.3]
    blocks = []
    for p in _distinct(report, "dropout", [0.3]):
        for s in sigmas:
            rows = [
                ["Baseline", _cellv(report, mode="none", dropout=p, sigma=0.0, data="all")],
                ["Context", _cellv(report, mode="outside", context="context", dropout=p, sigma=0.0, data="all", **_MULTI)],
                ["Noise", _cellv(report, mode="none", dropout=p, sigma=s, data="all")],
                ["Context+Noise", _cellv(report, mode="outside", context="context", dropout=p, sigma=s, data="all", **_MULTI)],
            ]
            blocks.append(_table(f"# noise regularisation, dropout={p} sigma={s}", ["System", "BLEU"], rows))
    return "\n".join(blocks)


def _figure2(report: ExperimentReport) -> str:
    sizes = sorted({r["data"] for r in report.ok_records()}, key=lambda d: (d == "all", int(d) if d.isdigit() else 0))
    sizes = sizes or ["500", "1000", "2000", "4000"]
    sigmas = [s for s in _distinct(report, "sigma", [0.3]) if s > 0] or [0.3]
    blocks = []
    for p in _distinct(report, "dropout", [0.1]):
        rows = []
        for d in sizes:
            rows.append([d,
                         _cellv(report, mode="none", dropout=p, sigma=0.0, data=d),
                         _cellv(report, mode="inside", context="random", dropout=p, sigma=0.0, data=d, **_MULTI),
                         _cellv(report, mode="none", dropout=p, sigma=sigmas[0], data=d)])
        blocks.append(_table(f"# BLEU vs data volume, dropout={p}", ["Documents", "Base", "Inside", "Gaussian"], rows))
    return "\n".join(blocks)


_SHAPERS = {"table2": _table2, "table3": _table3, "table4": _table4, "table5": _table5, "figure2": _figure2}


def format_report(report: ExperimentReport, shape: str) -> str:
    if shape not in _SHAPERS:
        raise ExperimentConfigError(f"unknown report shape {shape!r}; expected one of {', '.join(SHAPES)}")
    return _SHAPERS[shape](report)


def emit_report(report: ExperimentReport, shape: str, out) -> tuple:
    """Write the table to ``out`` and the records to ``out`` + ``.records``; returns both paths."""
    text = format_report(report, shape)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    rec_path = out.with_name(out.name + ".records")
    rec_path.write_text("".join(format_record(r) + "\n" for r in report.records), encoding="utf-8")
    return out, rec_path
