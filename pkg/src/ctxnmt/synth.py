"""Synthetic document corpora standing in for real parallel data.

Three tasks share one generator:

* ``copy`` - the target repeats the source.
* ``lexical`` - each source word maps to one fixed target word.
* ``disambiguation`` - like ``lexical``, but every sentence also carries a
  topic word, and an ambiguous source word in sentence ``i + 1`` must be
  translated into the sense selected by sentence ``i``'s topic.  Topics are
  drawn independently per sentence, so the current sentence says nothing
  about the sense it needs: only the previous sentence does.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .rng import RngStream
from .text import Document, save_document_corpus

TASKS = ("copy", "lexical", "disambiguation")

_SRC_ONSETS = "ptkbdgmnlrs"
_SRC_VOWELS = "aeiou"
_TGT_ONSETS = ["f", "v", "z", "h", "j", "w", "c", "x", "q", "y", "sh", "th"]
_TGT_VOWELS = ["a", "o", "u", "ei", "ou"]


@dataclass
class SynthTaskSpec:
    task: str = "lexical"
    vocab_size: int = 200
    documents: int = 1000
    sentences_per_doc: int = 3
    min_len: int = 4
    max_len: int = 10
    ambiguity_rate: float = 0.0
    senses: int = 2
    ambiguous_words: int = 8
    zipf: float = 1.0
    valid_documents: int = 100
    test_documents: int = 200
    seed: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown synthetic task {self.task!r}")
        for name in ("vocab_size", "documents", "sentences_per_doc", "min_len", "max_len", "senses", "ambiguous_words"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.min_len > self.max_len:
            raise ValueError("min_len must not exceed max_len")
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ValueError("ambiguity_rate must be in [0, 1]")
        if self.task == "disambiguation" and self.min_len < 2:
            raise ValueError("disambiguation sentences need room for a topic word and an ambiguous word")


def _make_words(rng: RngStream, n: int, onsets, vowels, taken: set) -> list:
    words = []
    while len(words) < n:
        syl = int(rng.integers(1, 4))
        w = "".join(rng.choice(onsets) + rng.choice(vowels) for _ in range(syl))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


@dataclass
class Lexicon:
    source: list
    target: list
    topic_source: list
    topic_target: list
    ambiguous_source: list
    ambiguous_target: list  # [word][sense]

    def to_json(self) -> dict:
        return asdict(self)


def build_lexicon(spec: SynthTaskSpec, rng: RngStream) -> Lexicon:
    taken_s, taken_t = set(), set()
    src = _make_words(rng, spec.vocab_size, _SRC_ONSETS, _SRC_VOWELS, taken_s)
    tgt = src if spec.task == "copy" else _make_words(rng, spec.vocab_size, _TGT_ONSETS, _TGT_VOWELS, taken_t)
    topics_s, topics_t, amb_s, amb_t = [], [], [], []
    if spec.task == "disambiguation":
        topics_s = _make_words(rng, spec.senses, _SRC_ONSETS, _SRC_VOWELS, taken_s)
        topics_t = _make_words(rng, spec.senses, _TGT_ONSETS, _TGT_VOWELS, taken_t)
        amb_s = _make_words(rng, spec.ambiguous_words, _SRC_ONSETS, _SRC_VOWELS, taken_s)
        amb_t = [_make_words(rng, spec.senses, _TGT_ONSETS, _TGT_VOWELS, taken_t) for _ in amb_s]
    return Lexicon(src, tgt, topics_s, topics_t, amb_s, amb_t)


def _generate_docs(spec: SynthTaskSpec, lex: Lexicon, rng: RngStream, n_docs: int) -> list:
    weights = 1.0 / np.arange(1, spec.vocab_size + 1) ** spec.zipf
    cdf = np.cumsum(weights / weights.sum())
    docs = []
    for d in range(n_docs):
        pairs = []
        prev_topic = None
        for i in range(spec.sentences_per_doc):
            n = int(rng.integers(spec.min_len, spec.max_len + 1))
            ids = np.minimum(np.searchsorted(cdf, rng.uniform(n)), spec.vocab_size - 1)
            src = [lex.source[j] for j in ids]
            tgt = [lex.target[j] for j in ids]
            if spec.task == "disambiguation":
                if prev_topic is not None and rng.uniform() < spec.ambiguity_rate:
                    pos = int(rng.integers(0, n))
                    a = int(rng.integers(0, len(lex.ambiguous_source)))
                    src[pos] = lex.ambiguous_source[a]
                    tgt[pos] = lex.ambiguous_target[a][prev_topic]
                topic = int(rng.integers(0, spec.senses))
                pos = int(rng.integers(0, n + 1))
                src.insert(pos, lex.topic_source[topic])
                tgt.insert(pos, lex.topic_target[topic])
                prev_topic = topic
            pairs.append((" ".join(src), " ".join(tgt)))
        docs.append(Document(d, pairs))
    return docs


@dataclass
class SynthCorpus:
    spec: SynthTaskSpec
    lexicon: Lexicon
    train: list
    valid: list
    test: list

    def split(self, name: str) -> list:
        return getattr(self, name)


def generate(spec: SynthTaskSpec) -> SynthCorpus:
    rng = RngStream(spec.seed)
    lex = build_lexicon(spec, rng.child("lexicon"))
    return SynthCorpus(
        spec,
        lex,
        _generate_docs(spec, lex, rng.child("train"), spec.documents),
        _generate_docs(spec, lex, rng.child("valid"), spec.valid_documents),
        _generate_docs(spec, lex, rng.child("test"), spec.test_documents),
    )


def generate_corpus(spec: SynthTaskSpec, out_dir) -> dict:
    """Write ``train.txt``/``valid.txt``/``test.txt`` plus ``meta.json``; returns the paths."""
    corpus = generate(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in ("train", "valid", "test"):
        paths[name] = out / f"{name}.txt"
        save_document_corpus(corpus.split(name), paths[name])
    paths["meta"] = out / "meta.json"
    paths["meta"].write_text(
        json.dumps({"spec": asdict(spec), "lexicon": corpus.lexicon.to_json()}, indent=1, sort_keys=True),
        encoding="utf-8",
    )
    return paths


def load_meta(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def ambiguous_accuracy(sources, hypotheses, references, ambiguous_words) -> tuple:
    """Fraction of ambiguous source words whose aligned hypothesis word matches the reference.

    The synthetic tasks translate word for word, so source position ``j``
    aligns with target position ``j``.  Returns ``(correct, total)``.
    """
    amb = set(ambiguous_words)
    correct = total = 0
    for s, h, r in zip(sources, hypotheses, references):
        sw, hw, rw = s.split(), h.split(), r.split()
        for j, w in enumerate(sw):
            if w in amb:
                total += 1
                correct += int(j < len(hw) and hw[j] == rw[j])
    return correct, total
