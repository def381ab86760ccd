"""Subword tokenization, vocabularies, document corpora and context triples."""

from __future__ import annotations

import collections
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import RngStream

EOW = "</w>"

PAD, BOS, EOS, UNK, BRK = 0, 1, 2, 3, 4
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>", "<brk>")


class CorpusFormatError(ValueError):
    pass


class PipelineInputError(ValueError):
    pass


# -- BPE -----------------------------------------------------------------------


def _word_symbols(word: str) -> tuple:
    return tuple(word[:-1]) + (word[-1] + EOW,)


def _pair_counts(vocab: dict) -> collections.Counter:
    pairs = collections.Counter()
    for symbols, freq in vocab.items():
        for a, b in zip(symbols, symbols[1:]):
            pairs[a, b] += freq
    return pairs


def _merge_word(symbols: tuple, pair: tuple, joined: str) -> tuple:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(joined)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


@dataclass
class BpeModel:
    """Ordered merge table; symbols carry ``</w>`` on the last piece of a word."""

    merges: list = field(default_factory=list)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        self._ranks = {m: i for i, m in enumerate(self.merges)}
        self._cache: dict = {}

    @property
    def num_merges(self) -> int:
        return len(self.merges)

    def segment_word(self, word: str) -> tuple:
        if word in self._cache:
            return self._cache[word]
        symbols = _word_symbols(word)
        while len(symbols) > 1:
            ranked = [(self._ranks.get(p, np.inf), p) for p in zip(symbols, symbols[1:])]
            rank, best = min(ranked)
            if rank == np.inf:
                break
            symbols = _merge_word(symbols, best, best[0] + best[1])
        self._cache[word] = symbols
        return symbols

    def segment(self, sentence: str) -> list:
        return [s for w in sentence.split() for s in self.segment_word(w)]

    def save(self, path) -> None:
        lines = [f"bpe-merges {len(self.merges)}"] + [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = lines[0].split()
        if len(head) != 2 or head[0] != "bpe-merges":
            raise CorpusFormatError(f"{path}:1: expected 'bpe-merges <count>' header")
        count = int(head[1])
        merges = []
        for lineno, line in enumerate(lines[1 : count + 1], start=2):
            parts = line.split(" ")
            if len(parts) != 2:
                raise CorpusFormatError(f"{path}:{lineno}: expected 'left right'")
            merges.append((parts[0], parts[1]))
        if len(merges) != count:
            raise CorpusFormatError(f"{path}: header declares {count} merges, found {len(merges)}")
        return cls(merges)


def learn_bpe(corpus: Sequence[str], num_merges: int) -> BpeModel:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Frequency ties go to the lexicographically smallest pair so the learned
    table is a deterministic function of the corpus.
    """
    if num_merges < 0:
        raise PipelineInputError("num_merges must be >= 0")
    words = collections.Counter(w for s in corpus for w in s.split())
    if not words:
        raise PipelineInputError("cannot learn BPE from an empty corpus")
    vocab = {_word_symbols(w): f for w, f in words.items()}
    pairs = _pair_counts(vocab)
    merges = []
    for _ in range(num_merges):
        if not pairs:
            break
        top = max(pairs.values())
        if top < 1:
            break
        best = min(p for p, c in pairs.items() if c == top)
        joined = best[0] + best[1]
        merges.append(best)
        new_vocab = {}
        for symbols, freq in vocab.items():
            if best[0] in symbols and len(symbols) > 1:
                merged = _merge_word(symbols, best, joined)
                if merged != symbols:
                    for a, b in zip(symbols, symbols[1:]):
                        pairs[a, b] -= freq
                    for a, b in zip(merged, merged[1:]):
                        pairs[a, b] += freq
                    symbols = merged
            new_vocab[symbols] = freq
        vocab = new_vocab
        pairs = +pairs
    return BpeModel(merges)


# -- vocabulary ----------------------------------------------------------------


class Vocab:
    """Dense token/id bijection.  Ids 0-4 are PAD, BOS, EOS, UNK, BRK in that order."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    @property
    def num_reserved(self) -> int:
        return len(SPECIALS)

    def regular_ids(self) -> np.ndarray:
        return np.arange(len(SPECIALS), len(self.itos))

    @classmethod
    def build(cls, bpe: BpeModel, corpus: Sequence[str]) -> "Vocab":
        """Vocabulary covering every character of ``corpus`` plus all its subwords.

        Tokens are ordered by descending frequency, then lexicographically.
        """
        counts = collections.Counter()
        alphabet = set()
        for s in corpus:
            counts.update(bpe.segment(s))
            for w in s.split():
                alphabet.update(w)
                alphabet.update(c + EOW for c in w)
        for sym in alphabet:
            counts.setdefault(sym, 0)
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ordered)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[len(SPECIALS):]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(t for t in text.split("\n") if t)


@dataclass
class Tokenizer:
    """A BPE model paired with the vocabulary over its subwords."""

    bpe: BpeModel
    vocab: Vocab

    def encode(self, sentence: str) -> list:
        return encode(self.bpe, self.vocab, sentence)

    def decode(self, ids: Sequence[int]) -> str:
        return decode(self.vocab, ids)

    @classmethod
    def train(cls, corpus: Sequence[str], num_merges: int = 500) -> "Tokenizer":
        bpe = learn_bpe(corpus, num_merges)
        return cls(bpe, Vocab.build(bpe, corpus))


def encode(model: BpeModel, vocab: Vocab, sentence: str) -> list:
    out = []
    for word in sentence.split():
        for sym in model.segment_word(word):
            if sym in vocab.stoi:
                out.append(vocab.stoi[sym])
            else:
                # fall back to characters so a single unseen character costs one UNK
                chars = list(sym[:-len(EOW)]) if sym.endswith(EOW) else list(sym)
                if sym.endswith(EOW):
                    chars[-1] = chars[-1] + EOW
                out.extend(vocab.stoi.get(c, UNK) for c in chars)
    return out


def decode(vocab: Vocab, ids: Sequence[int]) -> str:
    """Join subwords back into words, dropping PAD/BOS/EOS."""
    pieces = []
    for i in ids:
        i = int(i)
        if i in (PAD, BOS, EOS):
            continue
        tok = vocab.itos[i] if 0 <= i < len(vocab) else SPECIALS[UNK]
        if i in (UNK, BRK):
            tok = tok + EOW
        pieces.append(tok)
    return "".join(pieces).replace(EOW, " ").strip()


# -- documents -----------------------------------------------------------------


@dataclass
class Document:
    doc_id: int
    pairs: list  # list of (source str, target str)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list:
        return [t for _, t in self.pairs]


def parse_document_corpus(text: str, name: str = "<corpus>") -> list:
    lines = text.split("\n")
    while lines and not lines[-1].strip():
        lines.pop()
    docs: list[Document] = []
    current: list = []
    prev_blank = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            if prev_blank or not current:
                raise CorpusFormatError(f"{name}:{lineno}: documents must be separated by exactly one blank line")
            docs.append(Document(len(docs), current))
            current = []
            prev_blank = True
            continue
        prev_blank = False
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusFormatError(
                f"{name}:{lineno}: expected 'source<TAB>target', found {len(parts) - 1} tab(s)"
            )
        current.append((" ".join(parts[0].split()), " ".join(parts[1].split())))
    if current:
        docs.append(Document(len(docs), current))
    return docs


def load_document_corpus(path, fmt: str = "tsv-doc") -> list:
    """Read a corpus file: ``src<TAB>tgt`` per line, one blank line between documents."""
    if fmt != "tsv-doc":
        raise CorpusFormatError(f"unsupported corpus format {fmt!r}")
    return parse_document_corpus(Path(path).read_text(encoding="utf-8"), str(path))


def format_document_corpus(docs: Sequence[Document]) -> str:
    return "\n\n".join("\n".join(f"{s}\t{t}" for s, t in d.pairs) for d in docs) + "\n"


def save_document_corpus(docs: Sequence[Document], path) -> None:
    Path(path).write_text(format_document_corpus(docs), encoding="utf-8")


def corpus_stats(docs: Sequence[Document]) -> dict:
    return {"documents": len(docs), "sentences": sum(len(d) for d in docs)}


# -- context triples -----------------------------------------------------------


class ContextMode(str, enum.Enum):
    CONTEXT = "context"
    RANDOM = "random"
    FIXED = "fixed"
    NONE = "none"


EMPTY_CONTEXT = (BOS, EOS)


@dataclass
class RandomContextPolicy:
    """Length range for sampled contexts and when to resample them.

    ``resample`` is one of ``"epoch"``, ``"step"`` or ``"frozen"``.
    """

    min_len: int = 5
    max_len: int = 30
    resample: str = "epoch"

    def __post_init__(self):
        if not 1 <= self.min_len <= self.max_len:
            raise PipelineInputError(f"bad random-context length range [{self.min_len}, {self.max_len}]")
        if self.resample not in ("epoch", "step", "frozen"):
            raise PipelineInputError(f"unknown resample policy {self.resample!r}")


@dataclass
class ContextTriple:
    context: list
    source: list
    target: list
    mode: ContextMode
    doc_id: int
    index: int


def sample_random_context(vocab: Vocab, rng: RngStream, policy: RandomContextPolicy) -> list:
    regular = vocab.regular_ids()
    if regular.size == 0:
        raise PipelineInputError("Random context needs at least one non-reserved source token")
    n = int(rng.integers(policy.min_len, policy.max_len + 1))
    return [int(i) for i in regular[rng.integers(0, regular.size, size=n)]]


def make_context_triples(
    docs: Sequence[Document],
    mode,
    src_tok: Tokenizer,
    tgt_tok: Tokenizer,
    rng: RngStream | None = None,
    policy: RandomContextPolicy | None = None,
    fixed_context: Sequence[int] | None = None,
) -> list:
    """One triple per sentence pair, with the context chosen by ``mode``.

    Context uses the previous source sentence of the same document and
    ``[BOS, EOS]`` for a document's first sentence.  Random draws fresh
    tokens for every triple.  Fixed reuses one sequence for all triples:
    ``fixed_context`` if given, otherwise a single Random draw.
    """
    mode = ContextMode(mode)
    policy = policy or RandomContextPolicy()
    if mode in (ContextMode.RANDOM, ContextMode.FIXED) and fixed_context is None:
        if rng is None:
            raise PipelineInputError(f"{mode.value} contexts need an RngStream")
        if len(src_tok.vocab.regular_ids()) == 0:
            raise PipelineInputError("Random context needs at least one non-reserved source token")
    if mode is ContextMode.FIXED:
        fixed = list(fixed_context) if fixed_context is not None else sample_random_context(src_tok.vocab, rng, policy)
    triples = []
    for doc in docs:
        src_ids = [src_tok.encode(s) for s in doc.sources]
        for i, (sid, tgt) in enumerate(zip(src_ids, doc.targets)):
            if mode is ContextMode.CONTEXT:
                ctx = list(src_ids[i - 1]) if i > 0 else list(EMPTY_CONTEXT)
            elif mode is ContextMode.RANDOM:
                ctx = sample_random_context(src_tok.vocab, rng, policy)
            elif mode is ContextMode.FIXED:
                ctx = list(fixed)
            else:
                ctx = []
            triples.append(ContextTriple(ctx, sid, tgt_tok.encode(tgt), mode, doc.doc_id, i))
    return triples


def resample_random_contexts(triples: Sequence[ContextTriple], vocab: Vocab, rng: RngStream, policy: RandomContextPolicy) -> None:
    for t in triples:
        if t.mode is ContextMode.RANDOM:
            t.context = sample_random_context(vocab, rng, policy)


def build_concatenated_input(triple: ContextTriple, vocab: Vocab | None = None) -> list:
    """Single-encoder input: ``context + [BRK] + source``."""
    if vocab is not None and SPECIALS[BRK] not in vocab:
        raise PipelineInputError("vocabulary lacks the BRK symbol")
    return list(triple.context) + [BRK] + list(triple.source)


# -- batching ------------------------------------------------------------------


@dataclass
class Batch:
    triples: list
    src: np.ndarray
    ctx: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    def __len__(self) -> int:
        return len(self.triples)

    @property
    def num_target_tokens(self) -> int:
        return int((self.tgt_out != PAD).sum())


def pad_ids(seqs: Sequence[Sequence[int]], min_len: int = 1) -> np.ndarray:
    width = max([len(s) for s in seqs] + [min_len])
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def collate(triples: Sequence[ContextTriple], concat_context: bool = False) -> Batch:
    srcs = [build_concatenated_input(t) if concat_context else t.source for t in triples]
    return Batch(
        list(triples),
        pad_ids(srcs),
        pad_ids([t.context for t in triples]),
        pad_ids([[BOS] + list(t.target) for t in triples]),
        pad_ids([list(t.target) + [EOS] for t in triples]),
    )


def _example_len(t: ContextTriple, concat_context: bool) -> int:
    src = len(t.context) + 1 + len(t.source) if concat_context else len(t.source)
    return max(src, len(t.target) + 1)


def make_batches(
    triples: Sequence[ContextTriple],
    max_tokens: int,
    rng: RngStream | None = None,
    concat_context: bool = False,
) -> list:
    """Group triples into length-sorted, padded batches of at most ``max_tokens``.

    The budget counts padded tokens (``batch_size * longest``).  With an
    ``rng`` the grouping and the batch order are shuffled reproducibly.
    """
    lengths = [_example_len(t, concat_context) for t in triples]
    for t, n in zip(triples, lengths):
        if n > max_tokens:
            raise PipelineInputError(
                f"sentence {t.index} of document {t.doc_id} has {n} tokens, more than max_tokens={max_tokens}"
            )
    order = np.arange(len(triples)) if rng is None else rng.permutation(len(triples))
    order = sorted(order, key=lambda i: lengths[i])
    groups, cur, longest = [], [], 0
    for i in order:
        n = lengths[i]
        if cur and max(longest, n) * (len(cur) + 1) > max_tokens:
            groups.append(cur)
            cur, longest = [], 0
        cur.append(i)
        longest = max(longest, n)
    if cur:
        groups.append(cur)
    if rng is not None:
        groups = [groups[j] for j in rng.permutation(len(groups))]
    return [collate([triples[i] for i in g], concat_context) for g in groups]
