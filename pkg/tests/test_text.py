import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxnmt.rng import RngStream
from ctxnmt.synth import SynthTaskSpec, generate_corpus
from ctxnmt.text import (
    BOS,
    BRK,
    EOS,
    EOW,
    PAD,
    SPECIALS,
    UNK,
    BpeModel,
    ContextMode,
    ContextTriple,
    CorpusFormatError,
    Document,
    PipelineInputError,
    RandomContextPolicy,
    Tokenizer,
    Vocab,
    build_concatenated_input,
    corpus_stats,
    decode,
    encode,
    learn_bpe,
    load_document_corpus,
    make_batches,
    make_context_triples,
    parse_document_corpus,
)

SENTS = ["low low lower lowest", "newer wider lower", "the lowest newest"]


def brute_force_top_pair(corpus):
    counts = collections.Counter()
    for s in corpus:
        for w in s.split():
            syms = list(w[:-1]) + [w[-1] + EOW]
            for i in range(len(syms) - 1):
                counts[syms[i], syms[i + 1]] += 1
    top = max(counts.values())
    return sorted(p for p, c in counts.items() if c == top)[0]


class TestBpe:
    def test_zero_merges_is_character_level(self):
        bpe = learn_bpe(["low lower"], 0)
        assert bpe.segment("lower") == ["l", "o", "w", "e", "r" + EOW]

    def test_first_merge_matches_pair_count_oracle(self):
        corpus = ["low low lower lowest"]
        assert learn_bpe(corpus, 1).merges[0] == brute_force_top_pair(corpus) == ("l", "o")

    @pytest.mark.parametrize("corpus", [SENTS, ["a b a b c", "abc abc"], ["zz zz zy yz"]])
    def test_first_merge_oracle_other_corpora(self, corpus):
        assert learn_bpe(corpus, 1).merges[0] == brute_force_top_pair(corpus)

    def test_deterministic(self):
        assert learn_bpe(SENTS, 20).merges == learn_bpe(SENTS, 20).merges

    def test_empty_corpus(self):
        with pytest.raises(PipelineInputError):
            learn_bpe([], 10)
        with pytest.raises(PipelineInputError):
            learn_bpe(["   "], 10)

    def test_file_roundtrip(self, tmp_path):
        bpe = learn_bpe(SENTS, 15)
        bpe.save(tmp_path / "m.bpe")
        text = (tmp_path / "m.bpe").read_text()
        assert text.splitlines()[0] == f"bpe-merges {bpe.num_merges}"
        assert BpeModel.load(tmp_path / "m.bpe").merges == bpe.merges

    def test_bad_header(self, tmp_path):
        (tmp_path / "bad").write_text("merges 1\na b\n")
        with pytest.raises(CorpusFormatError):
            BpeModel.load(tmp_path / "bad")


class TestEncode:
    def setup_method(self):
        self.tok = Tokenizer.train(SENTS, 30)

    def test_empty(self):
        assert self.tok.encode("") == []

    def test_roundtrip_training_sentences(self):
        for s in SENTS:
            assert self.tok.decode(self.tok.encode(s)) == s

    def test_unseen_character_gives_unk(self):
        alphabet = {c for s in SENTS for c in s if c != " "}
        unseen = next(c for c in "qxjzkv" if c not in alphabet)
        ids = self.tok.encode(f"low l{unseen}w")
        assert UNK in ids

    def test_reserved_ids(self):
        v = self.tok.vocab
        assert v.itos[:5] == list(SPECIALS)
        assert (PAD, BOS, EOS, UNK, BRK) == (0, 1, 2, 3, 4)
        assert len(set(v.itos)) == len(v)

    def test_vocab_file_roundtrip(self, tmp_path):
        self.tok.vocab.save(tmp_path / "v")
        assert Vocab.load(tmp_path / "v").itos == self.tok.vocab.itos

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.text(alphabet="lowernsdtih", min_size=1, max_size=9), min_size=0, max_size=8))
    def test_roundtrip_over_training_alphabet(self, words):
        s = " ".join(words)
        assert decode(self.tok.vocab, encode(self.tok.bpe, self.tok.vocab, s)) == s


CORPUS = "a b\tA B\nc\tC\nd e f\tD E F\n\ng\tG\nh i\tH I\n"


class TestCorpus:
    def test_two_documents(self):
        docs = parse_document_corpus(CORPUS)
        assert [len(d) for d in docs] == [3, 2]
        assert corpus_stats(docs) == {"documents": 2, "sentences": 5}
        assert docs[0].pairs[1] == ("c", "C")

    def test_trailing_blank_lines(self):
        a = parse_document_corpus(CORPUS)
        b = parse_document_corpus(CORPUS + "\n\n\n")
        assert [d.pairs for d in a] == [d.pairs for d in b]

    def test_missing_tab_reports_line(self):
        with pytest.raises(CorpusFormatError, match=":2:"):
            parse_document_corpus("a\tA\nb B\n")

    def test_double_blank_line(self):
        with pytest.raises(CorpusFormatError, match=":3:"):
            parse_document_corpus("a\tA\n\n\nb\tB\n")

    def test_generated_corpus_counts(self, tmp_path):
        spec = SynthTaskSpec(task="lexical", documents=100, sentences_per_doc=4, valid_documents=3, test_documents=3)
        paths = generate_corpus(spec, tmp_path)
        docs = load_document_corpus(paths["train"])
        assert corpus_stats(docs) == {"documents": 100, "sentences": 400}


def _docs():
    return [
        Document(0, [("a b", "x y"), ("c d e", "z w v"), ("b a", "y x")]),
        Document(1, [("e e", "v v"), ("d", "w")]),
    ]


@pytest.fixture
def toks():
    docs = _docs()
    src = Tokenizer.train([s for d in docs for s in d.sources], 0)
    tgt = Tokenizer.train([t for d in docs for t in d.targets], 0)
    return src, tgt


class TestTriples:
    def test_context_is_previous_source(self, toks):
        src, tgt = toks
        docs = _docs()
        tr = make_context_triples(docs, "context", src, tgt)
        assert len(tr) == 5
        assert tr[1].context == src.encode("a b")
        assert tr[2].context == src.encode("c d e")
        assert tr[0].context == [BOS, EOS]
        assert tr[3].context == [BOS, EOS]  # no leakage across documents
        for t in tr:
            if t.index > 0:
                assert t.context == src.encode(docs[t.doc_id].sources[t.index - 1])

    def test_fixed_shares_one_context(self, toks):
        tr = make_context_triples(_docs(), "fixed", *toks, rng=RngStream(3))
        assert all(t.context == tr[0].context for t in tr)
        assert all(t.mode is ContextMode.FIXED for t in tr)

    def test_random_membership_length_and_replay(self, toks):
        src, tgt = toks
        policy = RandomContextPolicy(5, 30)
        a = make_context_triples(_docs(), "random", src, tgt, RngStream(7), policy)
        b = make_context_triples(_docs(), "random", src, tgt, RngStream(7), policy)
        regular = set(range(len(SPECIALS), len(src.vocab)))
        for t in a:
            assert 5 <= len(t.context) <= 30
            assert set(t.context) <= regular
        assert [t.context for t in a] == [t.context for t in b]

    def test_random_needs_regular_tokens(self, toks):
        _, tgt = toks
        empty = Tokenizer(BpeModel([]), Vocab())
        with pytest.raises(PipelineInputError):
            make_context_triples([Document(0, [("", "x")])], "random", empty, tgt, RngStream(1))

    def test_concatenated_input(self):
        t = ContextTriple([10, 11], [12], [], ContextMode.CONTEXT, 0, 1)
        assert build_concatenated_input(t) == [10, 11, BRK, 12]
        t.context = []
        assert build_concatenated_input(t) == [BRK, 12]

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(5, 50), max_size=10), st.lists(st.integers(5, 50), max_size=10))
    def test_concatenated_length(self, ctx, src):
        t = ContextTriple(ctx, src, [], ContextMode.CONTEXT, 0, 0)
        assert len(build_concatenated_input(t)) == len(ctx) + 1 + len(src)


def _triple(n_src, n_tgt, i=0):
    return ContextTriple([5], list(range(5, 5 + n_src)), list(range(5, 5 + n_tgt)), ContextMode.CONTEXT, 0, i)


class TestBatches:
    def test_single(self):
        bs = make_batches([_triple(3, 3)], 64, RngStream(1))
        assert len(bs) == 1 and len(bs[0]) == 1

    def test_equal_lengths_need_no_padding(self):
        bs = make_batches([_triple(4, 4, i) for i in range(20)], 40, RngStream(1))
        for b in bs:
            assert (b.src == PAD).sum() == 0
            assert b.src.size <= 40

    def test_preserves_multiset(self):
        rng = np.random.default_rng(0)
        triples = [_triple(int(rng.integers(1, 40)), int(rng.integers(1, 40)), i) for i in range(1000)]
        bs = make_batches(triples, 256, RngStream(2))
        seen = sorted(t.index for b in bs for t in b.triples)
        assert seen == list(range(1000))
        for b in bs:
            assert b.src.size <= 256
            for row, t in zip(b.src, b.triples):
                assert list(row[: len(t.source)]) == t.source  # nothing truncated

    def test_shuffle_is_seeded(self):
        triples = [_triple(i % 7 + 1, 3, i) for i in range(100)]
        a = [[t.index for t in b.triples] for b in make_batches(triples, 32, RngStream(5))]
        b = [[t.index for t in b.triples] for b in make_batches(triples, 32, RngStream(5))]
        assert a == b

    def test_too_long(self):
        with pytest.raises(PipelineInputError, match="sentence 3 of document 0"):
            make_batches([_triple(50, 2, 3)], 16)
