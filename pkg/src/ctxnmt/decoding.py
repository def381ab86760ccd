"""Beam/greedy decoding under Aware and Agnostic schemas, and corpus BLEU."""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .integration import ContextAwareTransformer
from .model import Memory, Representation
from .tensor import ParameterError, Tensor, log_softmax_np, no_grad
from .text import BOS, EOS, ContextTriple, Tokenizer, build_concatenated_input, pad_ids


class EvaluationInputError(ValueError):
    pass


@dataclass
class DecodeConfig:
    schema: str = "aware"
    beam: int = 4
    alpha: float = 0.6
    max_len_a: float = 2.0
    max_len_b: int = 10

    def __post_init__(self):
        if self.schema not in ("aware", "agnostic"):
            raise ParameterError(f"schema must be 'aware' or 'agnostic', got {self.schema!r}")
        if self.beam < 1:
            raise ParameterError(f"beam size must be >= 1, got {self.beam}")
        if self.alpha < 0:
            raise ParameterError(f"length penalty alpha must be >= 0, got {self.alpha}")

    def max_len(self, src_len: int) -> int:
        return int(self.max_len_a * src_len + self.max_len_b)


def length_penalty(length: int, alpha: float) -> float:
    """GNMT penalty ``((5 + length) / 6) ** alpha``."""
    return ((5.0 + length) / 6.0) ** alpha


# -- search --------------------------------------------------------------------

StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def beam_search(step: StepFn, num_sentences: int, max_lens: Sequence[int], beam: int, alpha: float,
                bos: int = BOS, eos: int = EOS) -> list:
    """Length-normalised beam search.

    ``step(prefixes, rows)`` returns next-token log-probabilities of shape
    ``(len(rows), vocab)`` for the prefixes ``(len(rows), t)`` belonging to
    sentences ``rows``.  Each sentence keeps ``beam`` live hypotheses and is
    done once ``beam`` hypotheses have emitted EOS; at its length limit the
    live ones are closed without EOS.  Returned sequences exclude BOS/EOS.
    """
    if beam < 1:
        raise ParameterError(f"beam size must be >= 1, got {beam}")
    live = [[((bos,), 0.0)] for _ in range(num_sentences)]
    finished: list[list] = [[] for _ in range(num_sentences)]
    active = list(range(num_sentences))
    t = 0
    while active:
        rows, prefixes = [], []
        for s in active:
            for toks, _ in live[s]:
                rows.append(s)
                prefixes.append(toks)
        lp = step(np.array(prefixes, dtype=np.int64), np.array(rows, dtype=np.int64))
        t += 1
        still = []
        r = 0
        for s in active:
            hyps = live[s]
            n = len(hyps)
            scores = np.array([h[1] for h in hyps])[:, None] + lp[r : r + n]
            r += n
            flat = scores.reshape(-1)
            k = min(2 * beam, flat.size)
            top = np.argpartition(-flat, k - 1)[:k]
            top = top[np.lexsort((top, -flat[top]))]
            V = scores.shape[1]
            new_live = []
            for idx in top:
                h, tok = divmod(int(idx), V)
                score = float(flat[idx])
                seq = hyps[h][0]
                if tok == eos:
                    finished[s].append((score / length_penalty(t, alpha), seq[1:]))
                    if len(finished[s]) >= beam:
                        break
                else:
                    new_live.append((seq + (tok,), score))
                    if len(new_live) >= beam:
                        break
            live[s] = new_live
            if len(finished[s]) >= beam or not new_live:
                continue
            if t >= max_lens[s]:
                for seq, score in new_live:
                    finished[s].append((score / length_penalty(t, alpha), seq[1:]))
                continue
            still.append(s)
        active = still
    out = []
    for s in range(num_sentences):
        best = max(finished[s], key=lambda x: x[0])
        out.append(list(best[1]))
    return out


def greedy_search(step: StepFn, num_sentences: int, max_lens: Sequence[int], bos: int = BOS, eos: int = EOS) -> list:
    seqs = [[bos] for _ in range(num_sentences)]
    done = [False] * num_sentences
    while True:
        rows = [s for s in range(num_sentences) if not done[s]]
        if not rows:
            break
        lp = step(np.array([seqs[s] for s in rows], dtype=np.int64), np.array(rows, dtype=np.int64))
        for i, s in enumerate(rows):
            tok = int(np.argmax(lp[i]))
            if tok == eos:
                done[s] = True
                continue
            seqs[s].append(tok)
            if len(seqs[s]) - 1 >= max_lens[s]:
                done[s] = True
    return [s[1:] for s in seqs]


# -- model decoding ------------------------------------------------------------


def _select(rep: Optional[Representation], rows: np.ndarray) -> Optional[Representation]:
    if rep is None:
        return None
    return Representation(Tensor(rep.h.data[rows], dtype=rep.h.dtype), rep.keep[rows])


def _source_ids(model: ContextAwareTransformer, triple: ContextTriple) -> list:
    return build_concatenated_input(triple) if model.cfg.integration == "single" else list(triple.source)


def model_step_fn(model: ContextAwareTransformer, triples: Sequence[ContextTriple], schema: str) -> StepFn:
    """Encode the batch once and return a step function over decoder prefixes."""
    src = pad_ids([_source_ids(model, t) for t in triples])
    ctx = None
    if model.cfg.multi_encoder and schema == "aware":
        if any(not t.context for t in triples):
            raise EvaluationInputError("aware decoding of a multi-encoder model needs a context for every triple")
        ctx = pad_ids([t.context for t in triples])
    with no_grad():
        memory, inside = model.memory(src, ctx, training=False, schema=schema)

    def step(prefixes: np.ndarray, rows: np.ndarray) -> np.ndarray:
        mem = Memory(_select(memory.source, rows), _select(memory.context, rows))
        with no_grad():
            logits = model.decoder_forward(prefixes, mem, training=False, inside=inside)
        return log_softmax_np(logits.data[:, -1, :].astype(np.float64))

    return step


def translate(model: ContextAwareTransformer, triples: Sequence[ContextTriple], cfg: DecodeConfig,
              chunk: int = 64, greedy: bool = False) -> list:
    """Decode every triple; returns target id lists without BOS/EOS."""
    out = []
    for i in range(0, len(triples), chunk):
        part = list(triples[i : i + chunk])
        step = model_step_fn(model, part, cfg.schema)
        max_lens = [cfg.max_len(len(t.source)) for t in part]
        if greedy:
            out.extend(greedy_search(step, len(part), max_lens))
        else:
            out.extend(beam_search(step, len(part), max_lens, cfg.beam, cfg.alpha))
    return out


def decode(model: ContextAwareTransformer, triple: ContextTriple, cfg: DecodeConfig) -> list:
    return translate(model, [triple], cfg)[0]


# -- BLEU ----------------------------------------------------------------------


@dataclass
class BleuReport:
    bleu: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return f"BLEU = {self.bleu:.2f} {ps} (BP={self.brevity_penalty:.3f}, hyp_len={self.hyp_len}, ref_len={self.ref_len})"


def _ngrams(tokens: Sequence[str], n: int) -> collections.Counter:
    return collections.Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4,
                smooth: bool = False) -> BleuReport:
    """Corpus BLEU (percent) with one reference per hypothesis.

    Modified n-gram matches and totals are summed over the corpus before
    taking precisions.  Any zero precision gives BLEU 0 unless ``smooth``,
    which adds one to the numerator and denominator of orders 2 and up.
    Orders with no hypothesis n-grams at all are left out of the mean.
    """
    if len(hypotheses) != len(references):
        raise EvaluationInputError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise EvaluationInputError("cannot score an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = []
    for n in range(max_n):
        m, d = matches[n], totals[n]
        if smooth and n > 0:
            m, d = m + 1, d + 1
        precisions.append(m / d if d else 0.0)
    orders = [n for n in range(max_n) if totals[n] > 0 or (smooth and n > 0)]
    c = max(hyp_len, 1)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / c)
    if not orders or any(precisions[n] == 0 for n in orders):
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(precisions[n]) for n in orders) / len(orders))
    return BleuReport(min(score, 100.0), precisions, bp, hyp_len, ref_len)


def bleu_tokens(text: str) -> list:
    """Lower-cased whitespace tokens (BPE markers are already gone after decoding)."""
    return text.lower().split()


@dataclass
class Evaluation:
    report: BleuReport
    hypotheses: list  # detokenized strings
    references: list


def evaluate(model: ContextAwareTransformer, triples: Sequence[ContextTriple], tgt_tok: Tokenizer,
             cfg: DecodeConfig, references: Optional[Sequence[str]] = None, greedy: bool = False) -> Evaluation:
    """Decode ``triples`` and score the detokenized output against their targets."""
    hyps = [tgt_tok.decode(ids) for ids in translate(model, triples, cfg, greedy=greedy)]
    refs = list(references) if references is not None else [tgt_tok.decode(t.target) for t in triples]
    report = corpus_bleu([bleu_tokens(h) for h in hyps], [bleu_tokens(r) for r in refs])
    return Evaluation(report, hyps, refs)


def write_hypotheses(hyps: Sequence[str], path) -> None:
    Path(path).write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
