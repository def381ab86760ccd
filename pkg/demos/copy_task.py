"""Train a small translator on the copy task and decode a few test sentences.

Run with ``python demos/copy_task.py``; takes a minute or two on one core.
"""
import time

from ctxnmt import DecodeConfig, ModelConfig, TrainConfig, evaluate, train_stage1
from ctxnmt.synth import SynthTaskSpec, generate
from ctxnmt.text import Tokenizer, make_context_triples

corpus = generate(SynthTaskSpec(task="copy", documents=300, valid_documents=30, test_documents=30))
src_tok = Tokenizer.train([s for d in corpus.train for s in d.sources], 300)
tgt_tok = Tokenizer.train([t for d in corpus.train for t in d.targets], 300)
train = make_context_triples(corpus.train, "none", src_tok, tgt_tok)
valid = make_context_triples(corpus.valid, "none", src_tok, tgt_tok)
test = make_context_triples(corpus.test, "none", src_tok, tgt_tok)
print(f"{len(train)} training pairs, source vocabulary {len(src_tok.vocab)}")

mcfg = ModelConfig(src_vocab_size=len(src_tok.vocab), tgt_vocab_size=len(tgt_tok.vocab))
start = time.perf_counter()
res = train_stage1(train, valid, mcfg, TrainConfig(max_steps=800, valid_every=200), log_sink=print)
print(f"trained {res.steps} steps in {time.perf_counter() - start:.0f}s")

ev = evaluate(res.model, test, tgt_tok, DecodeConfig(beam=4))
print(ev.report)
for src, hyp in list(zip([s for d in corpus.test for s in d.sources], ev.hypotheses))[:5]:
    print(f"  {src:40s} -> {hyp}")
