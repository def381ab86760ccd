"""Does a context encoder help, or does it act like a noise source?

Trains a sentence-level model, fine-tunes Outside-integration models fed the
true previous sentence, random tokens or one fixed sentence, and a model
trained with Gaussian noise on the encoder output.  Each model is decoded
with the context path on (aware) and bypassed (agnostic).

Run with ``python demos/context_as_noise.py [work_dir]``.  The defaults are
sized for a few minutes; raise ``documents`` and ``steps`` for real numbers.
"""
import sys

from ctxnmt.experiment import ExperimentConfig, format_report, run_grid

work = sys.argv[1] if len(sys.argv) > 1 else "demo-runs/noise"
cfg = ExperimentConfig(
    task="lexical", vocab_size=300, documents=400, valid_documents=30, test_documents=50,
    bpe_merges=300, steps=600, finetune_steps=300, valid_every=100,
    mode=("none", "outside"), context=("context", "random", "fixed"), sigma=(0.0, 0.3), seeds=(1,),
    work_dir=work, corpus_dir=f"{work}/corpus",
)
report = run_grid(cfg)
print(format_report(report, "table4"))
print(format_report(report, "table5"))
