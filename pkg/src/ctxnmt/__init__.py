"""Toy context-aware neural machine translation on a small numpy autograd engine."""

from .decoding import DecodeConfig, corpus_bleu, evaluate, translate
from .experiment import ExperimentConfig, ExperimentReport, emit_report, run_grid
from .integration import ContextAwareTransformer, compose_modes, saturate_gates
from .model import Checkpoint, ModelConfig
from .rng import RngStream
from .synth import SynthTaskSpec, generate_corpus
from .text import Tokenizer, learn_bpe, load_document_corpus, make_context_triples
from .training import TrainConfig, lr_at, train_stage1, train_stage2

__version__ = "0.1.0"
