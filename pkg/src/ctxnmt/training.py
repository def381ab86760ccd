"""Adam with the inverse-square-root schedule, and two-stage training."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .integration import ContextAwareTransformer
from .model import Checkpoint, ConfigurationError, ModelConfig
from .rng import RngStream
from .tensor import ParameterError, Tape, no_grad
from .text import RandomContextPolicy, collate, make_batches, resample_random_contexts

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def lr_at(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """``scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise ParameterError(f"learning-rate step must be >= 1, got {step}")
    if warmup < 1:
        raise ParameterError(f"warmup must be >= 1, got {warmup}")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float):
    """One bias-corrected Adam update, in place on the ``params`` arrays.

    Parameters without a gradient keep their value and moments.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        f = max_norm / (total + 1e-6)
        for g in grads.values():
            if g is not None:
                g *= f
    return total


@dataclass
class TrainConfig:
    stage: str = "sentence"
    max_steps: int = 4000
    max_epochs: int = 1000
    warmup: int = 400
    lr_scale: float = 1.0
    max_tokens: int = 1024
    dropout: Optional[float] = None
    sigma: Optional[float] = None
    context_mode: str = "context"
    random_resample: str = "epoch"
    freeze_stage1: bool = False
    seed: int = 1
    valid_every: int = 200
    patience: int = 5
    clip_norm: float = 5.0
    log_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    # the schedule runs at ``schedule_offset + step``; stage 2 defaults to the parent's step count
    schedule_offset: Optional[int] = None

    def __post_init__(self):
        if self.stage not in ("sentence", "finetune"):
            raise ConfigurationError(f"unknown training stage {self.stage!r}")
        if self.warmup < 1:
            raise ConfigurationError("warmup must be >= 1")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: ContextAwareTransformer
    log: list
    best_valid_loss: float
    steps: int
    wall_time: float


def format_log_record(step: int, lr: float, train_loss: float, valid_loss=None, valid_bleu=None) -> str:
    rec = f"step={step} lr={lr:.9g} train_loss={train_loss:.6f}"
    if valid_loss is not None:
        rec += f" valid_loss={valid_loss:.6f}"
    if valid_bleu is not None:
        rec += f" valid_bleu={valid_bleu:.4f}"
    return rec


def validation_loss(model: ContextAwareTransformer, batches) -> float:
    """Token-weighted mean loss with dropout and noise off."""
    total, count = 0.0, 0
    with no_grad():
        for b in batches:
            n = b.num_target_tokens
            total += float(model.batch_loss(b, training=False).item()) * n
            count += n
    return total / max(count, 1)


def _snapshot(params: dict) -> dict:
    return {n: p.data.copy() for n, p in params.items()}


def fit(
    model: ContextAwareTransformer,
    train_triples: Sequence,
    valid_triples: Sequence,
    cfg: TrainConfig,
    trainable: Optional[dict] = None,
    log_sink: Optional[Callable[[str], None]] = None,
    src_vocab=None,
    policy: Optional[RandomContextPolicy] = None,
) -> TrainResult:
    """Train ``model`` in place, keeping the parameters with the best validation loss."""
    start = time.perf_counter()
    params = model.parameters()
    trainable = params if trainable is None else trainable
    concat = model.cfg.integration == "single"
    rng = RngStream(cfg.seed)
    batch_rng = rng.child("batches")
    ctx_rng = rng.child("random-context")
    policy = policy or RandomContextPolicy(resample=cfg.random_resample)
    resampling = src_vocab is not None and any(t.mode.value == "random" for t in train_triples)
    model.reseed(cfg.seed)
    state = OptimizerState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    offset = cfg.schedule_offset or 0
    valid_batches = make_batches(valid_triples, cfg.max_tokens, None, concat) if valid_triples else []
    log: list[str] = []

    def emit(rec: str) -> None:
        log.append(rec)
        if log_sink is not None:
            log_sink(rec)

    best_loss = validation_loss(model, valid_batches) if valid_batches else math.inf
    best = _snapshot(params)
    emit(format_log_record(0, 0.0, float("nan"), best_loss if valid_batches else None))
    bad = 0
    step = 0
    running = []
    stop = False
    for epoch in range(cfg.max_epochs):
        if resampling and policy.resample == "epoch" and epoch > 0:
            resample_random_contexts(train_triples, src_vocab, ctx_rng, policy)
        for batch in make_batches(train_triples, cfg.max_tokens, batch_rng, concat):
            if resampling and policy.resample == "step":
                resample_random_contexts(batch.triples, src_vocab, ctx_rng, policy)
                batch = collate(batch.triples, concat)
            step += 1
            lr = lr_at(offset + step, model.cfg.d_model, cfg.warmup, cfg.lr_scale)
            for p in trainable.values():
                p.grad = None
            with Tape() as tape:
                loss = model.batch_loss(batch, training=True)
                loss_value = float(loss.item())
                if not math.isfinite(loss_value):
                    raise TrainingError(f"loss became non-finite at step {step}")
                tape.backward(loss)
            grads = {n: p.grad for n, p in trainable.items()}
            clip_grad_norm(grads, cfg.clip_norm)
            adam_step({n: p.data for n, p in trainable.items()}, grads, state, lr)
            running.append(loss_value)
            validate = bool(valid_batches) and step % cfg.valid_every == 0
            if validate:
                vloss = validation_loss(model, valid_batches)
                emit(format_log_record(step, lr, float(np.mean(running)), vloss))
                running = []
                if vloss < best_loss:
                    best_loss, best, bad = vloss, _snapshot(params), 0
                else:
                    bad += 1
                    if bad >= cfg.patience:
                        stop = True
            elif step % cfg.log_every == 0:
                emit(format_log_record(step, lr, float(np.mean(running))))
                running = []
            if stop or step >= cfg.max_steps:
                stop = True
                break
        if stop:
            break
    if valid_batches and step % cfg.valid_every:
        # the last updates have not been validated yet
        vloss = validation_loss(model, valid_batches)
        lr = lr_at(offset + step, model.cfg.d_model, cfg.warmup, cfg.lr_scale)
        emit(format_log_record(step, lr, float(np.mean(running or [math.nan])), vloss))
        if vloss < best_loss:
            best_loss, best = vloss, _snapshot(params)
    if not valid_batches:
        best = _snapshot(params)
    model.load_params(best)
    ckpt = model.to_checkpoint(step)
    return TrainResult(ckpt, model, log, best_loss, step, time.perf_counter() - start)


def _apply_overrides(model_cfg: ModelConfig, cfg: TrainConfig, **changes) -> ModelConfig:
    if cfg.dropout is not None:
        changes["dropout"] = cfg.dropout
    if cfg.sigma is not None:
        changes["noise_sigma"] = cfg.sigma
    return model_cfg.replace(**changes)


def train_stage1(train_triples, valid_triples, model_cfg: ModelConfig, cfg: TrainConfig, log_sink=None, src_vocab=None) -> TrainResult:
    """Train a sentence-level model (``single`` keeps its concatenated input, all else runs as ``none``)."""
    if cfg.stage != "sentence":
        raise ConfigurationError("train_stage1 needs stage='sentence'")
    mode = "single" if model_cfg.integration == "single" else "none"
    mcfg = _apply_overrides(model_cfg, cfg, integration=mode)
    model = ContextAwareTransformer(mcfg, seed=cfg.seed)
    return fit(model, train_triples, valid_triples, cfg, log_sink=log_sink, src_vocab=src_vocab)


def _check_compatible(stage1: Checkpoint, model_cfg: ModelConfig) -> None:
    s1 = stage1.config
    for key in ("d_model", "num_heads", "d_ff", "encoder_layers", "decoder_layers",
                "src_vocab_size", "tgt_vocab_size", "tied_embeddings"):
        if getattr(s1, key) != getattr(model_cfg, key):
            raise ConfigurationError(
                f"stage-1 checkpoint {key}={getattr(s1, key)} does not match stage-2 config {getattr(model_cfg, key)}"
            )


def init_stage2(stage1: Checkpoint, model_cfg: ModelConfig, cfg: TrainConfig) -> ContextAwareTransformer:
    """Multi-encoder model whose sentence-level parameters equal ``stage1``'s exactly."""
    if model_cfg.integration not in ("outside", "inside"):
        raise ConfigurationError("stage 2 needs integration 'outside' or 'inside'")
    _check_compatible(stage1, model_cfg)
    mcfg = _apply_overrides(model_cfg, cfg)
    model = ContextAwareTransformer(mcfg, seed=cfg.seed)
    names = model.stage1_names()
    missing = [n for n in names if n not in stage1.params]
    if missing:
        raise ConfigurationError(f"stage-1 checkpoint lacks parameters {missing[:5]}")
    model.load_params(stage1.params, names)
    return model


def train_stage2(stage1: Checkpoint, train_triples, valid_triples, model_cfg: ModelConfig, cfg: TrainConfig, log_sink=None, src_vocab=None) -> TrainResult:
    """Fine-tune with a freshly initialised context path on top of ``stage1``."""
    if cfg.stage != "finetune":
        raise ConfigurationError("train_stage2 needs stage='finetune'")
    model = init_stage2(stage1, model_cfg, cfg)
    if cfg.schedule_offset is None:
        # continue the decay where stage 1 stopped instead of warming up again
        cfg = dataclasses.replace(cfg, schedule_offset=stage1.step)
    params = model.parameters()
    trainable = params
    if cfg.freeze_stage1:
        frozen = set(model.stage1_names())
        for n in frozen:
            params[n].requires_grad = False
        trainable = {n: p for n, p in params.items() if n not in frozen}
    return fit(model, train_triples, valid_triples, cfg, trainable, log_sink, src_vocab)


def continue_training(stage1: Checkpoint, train_triples, valid_triples, model_cfg: ModelConfig, cfg: TrainConfig,
                      log_sink=None, src_vocab=None) -> TrainResult:
    """Second stage without a context encoder: keep training ``stage1`` under ``model_cfg``.

    ``model_cfg`` may change dropout, noise or switch to concatenated input,
    but must have exactly the parent's parameters.
    """
    if cfg.stage != "finetune":
        raise ConfigurationError("continue_training needs stage='finetune'")
    if model_cfg.multi_encoder:
        raise ConfigurationError("multi-encoder models are fine-tuned with train_stage2")
    _check_compatible(stage1, model_cfg)
    model = ContextAwareTransformer(_apply_overrides(model_cfg, cfg), seed=cfg.seed)
    model.load_params(stage1.params)
    if cfg.schedule_offset is None:
        cfg = dataclasses.replace(cfg, schedule_offset=stage1.step)
    return fit(model, train_triples, valid_triples, cfg, log_sink=log_sink, src_vocab=src_vocab)


def setup_weight_sharing(model: ContextAwareTransformer, enabled: bool) -> ContextAwareTransformer:
    """Rebuild ``model`` with the first N-1 context blocks aliased to the source encoder (or not).

    Values are carried over by name; when sharing is turned on, the source
    encoder's values win for the aliased blocks.
    """
    cfg = model.cfg.replace(weight_sharing=bool(enabled))
    new = ContextAwareTransformer(cfg)
    values = {n: p.data for n, p in model.named_parameters()}
    params, aliases = new.parameter_table()
    new.load_params({n: values[n] for n in params if n in values}, strict=False)
    return new
