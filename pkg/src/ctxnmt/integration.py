"""Context encoder, Outside/Inside gated integration and encoder-output noise.

All integration parameters live under the ``ctx.`` name prefix, so the
stage-1 (sentence-level) parameter set is exactly the names without it.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .model import (
    Checkpoint,
    ConfigurationError,
    Encoder,
    EncoderLayer,
    Memory,
    Module,
    ModelConfig,
    MultiHeadAttention,
    Representation,
    Transformer,
    zeros,
)
from .rng import RngStream
from .tensor import Tensor


class Gate(Module):
    """``g = sigmoid([a; b] W + bias)``; returns ``g*a + (1-g)*b`` and ``g``.

    ``W`` starts at zero and the bias at ``bias_init`` so the initial gate
    is a constant leaning toward ``a``.
    """

    def __init__(self, d: int, bias_init: float):
        super().__init__()
        self.w = zeros(2 * d, d)
        self.b = Tensor(np.full(d, bias_init), requires_grad=True)
        object.__setattr__(self, "bias_override", None)

    def __call__(self, a: Tensor, b: Tensor):
        bias = self.b if self.bias_override is None else Tensor(np.full(self.b.shape, self.bias_override), dtype=a.dtype)
        g = T.sigmoid(T.linear(T.concat([a, b], axis=-1), self.w, bias))
        fused = g * a + (1.0 - g) * b
        return fused, g


@dataclass
class IntegrationOutput:
    attended: Optional[Tensor]
    gate: Tensor
    fused: Tensor


@dataclass
class NoiseConfig:
    sigma: float = 0.0
    injection_point: str = "encoder-output"
    training_only: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise T.ParameterError(f"noise sigma must be >= 0, got {self.sigma}")


def inject_noise(rep: Representation, cfg: NoiseConfig, training: bool, rng: RngStream) -> Representation:
    """Add ``N(0, sigma^2)`` noise to non-PAD encoder-output positions during training."""
    if not training or cfg.sigma == 0:
        return rep
    eps = T.gaussian_sample(rep.h.shape, cfg.sigma, rng).data * rep.keep[..., None]
    return Representation(rep.h + Tensor(eps, dtype=rep.h.dtype), rep.keep)


class InsideLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.gate = Gate(cfg.d_model, cfg.gate_bias_init)

    def __call__(self, query: Tensor, a_s: Tensor, memory: Memory) -> Tensor:
        if memory.context is None:
            return a_s
        a_c = self.attn(query, memory.context.h, memory.context.h, memory.context.attn_keep)
        fused, _ = self.gate(a_s, a_c)
        return fused


class InsideDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream):
        super().__init__()
        hooks = []
        for i, on in enumerate(cfg.inside_layer_mask()):
            layer = InsideLayer(cfg, rng) if on else None
            if layer is not None:
                self._children[f"layers.{i}"] = layer
            hooks.append(layer)
        object.__setattr__(self, "hooks", hooks)


class ContextIntegration(Module):
    """Parameters added on top of the sentence-level model for multi-encoder modes."""

    def __init__(self, cfg: ModelConfig, source_encoder: Encoder, rng: RngStream):
        super().__init__()
        n = cfg.context_encoder_layers
        shared = source_encoder.layers[: n - 1] if cfg.weight_sharing else []
        private = [EncoderLayer(cfg, rng) for _ in range(n - len(shared))]
        enc = Encoder(cfg, rng, num_layers=0)
        enc.layers = list(shared) + private
        self.encoder = enc
        object.__setattr__(self, "num_shared", len(shared))
        if cfg.integration == "outside":
            self.attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
            self.gate = Gate(cfg.d_model, cfg.gate_bias_init)
        else:
            self.decoder = InsideDecoder(cfg, rng)

    def gates(self) -> list:
        if hasattr(self, "gate"):
            return [self.gate]
        return [h.gate for h in self.decoder.hooks if h is not None]


def outside_integrate(integration: ContextIntegration, hs: Representation, hc: Representation) -> IntegrationOutput:
    """``H_s`` queries ``H_c``; the result is gated with ``H_s`` into the decoder memory."""
    if hs.h.shape[0] != hc.h.shape[0]:
        raise ConfigurationError(f"batch mismatch between source {hs.h.shape} and context {hc.h.shape}")
    if hs.h.shape[-1] != hc.h.shape[-1]:
        raise ConfigurationError(f"d_model mismatch between source {hs.h.shape} and context {hc.h.shape}")
    attended = integration.attn(hs.h, hc.h, hc.h, hc.attn_keep)
    fused, g = integration.gate(hs.h, attended)
    return IntegrationOutput(attended, g, fused)


def inside_cross_attention(layer: InsideLayer, query: Tensor, a_s: Tensor, hc: Representation) -> IntegrationOutput:
    """Gate the source cross-attention ``a_s`` with the context cross-attention for one decoder layer."""
    if query.shape[-1] != hc.h.shape[-1]:
        raise ConfigurationError(f"d_model mismatch between query {query.shape} and context {hc.h.shape}")
    a_c = layer.attn(query, hc.h, hc.h, hc.attn_keep)
    fused, g = layer.gate(a_s, a_c)
    return IntegrationOutput(a_c, g, fused)


# -- memory pipeline -----------------------------------------------------------


@dataclass(frozen=True)
class MemoryPipeline:
    """Ordered stages that turn (source, context) ids into the decoder's memory."""

    mode: str
    noise: NoiseConfig

    @property
    def stages(self) -> tuple:
        out = ["encode-source"]
        if self.noise.sigma > 0:
            out.append("noise")
        if self.mode == "outside":
            out += ["encode-context", "outside-integrate"]
        elif self.mode == "inside":
            out += ["encode-context", "inside-route"]
        return tuple(out)

    def run(self, model: "ContextAwareTransformer", src, ctx, training: bool, schema: str = "aware"):
        """Return ``(memory, inside_hooks)`` for :meth:`Transformer.decode_stack`."""
        hs = model.encoder_forward(src, "source", training)
        hs = inject_noise(hs, self.noise, training, model.noise_rng)
        if schema == "agnostic" or self.mode in ("none", "single"):
            return Memory(hs), None
        if ctx is None:
            raise ConfigurationError(f"{self.mode} integration with aware decoding needs context tokens")
        hc = model.context_encoder_forward(ctx, training)
        if self.mode == "outside":
            out = outside_integrate(model.ctx, hs, hc)
            return Memory(Representation(out.fused, hs.keep)), None
        return Memory(hs, hc), model.ctx.decoder.hooks


def compose_modes(mode, noise: NoiseConfig | float = 0.0) -> MemoryPipeline:
    modes = [mode] if isinstance(mode, str) else list(mode)
    modes = [m for part in modes for m in part.split("+")]
    if not isinstance(noise, NoiseConfig):
        noise = NoiseConfig(float(noise))
    for m in modes:
        if m not in ("none", "outside", "inside", "single"):
            raise ConfigurationError(f"unknown integration mode {m!r}")
    active = [m for m in modes if m != "none"]
    if len(set(active)) > 1:
        raise ConfigurationError(f"contradictory integration modes {'+'.join(modes)}")
    return MemoryPipeline(active[0] if active else "none", noise)


# -- full model ----------------------------------------------------------------


class ContextAwareTransformer(Transformer):
    """Sentence-level Transformer plus the configured context path."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__(cfg, seed)
        if cfg.multi_encoder:
            self.ctx = ContextIntegration(cfg, self.encoder, RngStream(seed).child("init-ctx"))
        object.__setattr__(self, "noise_rng", RngStream(seed).child("noise"))
        object.__setattr__(self, "pipeline", compose_modes(cfg.integration, NoiseConfig(cfg.noise_sigma)))

    def reseed(self, seed: int) -> None:
        super().reseed(seed)
        object.__setattr__(self, "noise_rng", RngStream(seed).child("noise"))

    def encoder_forward(self, tokens, which: str = "source", training: bool = False) -> Representation:
        if which == "context":
            return self.context_encoder_forward(tokens, training)
        return self.encode_stack(self.encoder, tokens, training, "source")

    def context_encoder_forward(self, tokens, training: bool = False) -> Representation:
        if not self.cfg.multi_encoder:
            raise ConfigurationError(f"integration mode {self.cfg.integration!r} has no context encoder")
        return self.encode_stack(self.ctx.encoder, tokens, training, "context")

    def memory(self, src, ctx=None, training: bool = False, schema: str = "aware"):
        return self.pipeline.run(self, src, ctx, training, schema)

    def decoder_forward(self, target_in, memory: Memory, training: bool = False, inside=None) -> Tensor:
        if self.cfg.integration == "inside" and memory.context is not None and inside is None:
            raise ConfigurationError("inside integration got a context memory but no inside hooks")
        if inside is not None and self.cfg.integration != "inside":
            raise ConfigurationError(f"{self.cfg.integration} integration does not take two memories")
        return self.decode_stack(target_in, memory, training, inside)

    def forward(self, src, ctx, target_in, training: bool = False, schema: str = "aware") -> Tensor:
        mem, inside = self.memory(src, ctx, training, schema)
        return self.decoder_forward(target_in, mem, training, inside)

    def batch_loss(self, batch, training: bool = True, schema: str = "aware") -> Tensor:
        logits = self.forward(batch.src, batch.ctx if self.cfg.multi_encoder else None, batch.tgt_in, training, schema)
        return self.loss(logits, batch.tgt_out)

    # -- parameter bookkeeping

    def parameter_table(self):
        """``(canonical name -> tensor, alias name -> canonical name)``."""
        params, aliases, seen = {}, {}, {}
        for name, p in self.named_parameters():
            if id(p) in seen:
                aliases[name] = seen[id(p)]
            else:
                seen[id(p)] = name
                params[name] = p
        return params, aliases

    def parameters(self) -> dict:
        return self.parameter_table()[0]

    def stage1_names(self) -> list:
        return [n for n in self.parameters() if not n.startswith("ctx.")]

    def to_checkpoint(self, step: int = 0, extra: dict | None = None) -> Checkpoint:
        params, aliases = self.parameter_table()
        return Checkpoint(self.cfg, {n: p.data.astype(np.float32) for n, p in params.items()}, aliases, step, dict(extra or {}))

    def load_params(self, values: dict, names: Sequence[str] | None = None, strict: bool = True) -> None:
        params = self.parameters()
        names = list(values) if names is None else list(names)
        for n in names:
            if n not in params:
                if strict:
                    raise ConfigurationError(f"checkpoint parameter {n!r} does not exist in this model")
                continue
            arr = np.asarray(values[n])
            if arr.shape != params[n].shape:
                raise ConfigurationError(f"shape mismatch for {n}: checkpoint {arr.shape} vs model {params[n].shape}")
            params[n].data[...] = arr

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, seed: int = 0) -> "ContextAwareTransformer":
        model = cls(ckpt.config, seed)
        params, aliases = model.parameter_table()
        if aliases != ckpt.aliases:
            raise ConfigurationError("checkpoint alias records do not match the configured weight sharing")
        if list(params) != list(ckpt.params):
            missing = set(params) ^ set(ckpt.params)
            raise ConfigurationError(f"checkpoint parameter names differ from model: {sorted(missing)[:5]}")
        model.load_params(ckpt.params)
        return model


def shared_block_count(model: ContextAwareTransformer) -> int:
    return model.ctx.num_shared if model.cfg.multi_encoder else 0


@contextlib.contextmanager
def saturate_gates(model: ContextAwareTransformer, value: float = np.inf):
    """Test hook: override every gate bias so ``g == 1`` exactly."""
    gates = model.ctx.gates() if model.cfg.multi_encoder else []
    for g in gates:
        object.__setattr__(g, "bias_override", value)
    try:
        yield
    finally:
        for g in gates:
            object.__setattr__(g, "bias_override", None)
