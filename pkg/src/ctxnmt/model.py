"""Post-norm Transformer encoder-decoder and the binary checkpoint format."""

from __future__ import annotations

import dataclasses
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor

INTEGRATION_MODES = ("none", "outside", "inside", "single")


class ConfigurationError(ValueError):
    pass


class ModelInputError(ValueError):
    pass


@dataclass
class ModelConfig:
    src_vocab_size: int = 100
    tgt_vocab_size: int = 100
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 256
    encoder_layers: int = 2
    decoder_layers: int = 2
    context_encoder_layers: int = 1
    dropout: float = 0.1
    label_smoothing: float = 0.1
    max_positions: int = 256
    integration: str = "none"
    noise_sigma: float = 0.0
    weight_sharing: bool = False
    tied_embeddings: bool = True
    gate_bias_init: float = 2.0
    inside_layers: str = "all"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.integration not in INTEGRATION_MODES:
            raise ConfigurationError(f"unknown integration mode {self.integration!r}")
        if self.d_model % self.num_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        for name in ("src_vocab_size", "tgt_vocab_size", "d_model", "num_heads", "d_ff",
                     "encoder_layers", "decoder_layers", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.context_encoder_layers < 0:
            raise ConfigurationError("context_encoder_layers must be >= 0")
        if self.integration in ("outside", "inside") and self.context_encoder_layers < 1:
            raise ConfigurationError(f"{self.integration} integration needs context_encoder_layers >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if self.weight_sharing and self.context_encoder_layers > self.encoder_layers:
            raise ConfigurationError(
                "weight sharing needs context_encoder_layers <= encoder_layers "
                f"({self.context_encoder_layers} > {self.encoder_layers})"
            )
        self.inside_layer_mask()

    @property
    def multi_encoder(self) -> bool:
        return self.integration in ("outside", "inside")

    def inside_layer_mask(self) -> list:
        if self.inside_layers == "all":
            return [True] * self.decoder_layers
        bits = [b.strip() for b in self.inside_layers.split(",")]
        if len(bits) != self.decoder_layers or any(b not in ("0", "1") for b in bits):
            raise ConfigurationError(f"inside_layers must be 'all' or {self.decoder_layers} comma-separated 0/1 flags")
        return [b == "1" for b in bits]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_items(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_items(cls, items: dict) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            kwargs[f.name] = _parse_value(items[f.name], f.type)
        return cls(**kwargs)

    @classmethod
    def base(cls, **changes) -> "ModelConfig":
        """Transformer-base shape (512/8/2048, 6+6 layers)."""
        return cls(d_model=512, num_heads=8, d_ff=2048, encoder_layers=6, decoder_layers=6, **changes)


def _parse_value(raw, typ):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ConfigurationError(f"bad boolean {raw!r}")
        return raw.lower() in ("true", "1")
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- modules -------------------------------------------------------------------


class Module:
    """Container that registers :class:`Tensor` parameters and child modules in order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, list) and value and all(isinstance(m, Module) for m in value):
            for i, m in enumerate(value):
                self._children[f"{name}.{i}"] = m
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        """Every ``(dotted name, tensor)`` pair; aliased tensors appear under each name."""
        for n, p in self._params.items():
            yield prefix + n, p
        for n, m in self._children.items():
            yield from m.named_parameters(f"{prefix}{n}.")


def xavier(rng: RngStream, fan_in: int, fan_out: int) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor((rng.uniform((fan_in, fan_out)) * 2 - 1) * a, requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gamma = ones(d)
        self.beta = zeros(d)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: RngStream):
        super().__init__()
        self.w1 = xavier(rng, d, d_ff)
        self.b1 = zeros(d_ff)
        self.w2 = xavier(rng, d_ff, d)
        self.b2 = zeros(d)

    def __call__(self, x: Tensor, p: float, training: bool, rng: RngStream) -> Tensor:
        h = T.relu(T.linear(x, self.w1, self.b1))
        h = T.dropout(h, p, training, rng)
        return T.linear(h, self.w2, self.b2)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``num_heads`` heads.

    ``keep`` is a boolean array broadcastable to ``(batch, heads, q_len, k_len)``;
    false entries are masked keys.
    """

    def __init__(self, d: int, num_heads: int, rng: RngStream):
        super().__init__()
        self.num_heads = num_heads
        self.wq = xavier(rng, d, d)
        self.bq = zeros(d)
        self.wk = xavier(rng, d, d)
        self.bk = zeros(d)
        self.wv = xavier(rng, d, d)
        self.bv = zeros(d)
        self.wo = xavier(rng, d, d)
        self.bo = zeros(d)
        object.__setattr__(self, "last_weights", None)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, keep: Optional[np.ndarray] = None) -> Tensor:
        B, Lq, d = query.shape
        Lk = key.shape[1]
        if key.shape[0] != B or value.shape[:2] != key.shape[:2]:
            raise T.ShapeError(f"attention batch/length mismatch: q{query.shape} k{key.shape} v{value.shape}")
        H = self.num_heads
        dh = d // H
        q = T.transpose(T.reshape(T.linear(query, self.wq, self.bq), (B, Lq, H, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(T.linear(key, self.wk, self.bk), (B, Lk, H, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(T.linear(value, self.wv, self.bv), (B, Lk, H, dh)), (0, 2, 1, 3))
        scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(dh))
        if keep is None:
            keep = np.ones((1, 1, 1, Lk), dtype=bool)
        w = T.masked_softmax(scores, keep)
        object.__setattr__(self, "last_weights", w.data)
        ctx = T.reshape(T.transpose(T.matmul(w, v), (0, 2, 1, 3)), (B, Lq, d))
        return T.linear(ctx, self.wo, self.bo)


def multi_head_attention(attn: MultiHeadAttention, q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    return attn(q, k, v, mask)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.ln1 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.ln2 = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, keep: np.ndarray, p: float, training: bool, rng: RngStream) -> Tensor:
        h = self.self_attn(x, x, x, keep)
        x = self.ln1(x + T.dropout(h, p, training, rng))
        h = self.ff(x, p, training, rng)
        return self.ln2(x + T.dropout(h, p, training, rng))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.ln1 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.ln3 = LayerNorm(cfg.d_model)

    def __call__(self, x, self_keep, memory: "Memory", inside, p, training, rng) -> Tensor:
        h = self.self_attn(x, x, x, self_keep)
        x = self.ln1(x + T.dropout(h, p, training, rng))
        a_s = self.cross_attn(x, memory.hs, memory.hs, memory.src_keep)
        h = a_s if inside is None else inside(x, a_s, memory)
        x = self.ln2(x + T.dropout(h, p, training, rng))
        h = self.ff(x, p, training, rng)
        return self.ln3(x + T.dropout(h, p, training, rng))


@dataclass
class Representation:
    """Encoder output ``h`` of shape ``(batch, len, d_model)`` and its key mask ``(batch, len)``."""

    h: Tensor
    keep: np.ndarray

    @property
    def attn_keep(self) -> np.ndarray:
        return self.keep[:, None, None, :]


@dataclass
class Memory:
    """What the decoder cross-attends to: the (possibly fused) source and, for Inside, the context."""

    source: Representation
    context: Optional[Representation] = None

    @property
    def hs(self) -> Tensor:
        return self.source.h

    @property
    def src_keep(self) -> np.ndarray:
        return self.source.attn_keep


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal table: ``sin`` on even dims, ``cos`` on odd dims."""
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream, num_layers: int | None = None):
        super().__init__()
        n = cfg.encoder_layers if num_layers is None else num_layers
        self.layers = [EncoderLayer(cfg, rng) for _ in range(n)]

    def __call__(self, x: Tensor, keep: np.ndarray, p, training, rng) -> Tensor:
        attn_keep = keep[:, None, None, :]
        for layer in self.layers:
            x = layer(x, attn_keep, p, training, rng)
        return x


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream):
        super().__init__()
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.decoder_layers)]


def causal_keep(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))[None, None]


class Transformer(Module):
    """Sentence-level encoder-decoder.  Parameter names are the stage-1 namespace."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        object.__setattr__(self, "cfg", cfg)
        rng = RngStream(seed).child("init")
        std = cfg.d_model ** -0.5
        self.src_embed = Tensor(rng.normal((cfg.src_vocab_size, cfg.d_model)) * std, requires_grad=True)
        self.tgt_embed = Tensor(rng.normal((cfg.tgt_vocab_size, cfg.d_model)) * std, requires_grad=True)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        if not cfg.tied_embeddings:
            self.out_proj = xavier(rng, cfg.d_model, cfg.tgt_vocab_size)
        object.__setattr__(self, "_pe", positional_encoding(cfg.max_positions, cfg.d_model))
        object.__setattr__(self, "rng", RngStream(seed).child("dropout"))

    def reseed(self, seed: int) -> None:
        object.__setattr__(self, "rng", RngStream(seed).child("dropout"))

    # -- core operations

    def embed(self, tokens: np.ndarray, side: str, training: bool = False) -> Tensor:
        tokens = np.asarray(tokens)
        L = tokens.shape[1]
        if L > self.cfg.max_positions:
            raise ModelInputError(f"sequence length {L} exceeds max_positions={self.cfg.max_positions}")
        table = self.tgt_embed if side == "target" else self.src_embed
        x = T.scale(T.embedding(table, tokens), math.sqrt(self.cfg.d_model))
        x = x + Tensor(self._pe[:L], dtype=x.dtype)
        return T.dropout(x, self.cfg.dropout, training, self.rng)

    def encode_stack(self, encoder: Encoder, tokens: np.ndarray, training: bool, side: str = "source") -> Representation:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[0] == 0:
            raise ModelInputError(f"encoder needs a non-empty (batch, len) id matrix, got shape {tokens.shape}")
        keep = tokens != 0
        x = self.embed(tokens, side, training)
        return Representation(encoder(x, keep, self.cfg.dropout, training, self.rng), keep)

    def decode_stack(self, target_in: np.ndarray, memory: Memory, training: bool, inside=None) -> Tensor:
        target_in = np.asarray(target_in)
        x = self.embed(target_in, "target", training)
        keep = causal_keep(target_in.shape[1])
        for i, layer in enumerate(self.decoder.layers):
            hook = None if inside is None else inside[i]
            x = layer(x, keep, memory, hook, self.cfg.dropout, training, self.rng)
        w = self.out_proj if not self.cfg.tied_embeddings else T.transpose(self.tgt_embed)
        return T.matmul(x, w)

    def loss(self, logits: Tensor, target_out: np.ndarray) -> Tensor:
        return sequence_loss(logits, target_out, self.cfg.label_smoothing)


def sequence_loss(logits: Tensor, target_out: np.ndarray, smoothing: float = 0.1) -> Tensor:
    """Label-smoothed cross-entropy over non-PAD target positions."""
    target_out = np.asarray(target_out)
    if not (target_out != 0).any():
        raise ModelInputError("target batch is entirely padding")
    return T.cross_entropy(logits, target_out, smoothing, ignore_index=0)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"CTXMT"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # canonical name -> float32 array, in model order
    aliases: dict  # alias name -> canonical name
    step: int = 0
    extra: dict = dataclasses.field(default_factory=dict)

    def to_bytes(self) -> bytes:
        items = {k: format_value(v) for k, v in self.config.to_items().items()}
        items["step"] = str(self.step)
        for a, c in self.aliases.items():
            items[f"alias.{a}"] = c
        for k, v in self.extra.items():
            items[f"extra.{k}"] = str(v)
        block = "".join(f"{k}={items[k]}\n" for k in sorted(items)).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(bytes([VERSION]))
        buf.write(struct.pack("<I", len(block)))
        buf.write(block)
        for name, arr in self.params.items():
            nb = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            buf.write(struct.pack("<I", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:5] != MAGIC:
            raise ValueError("not a checkpoint: bad magic bytes")
        if raw[5] != VERSION:
            raise ValueError(f"unsupported checkpoint version {raw[5]}")
        (n,) = struct.unpack_from("<I", raw, 6)
        pos = 10
        items = {}
        for line in raw[pos : pos + n].decode("utf-8").splitlines():
            k, _, v = line.partition("=")
            items[k] = v
        pos += n
        step = int(items.pop("step", "0"))
        aliases = {k[6:]: v for k, v in items.items() if k.startswith("alias.")}
        extra = {k[6:]: v for k, v in items.items() if k.startswith("extra.")}
        config = ModelConfig.from_items({k: v for k, v in items.items() if "." not in k})
        params = {}
        while pos < len(raw):
            (ln,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + ln].decode("utf-8")
            pos += 4 + ln
            (rank,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape)) if rank else 1
            params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
        return cls(config, params, aliases, step, extra)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
