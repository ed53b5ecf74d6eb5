"""Retrieval-augmented encoder-decoder captioner.

Decoder layers come in three flavours, selected by ``ModelConfig.memory``:

``gated``       kNN-augmented attention: one query projection shared by a causal
                self-attention branch and a cross-attention branch over the
                encoded retrieved captions, mixed as ``a * local + (1 - a) * memory``
                with ``a = sigmoid(s)``.
``sequential``  the same two attentions applied one after the other, no gate.
``none``        plain causal self-attention (no external memory).

All blocks are pre-norm residual: ``x + sublayer(layer_norm(x))``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .nn import AttentionWeights, FeedForward, LayerNorm, Linear, Module, sinusoidal_positions
from .numerics import ConfigError, Parameter, Tensor
from .tokenizer import BOS

CHECKPOINT_MAGIC = b"RATCAP1"
MEMORY_MODES = ("gated", "sequential", "none")


@dataclass
class ModelConfig:
    d_feat: int = 2048
    vocab_size: int = 4096
    d: int = 384
    enc_layers: int = 3
    dec_layers: int = 3
    heads: int = 6
    mem_layers: int = 1
    k: int = 10
    max_len: int = 40
    ffn_mult: int = 4
    memory: str = "gated"
    shared_gate: bool = False
    visual_positions: bool = False
    max_grid: int = 64

    def __post_init__(self):
        for name in ("d_feat", "vocab_size", "d", "enc_layers", "dec_layers", "heads", "mem_layers", "k", "max_len", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.memory not in MEMORY_MODES:
            raise ConfigError(f"memory must be one of {MEMORY_MODES}, got {self.memory!r}")

    @property
    def uses_memory(self) -> bool:
        return self.memory != "none"


class EncoderLayer(Module):
    """Unmasked (key-padding only) self-attention + FFN."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.heads = cfg.heads
        self.ln1 = LayerNorm(cfg.d)
        self.attn = AttentionWeights(cfg.d, rng)
        self.ln2 = LayerNorm(cfg.d)
        self.ffn = FeedForward(cfg.d, cfg.ffn_mult, rng)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        h = self.ln1(x)
        x = x + nx.multi_head_attention(h, h, mask, self.attn, self.heads)
        return x + self.ffn(self.ln2(x))


@dataclass
class MemoryEncoding:
    """Encoded retrieved captions, one ``[T_k, d]`` tensor per caption.

    Captions are encoded independently (no padding is shared between them), so
    the encoding of caption ``j`` never depends on any other caption.  The
    memory keys/values are the concatenation of all caption tokens.
    """

    captions: list[Tensor]

    @classmethod
    def empty(cls) -> "MemoryEncoding":
        return cls([])

    def __len__(self) -> int:
        return len(self.captions)

    @property
    def is_empty(self) -> bool:
        return not self.captions

    @property
    def lengths(self) -> list[int]:
        return [c.shape[0] for c in self.captions]

    def caption(self, i: int) -> Tensor:
        return self.captions[i]

    def flat(self) -> Tensor:
        """All caption tokens concatenated: ``[sum T_k, d]``."""
        return self.captions[0] if len(self.captions) == 1 else nx.concat(self.captions, axis=0)


class KnnAugmentedAttention(Module):
    """Shared-query local/memory attention with a sigmoid scalar gate."""

    def __init__(self, cfg: ModelConfig, rng, gate: Parameter | None):
        super().__init__()
        self.heads = cfg.heads
        self.q = Linear(cfg.d, cfg.d, rng)
        self.local = AttentionWeights(cfg.d, rng, with_query=False)
        self.memory = AttentionWeights(cfg.d, rng, with_query=False)
        if gate is None:
            self.s = Parameter(np.zeros(()))
            gate = self.s
        # alias only; a shared gate is registered once on the model
        object.__setattr__(self, "_gate", gate)

    @property
    def gate(self) -> Parameter:
        return self._gate

    def alpha(self) -> Tensor:
        return nx.sigmoid(self._gate)

    def local_branch(self, q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
        return self.local.o(nx.attention_core(q, k, v, self.heads, mask))

    def memory_branch(self, q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
        return self.memory.o(nx.attention_core(q, k, v, self.heads, mask))

    def memory_kv(self, memory: MemoryEncoding) -> tuple[Tensor, Tensor]:
        flat = memory.flat()
        return self.memory.k(flat), self.memory.v(flat)

    def __call__(self, h: Tensor, memory: MemoryEncoding, causal) -> tuple[Tensor, bool]:
        """Returns the mixed output (before the residual add) and whether memory was used."""
        q = self.q(h)
        local = self.local_branch(q, self.local.k(h), self.local.v(h), causal)
        if memory.is_empty:
            return local, False
        k_m, v_m = self.memory_kv(memory)
        mem = self.memory_branch(q, k_m, v_m, None)
        a = self.alpha()
        return a * local + (1.0 - a) * mem, True


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng, shared_gate: Parameter | None = None):
        super().__init__()
        self.mode = cfg.memory
        self.heads = cfg.heads
        self.ln_sa = LayerNorm(cfg.d)
        if self.mode == "gated":
            self.knn = KnnAugmentedAttention(cfg, rng, shared_gate)
        else:
            self.self_attn = AttentionWeights(cfg.d, rng)
            if self.mode == "sequential":
                self.ln_mem = LayerNorm(cfg.d)
                self.mem_attn = AttentionWeights(cfg.d, rng)
        self.ln_ca = LayerNorm(cfg.d)
        self.cross_attn = AttentionWeights(cfg.d, rng)
        self.ln_ff = LayerNorm(cfg.d)
        self.ffn = FeedForward(cfg.d, cfg.ffn_mult, rng)


class CaptionModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d
        self.visual_in = Linear(cfg.d_feat, d, rng)
        if cfg.visual_positions:
            self.visual_pos = Parameter(rng.normal(0.0, 0.02, (cfg.max_grid, d)))
        self.encoder = _Stack([EncoderLayer(cfg, rng) for _ in range(cfg.enc_layers)])
        self.enc_ln = LayerNorm(d)
        self.tok_emb = Parameter(rng.normal(0.0, 1.0, (cfg.vocab_size, d)))
        if cfg.uses_memory:
            self.mem_encoder = _Stack([EncoderLayer(cfg, rng) for _ in range(cfg.mem_layers)])
            self.mem_ln = LayerNorm(d)
        shared = None
        if cfg.memory == "gated" and cfg.shared_gate:
            shared = self.gate_s = Parameter(np.zeros(()))
        self.decoder = _Stack([DecoderLayer(cfg, rng, shared) for _ in range(cfg.dec_layers)])
        self.dec_ln = LayerNorm(d)
        self.out = Linear(d, cfg.vocab_size, rng)
        self.positions = sinusoidal_positions(max(cfg.max_len, 1), d)
        self.assign_names()
        self.empty_memory_events = 0

    # -- encoders ---------------------------------------------------------------
    def encode_image(self, grid) -> Tensor:
        g = np.asarray(grid.data if isinstance(grid, Tensor) else grid, dtype=np.float64)
        if g.ndim != 2 or g.shape[1] != self.cfg.d_feat:
            raise nx.ShapeError(f"feature grid shape {g.shape} does not match d_feat={self.cfg.d_feat}")
        x = self.visual_in(Tensor(g))
        if self.cfg.visual_positions:
            if g.shape[0] > self.cfg.max_grid:
                raise nx.ShapeError(f"grid has {g.shape[0]} positions > max_grid={self.cfg.max_grid}")
            x = x + self.visual_pos[: g.shape[0]]
        for layer in self.encoder:
            x = layer(x)
        return self.enc_ln(x)

    def encode_memory(self, captions: Sequence[Sequence[int]]) -> MemoryEncoding:
        if not self.cfg.uses_memory or not captions:
            return MemoryEncoding.empty()
        if max(len(c) for c in captions) > self.cfg.max_len:
            raise ValueError(f"retrieved caption longer than max_len={self.cfg.max_len}")
        if min(len(c) for c in captions) == 0:
            raise ValueError("retrieved caption has no tokens")
        # batch captions of equal length together: no padding, no cross-caption coupling
        by_len: dict[int, list[int]] = {}
        for i, c in enumerate(captions):
            by_len.setdefault(len(c), []).append(i)
        encoded: list[Tensor | None] = [None] * len(captions)
        for width, members in by_len.items():
            ids = np.array([list(captions[i]) for i in members], dtype=np.int64)
            x = nx.embedding(self.tok_emb, ids) + self.positions[:width]
            for layer in self.mem_encoder:
                x = layer(x)
            x = self.mem_ln(x)
            for j, i in enumerate(members):
                encoded[i] = x[j]
        return MemoryEncoding(encoded)

    # -- decoder ------------------------------------------------------------------
    def _embed_tokens(self, ids: Sequence[int], offset: int = 0) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError("token id outside vocabulary")
        return nx.embedding(self.tok_emb, ids) + self.positions[offset : offset + len(ids)]

    def decoder_forward(self, tokens: Sequence[int], enc_out: Tensor, memory: MemoryEncoding) -> Tensor:
        """Teacher-forced logits ``[T, vocab]`` for a sequence starting with BOS."""
        t = len(tokens)
        if t == 0 or tokens[0] != BOS:
            raise ValueError("decoder input must start with BOS")
        if t > self.cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len={self.cfg.max_len}")
        x = self._embed_tokens(tokens)
        causal = nx.causal_mask(t)
        used_memory = False
        for layer in self.decoder:
            x, used = self._self_block(layer, x, memory, causal)
            used_memory |= used
            h = layer.ln_ca(x)
            x = x + nx.multi_head_attention(h, enc_out, None, layer.cross_attn, self.cfg.heads)
            x = x + layer.ffn(layer.ln_ff(x))
        if self.cfg.uses_memory and not used_memory:
            self.empty_memory_events += 1
        return self.out(self.dec_ln(x))

    def _self_block(self, layer: DecoderLayer, x: Tensor, memory: MemoryEncoding, causal):
        h = layer.ln_sa(x)
        if layer.mode == "gated":
            mixed, used = layer.knn(h, memory, causal)
            return x + mixed, used
        x = x + nx.multi_head_attention(h, h, causal, layer.self_attn, self.cfg.heads)
        if layer.mode == "sequential" and not memory.is_empty:
            hm = layer.ln_mem(x)
            return x + nx.multi_head_attention(hm, memory.flat(), None, layer.mem_attn, self.cfg.heads), True
        return x, False

    def forward(self, grid, tokens: Sequence[int], memory_captions: Sequence[Sequence[int]] = ()) -> Tensor:
        enc = self.encode_image(grid)
        mem = self.encode_memory(memory_captions)
        return self.decoder_forward(tokens, enc, mem)

    # -- incremental decoding -----------------------------------------------------
    def start(self, grid, memory_captions: Sequence[Sequence[int]] = ()) -> "DecoderState":
        """Encode image and memory once, consume BOS, return the state for step 1."""
        with nx.no_grad():
            enc = self.encode_image(grid)
            mem = self.encode_memory(memory_captions)
            layers = []
            for layer in self.decoder:
                cache = {
                    "enc_k": layer.cross_attn.k(enc).data,
                    "enc_v": layer.cross_attn.v(enc).data,
                }
                if not mem.is_empty:
                    if layer.mode == "gated":
                        k_m, v_m = layer.knn.memory_kv(mem)
                    else:
                        flat = mem.flat()
                        k_m, v_m = layer.mem_attn.k(flat), layer.mem_attn.v(flat)
                    cache.update(mem_k=k_m.data, mem_v=v_m.data)
                layers.append(cache)
        state = DecoderState(tokens=[], static=layers, local_k=[None] * len(layers), local_v=[None] * len(layers), logprobs=None)
        return self.advance(state, BOS)

    def advance(self, state: "DecoderState", token: int) -> "DecoderState":
        """Consume ``token`` and compute log-probabilities for the next position."""
        pos = len(state.tokens)
        if pos >= self.cfg.max_len:
            raise ValueError("decoder state already holds max_len tokens")
        heads = self.cfg.heads
        new_k, new_v = list(state.local_k), list(state.local_v)
        with nx.no_grad():
            x = self._embed_tokens([token], offset=pos)
            for li, layer in enumerate(self.decoder):
                cache = state.static[li]
                h = layer.ln_sa(x)
                if layer.mode == "gated":
                    knn = layer.knn
                    q = knn.q(h)
                    k_all = _append(state.local_k[li], knn.local.k(h).data)
                    v_all = _append(state.local_v[li], knn.local.v(h).data)
                    new_k[li], new_v[li] = k_all, v_all
                    local = knn.local_branch(q, Tensor(k_all), Tensor(v_all), None)
                    if "mem_k" in cache:
                        mem = knn.memory_branch(q, Tensor(cache["mem_k"]), Tensor(cache["mem_v"]), None)
                        a = knn.alpha()
                        x = x + (a * local + (1.0 - a) * mem)
                    else:
                        x = x + local
                else:
                    sa = layer.self_attn
                    q = sa.q(h)
                    k_all = _append(state.local_k[li], sa.k(h).data)
                    v_all = _append(state.local_v[li], sa.v(h).data)
                    new_k[li], new_v[li] = k_all, v_all
                    x = x + sa.o(nx.attention_core(q, Tensor(k_all), Tensor(v_all), heads, None))
                    if layer.mode == "sequential" and "mem_k" in cache:
                        hm = layer.ln_mem(x)
                        qm = layer.mem_attn.q(hm)
                        ctx = nx.attention_core(qm, Tensor(cache["mem_k"]), Tensor(cache["mem_v"]), heads, None)
                        x = x + layer.mem_attn.o(ctx)
                h = layer.ln_ca(x)
                qc = layer.cross_attn.q(h)
                ctx = nx.attention_core(qc, Tensor(cache["enc_k"]), Tensor(cache["enc_v"]), heads, None)
                x = x + layer.cross_attn.o(ctx)
                x = x + layer.ffn(layer.ln_ff(x))
            logits = self.out(self.dec_ln(x))
            logprobs = nx.log_softmax(logits, axis=-1).data[0]
        return DecoderState(state.tokens + [int(token)], state.static, new_k, new_v, logprobs)

    # -- introspection --------------------------------------------------------------
    def gate_values(self) -> list[float]:
        """``alpha`` per decoder layer (empty for models without a gate)."""
        if self.cfg.memory != "gated":
            return []
        return [float(1.0 / (1.0 + np.exp(-layer.knn.gate.data))) for layer in self.decoder]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ValueError(f"parameter mismatch: {sorted(set(params) ^ set(state))}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {state[name].shape}")
            p.data[...] = state[name]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.astype("<f8").tobytes())
        return h.hexdigest()


class _Stack(Module):
    """Ordered list of child modules."""

    def __init__(self, layers: list[Module]):
        super().__init__()
        self._layers = layers
        for i, layer in enumerate(layers):
            setattr(self, f"layer{i}", layer)

    def __iter__(self):
        return iter(self._layers)

    def __len__(self):
        return len(self._layers)

    def __getitem__(self, i):
        return self._layers[i]


def _append(cache: np.ndarray | None, row: np.ndarray) -> np.ndarray:
    return row if cache is None else np.concatenate([cache, row], axis=0)


@dataclass
class DecoderState:
    """Tokens consumed so far plus per-layer caches.

    ``static`` (encoder / memory keys and values) is shared between states;
    ``local_k`` / ``local_v`` are fresh arrays per state, so beams can branch.
    """

    tokens: list[int]
    static: list[dict]
    local_k: list
    local_v: list
    logprobs: np.ndarray | None = field(default=None, repr=False)


# -- checkpoints ---------------------------------------------------------------------
def save_checkpoint(model: CaptionModel, path, extra: dict | None = None) -> None:
    """``RATCAP1`` + u64 header length + JSON header + raw little-endian f64 data."""
    manifest, offset, blobs = [], 0, []
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    header = json.dumps({"config": asdict(model.cfg), "parameters": manifest, "extra": extra or {}}, sort_keys=True).encode()
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs))


def load_checkpoint(path) -> tuple[CaptionModel, dict]:
    buf = Path(path).read_bytes()
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a RATCAP1 checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", buf, off)
    off += 8
    header = json.loads(buf[off : off + hlen])
    off += hlen
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in header["config"].items() if k in known})
    model = CaptionModel(cfg)
    state = {}
    for entry in header["parameters"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off + entry["offset"])
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    model.load_state_dict(state)
    return model, header.get("extra", {})
