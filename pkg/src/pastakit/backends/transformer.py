"""Tiny seeded decoder-only transformer in numpy.

It is untrained: weights are a pure function of the seed. Its only job is
numeric verification, so the cached interleaved path can be checked against
a full re-forward of the same logical context. Positions use learned absolute
embeddings indexed by position id, which makes any position error visible in
the logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pastakit.backends.base import Feed, StepOutput, StepRequest
from pastakit.backends.scripted import ScriptedBackend
from pastakit.errors import BackendError, ContextTooLong, UnknownSlot


@dataclass(frozen=True)
class TinyTransformerConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    # 256 byte ids plus room for control tokens and interned promise tags
    vocab: int = 256 + 64
    max_positions: int = 2048
    seed: int = 0
    mlp_ratio: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))


class TinyTransformer:
    def __init__(self, config: TinyTransformerConfig = TinyTransformerConfig()):
        self.config = config
        c = config
        dt = np.dtype(c.dtype)
        rng = np.random.default_rng(c.seed)
        d, hidden = c.model_dim, c.model_dim * c.mlp_ratio

        def normal(*shape, scale=1.0):
            return (rng.standard_normal(shape) * scale).astype(dt)

        self.tok_emb = normal(c.vocab, d)
        self.pos_emb = normal(c.max_positions, d)
        self.layers = []
        for _ in range(c.layers):
            self.layers.append({
                "ln1_g": np.ones(d, dt), "ln1_b": np.zeros(d, dt),
                "wq": normal(d, d, scale=d ** -0.5), "wk": normal(d, d, scale=d ** -0.5),
                "wv": normal(d, d, scale=d ** -0.5), "wo": normal(d, d, scale=d ** -0.5),
                "ln2_g": np.ones(d, dt), "ln2_b": np.zeros(d, dt),
                "w1": normal(d, hidden, scale=d ** -0.5), "b1": np.zeros(hidden, dt),
                "w2": normal(hidden, d, scale=hidden ** -0.5), "b2": np.zeros(d, dt),
            })
        self.lnf_g = np.ones(d, dt)
        self.lnf_b = np.zeros(d, dt)
        self.w_out = normal(d, c.vocab, scale=d ** -0.5)

    @property
    def head_dim(self) -> int:
        return self.config.model_dim // self.config.heads

    def embed(self, tokens: Sequence[int], positions: Sequence[int]) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size and (positions.max() >= self.config.max_positions or positions.min() < 0):
            raise ContextTooLong(f"position id {positions.max()} outside 0..{self.config.max_positions - 1}")
        if tokens.size and (tokens.max() >= self.config.vocab or tokens.min() < 0):
            raise BackendError(f"token id {tokens.max()} outside vocabulary of {self.config.vocab}")
        return self.tok_emb[tokens] + self.pos_emb[positions]

    def qkv(self, layer: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        w = self.layers[layer]
        h = _layer_norm(x, w["ln1_g"], w["ln1_b"])
        shape = (x.shape[0], self.config.heads, self.head_dim)
        return (h @ w["wq"]).reshape(shape), (h @ w["wk"]).reshape(shape), (h @ w["wv"]).reshape(shape)

    def finish_layer(self, layer: int, x: np.ndarray, q: np.ndarray, k: np.ndarray, v: np.ndarray,
                     mask: np.ndarray) -> np.ndarray:
        """Attention of queries ``q`` over keys/values ``k, v`` under ``mask``, then the MLP."""
        w = self.layers[layer]
        scores = np.einsum("nhd,mhd->hnm", q, k) / np.sqrt(np.asarray(self.head_dim, q.dtype))
        scores = np.where(mask[None], scores, -np.inf)
        scores = scores - scores.max(-1, keepdims=True)
        probs = np.exp(scores)
        probs = probs / probs.sum(-1, keepdims=True)
        attn = np.einsum("hnm,mhd->nhd", probs, v).reshape(x.shape[0], -1)
        x = x + attn @ w["wo"]
        h = _layer_norm(x, w["ln2_g"], w["ln2_b"])
        return x + _gelu(h @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]

    def head(self, x: np.ndarray) -> np.ndarray:
        return _layer_norm(x, self.lnf_g, self.lnf_b) @ self.w_out

    def forward(self, tokens: Sequence[int], positions: Sequence[int],
                attention_mask: np.ndarray | None = None) -> np.ndarray:
        """Logits for every position of a full sequence (causal unless a mask is given)."""
        n = len(tokens)
        if n > self.config.max_positions:
            raise ContextTooLong(f"context of {n} tokens exceeds {self.config.max_positions}")
        if len(positions) != n:
            raise ValueError("tokens and positions differ in length")
        mask = np.tril(np.ones((n, n), bool)) if attention_mask is None else np.asarray(attention_mask, bool)
        x = self.embed(tokens, positions)
        for layer in range(self.config.layers):
            q, k, v = self.qkv(layer, x)
            x = self.finish_layer(layer, x, q, k, v, mask)
        return self.head(x)

    def sequential_reference(self, context_tokens: Sequence[int], position_ids: Sequence[int],
                             attention_mask: np.ndarray | None = None) -> np.ndarray:
        """Next-token logits after a full re-forward of ``context_tokens``."""
        if not len(context_tokens):
            raise ValueError("empty context")
        return self.forward(context_tokens, position_ids, attention_mask)[-1]


@dataclass(frozen=True)
class StepRecord:
    timestep: int
    thread_id: int
    feed: Feed
    logits: np.ndarray = field(repr=False)


class TinyTransformerBackend:
    """Cached decoding over arbitrary slot layouts.

    With ``script`` set the emitted tokens are forced from the script (teacher
    forcing) while logits are still computed and recorded; otherwise decoding
    is greedy.
    """

    def __init__(self, model: TinyTransformer | None = None, script: ScriptedBackend | None = None,
                 record: bool = True):
        self.model = model or TinyTransformer()
        self.script = script
        self.record = record
        self.records: list[StepRecord] = []
        self.reset(0)

    def reset(self, capacity: int) -> None:
        c = self.model.config
        dt = np.dtype(c.dtype)
        shape = (c.layers, capacity, c.heads, self.model.head_dim)
        self.keys = np.zeros(shape, dt)
        self.values = np.zeros(shape, dt)
        self.filled = np.zeros(capacity, bool)
        self.records = []
        if self.script is not None:
            self.script.reset(capacity)

    @property
    def capacity(self) -> int:
        return self.filled.shape[0]

    def step(self, request: StepRequest) -> list[StepOutput]:
        feeds = [f for th in request.threads for f in th.feeds]
        if any(not th.feeds for th in request.threads):
            raise BackendError(f"a thread arrived without a pending token at t={request.timestep}")
        slots = np.array([f.slot for f in feeds], dtype=np.int64)
        if slots.max() >= self.capacity or slots.min() < 0:
            raise UnknownSlot(f"slot {slots.max()} outside the cache of {self.capacity}")
        fresh = set(slots.tolist())
        union: set[int] = set()
        for f in feeds:
            union |= f.visible
        missing = [s for s in union if s not in fresh and not (0 <= s < self.capacity and self.filled[s])]
        if missing:
            raise UnknownSlot(f"slots {sorted(missing)[:5]} are visible but have no cached entry")

        cols = np.array(sorted(union), dtype=np.int64)
        col_of = {s: i for i, s in enumerate(cols.tolist())}
        mask = np.zeros((len(feeds), len(cols)), bool)
        for i, f in enumerate(feeds):
            mask[i, [col_of[s] for s in f.visible]] = True

        model = self.model
        x = model.embed([f.token_id for f in feeds], [f.position_id for f in feeds])
        for layer in range(model.config.layers):
            q, k, v = model.qkv(layer, x)
            self.keys[layer, slots] = k
            self.values[layer, slots] = v
            x = model.finish_layer(layer, x, q, self.keys[layer, cols], self.values[layer, cols], mask)
        self.filled[slots] = True

        last, i = [], -1
        for th in request.threads:
            i += len(th.feeds)
            last.append(i)
        logits = model.head(x[last])
        if self.script is not None:
            tokens = [o.token_id for o in self.script.step(request)]
        else:
            tokens = [int(t) for t in logits.argmax(-1)]
        out = []
        for th, row, token in zip(request.threads, logits, tokens):
            if self.record:
                self.records.append(StepRecord(request.timestep, th.thread_id, th.feeds[-1], row))
            out.append(StepOutput(th.thread_id, token, row))
        return out

    def copy_slots(self, src: Sequence[int], dst: Sequence[int]) -> None:
        src_i = np.asarray(src, dtype=np.int64)
        dst_i = np.asarray(dst, dtype=np.int64)
        if len(src_i) != len(dst_i):
            raise ValueError("src and dst differ in length")
        if len(src_i) == 0:
            return
        for idx in (src_i, dst_i):
            if idx.max() >= self.capacity or idx.min() < 0:
                raise UnknownSlot(f"slot {idx.max()} outside the cache of {self.capacity}")
        # right-hand sides are gathered before assignment, so overlaps are safe
        self.keys[:, dst_i] = self.keys[:, src_i]
        self.values[:, dst_i] = self.values[:, src_i]
        self.filled[dst_i] = self.filled[src_i]
