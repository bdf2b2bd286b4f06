"""Cached autoregressive decoding with optional KV-cache compression."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cache import (NO_COMPRESSION, CompressionConfig, EvictionLog, LayerHeadCache,
                    evict_logged)
from .model import ModelWeights, apply_rope, attention_head, forward, multi_head_merge, rms_norm, silu
from .tensor import softmax_rows


class CapacityError(RuntimeError):
    pass


@dataclass
class AttentionRecord:
    """Attention rows of one step: ``rows[l][h]`` over ``positions[l][h]``."""
    step: int
    rows: list[list[np.ndarray]]
    positions: list[list[np.ndarray]]

    def row(self, layer: int, head: int) -> np.ndarray:
        return self.rows[layer][head]


@dataclass
class DecodeState:
    weights: ModelWeights
    compression: CompressionConfig
    caches: list[list[LayerHeadCache]]
    t: int = 0
    tokens: list[int] = field(default_factory=list)
    record: Optional[AttentionRecord] = None
    last_logits: Optional[np.ndarray] = None
    prefill_logits: Optional[np.ndarray] = None
    log: Optional[EvictionLog] = None

    def occupancy(self) -> np.ndarray:
        return np.array([[len(c) for c in layer] for layer in self.caches])

    def cache(self, layer: int, head: int) -> LayerHeadCache:
        return self.caches[layer][head]


def new_state(weights: ModelWeights, compression: CompressionConfig = NO_COMPRESSION,
              log: Optional[EvictionLog] = None) -> DecodeState:
    c = weights.config
    caches = [[LayerHeadCache(l, h, c.d_head, weights.dtype, capacity=64)
               for h in range(c.num_heads)] for l in range(c.num_layers)]
    return DecodeState(weights, compression, caches, log=log)


def _check_tokens(weights: ModelWeights, tokens) -> None:
    v = weights.config.vocab_size
    if any(not 0 <= int(tok) < v for tok in tokens):
        raise ValueError("token id out of vocabulary")


def prefill(weights: ModelWeights, tokens, compression: CompressionConfig = NO_COMPRESSION,
            log: Optional[EvictionLog] = None) -> DecodeState:
    """Encode a prompt into a fresh state.

    With ``prefill_eviction="stream"`` eviction runs after each appended
    position, as if the prompt were decoded token by token; with ``"end"`` the
    prompt is encoded in full and a single eviction pass follows, driven by the
    last prompt position's attention row.

    Each layer is computed for all positions at once; on compressed layers the
    eviction sequence is replayed per head first and turned into a visibility
    mask, which is exactly what token-by-token decoding would have attended to.
    """
    c = weights.config
    tokens = [int(t) for t in tokens]
    if not 1 <= len(tokens) <= c.max_seq_len:
        raise ValueError(f"prompt length {len(tokens)} outside [1, {c.max_seq_len}]")
    _check_tokens(weights, tokens)
    state = new_state(weights, compression, log)
    n = len(tokens)
    tok_arr = np.asarray(tokens, dtype=np.int64)
    positions = np.arange(n)
    scale = 1.0 / math.sqrt(c.d_head)
    causal = np.tril(np.ones((n, n), dtype=bool))
    last_visible = {}
    stream = compression.prefill_eviction == "stream"

    def mask_fn(layer, q, k, v):
        q, k, v = q[0], k[0], v[0]
        if not compression.compresses(layer):
            for h in range(c.num_heads):
                state.caches[layer][h].extend(k[h], v[h], positions, tok_arr)
            last_visible[layer] = [positions] * c.num_heads
            return causal
        mask = np.zeros((c.num_heads, n, n), dtype=bool)
        for h in range(c.num_heads):
            cache = state.caches[layer][h]
            logits = (q[h] @ k[h].T) * scale
            for t in range(n):
                cache.append(k[h, t], v[h, t], t, tokens[t])
                vis = cache.positions
                mask[h, t, vis] = True
                if stream or t == n - 1:
                    row = softmax_rows(logits[t, vis][None, :])[0]
                    evict_logged(cache, compression, t, row, t + 1, log)
        last_visible[layer] = [np.flatnonzero(mask[h, -1]) for h in range(c.num_heads)]
        return mask[None]

    logits, tape = forward(weights, tok_arr[None], mask_fn=mask_fn, keep=True)
    rows, pos = [], []
    for li, rec in enumerate(tape["layers"]):
        p_last = rec["p"][0, :, -1, :]
        vis = last_visible[li]
        rows.append([p_last[h, vis[h]].copy() for h in range(c.num_heads)])
        pos.append(vis)
    state.record = AttentionRecord(n - 1, rows, pos)
    state.t = n
    state.tokens = tokens
    state.prefill_logits = logits[0]
    state.last_logits = logits[0, -1].copy()
    return state


def decode_step(weights: ModelWeights, state: DecodeState, token: int):
    """Consume ``token``; returns ``(logits, AttentionRecord)``.

    Attention at this step sees the just-appended key/value; eviction runs
    after the layer's attention output is computed.
    """
    c = weights.config
    if state.t >= c.max_seq_len:
        raise CapacityError(f"state already holds max_seq_len={c.max_seq_len} tokens")
    _check_tokens(weights, [token])
    t = state.t
    comp = state.compression
    x = weights.embed[int(token)][None, :]
    rows, pos = [], []
    for li, lw in enumerate(weights.layers):
        h = rms_norm(x, lw.attn_norm, c.norm_eps)
        q_all, k_all, v_all = h @ lw.wq, h @ lw.wk, h @ lw.wv
        heads, layer_rows, layer_pos = [], [], []
        for hi in range(c.num_heads):
            sl = slice(hi * c.d_head, (hi + 1) * c.d_head)
            q, k, v = q_all[:, sl], k_all[:, sl], v_all[:, sl]
            if c.use_rope:
                q, k = apply_rope(q, [t]), apply_rope(k, [t])
            cache = state.caches[li][hi]
            cache.append(k[0], v[0], t, token)
            out, scores = attention_head(q, cache.keys, cache.values)
            heads.append(out)
            layer_rows.append(scores)
            layer_pos.append(cache.positions.copy())
        x = x + multi_head_merge(heads, lw.wo)[None, :]
        if comp.compresses(li):
            for hi in range(c.num_heads):
                evict_logged(state.caches[li][hi], comp, t, layer_rows[hi], t + 1, state.log)
        h2 = rms_norm(x, lw.mlp_norm, c.norm_eps)
        x = x + silu(h2 @ lw.w_in) @ lw.w_out
        rows.append(layer_rows)
        pos.append(layer_pos)
    logits = (x @ weights.unembed)[0]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    state.t += 1
    state.tokens.append(int(token))
    state.record = AttentionRecord(t, rows, pos)
    state.last_logits = logits
    return logits, state.record


def greedy_generate(weights: ModelWeights, state: DecodeState, n: int) -> list[int]:
    """Argmax-decode ``n`` tokens continuing from ``state.last_logits``."""
    out = []
    for i in range(n):
        tok = int(np.argmax(state.last_logits))
        out.append(tok)
        if i + 1 < n:
            decode_step(weights, state, tok)
    return out


def full_forward_logits(weights: ModelWeights, tokens) -> np.ndarray:
    """Uncached reference: logits for every position of ``tokens``."""
    return forward(weights, np.asarray(tokens, dtype=np.int64)[None])[0]


def full_forward_greedy(weights: ModelWeights, prompt, n: int) -> list[int]:
    seq = list(prompt)
    out = []
    for _ in range(n):
        tok = int(np.argmax(full_forward_logits(weights, seq)[-1]))
        out.append(tok)
        seq.append(tok)
    return out
