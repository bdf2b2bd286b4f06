"""Attention-loss metrics, ALr heatmaps, norm/attention dumps and the key-dimension probe."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cache import NO_COMPRESSION
from .inference import decode_step, prefill
from .model import ModelWeights, forward
from .tensor import SplitMix64


def attention_loss(scores, dropped) -> float:
    """Attention mass the query placed on the dropped positions."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = sorted(int(p) for p in dropped)
    if idx and (idx[0] < 0 or idx[-1] >= len(scores)):
        raise IndexError("dropped position outside the score vector")
    return math.fsum(scores[idx])


def norm_drop_order(key_norms, positions=None) -> np.ndarray:
    """Highest norm first; the earlier position first among equal norms."""
    norms = np.asarray(key_norms, dtype=np.float64)
    pos = np.arange(len(norms)) if positions is None else np.asarray(positions)
    return np.lexsort((pos, -norms))


def score_drop_order(scores, positions=None) -> np.ndarray:
    """Lowest score first; the earlier position first among equal scores."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.arange(len(scores)) if positions is None else np.asarray(positions)
    return np.lexsort((pos, scores))


def alr_curve(scores, key_norms) -> np.ndarray:
    """``Y[m-1]`` = loss of dropping the m highest-norm keys minus the optimal loss.

    Differences are summed with ``math.fsum`` so every entry is exactly >= 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    norms = np.asarray(key_norms, dtype=np.float64)
    if scores.shape != norms.shape or scores.ndim != 1:
        raise ValueError("scores and key norms must be vectors of equal length")
    by_norm = scores[norm_drop_order(norms)]
    by_score = scores[score_drop_order(scores)]
    n = len(scores)
    return np.array([math.fsum(np.concatenate([by_norm[:m], -by_score[:m]]))
                     for m in range(1, n + 1)])


def alr(scores, key_norms) -> float:
    return math.fsum(alr_curve(scores, key_norms))


@dataclass
class AlrReport:
    alr: np.ndarray                 # [layers, heads], mean over chunks
    per_chunk: np.ndarray           # [chunks, layers, heads]
    curves: Optional[np.ndarray]    # [layers, heads, n] mean Y^m curves
    num_chunks: int
    chunk_len: int
    corpus_id: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "head", "alr", "num_chunks"])
        for l, h in np.ndindex(self.alr.shape):
            w.writerow([l, h, repr(float(self.alr[l, h])), self.num_chunks])
        return buf.getvalue()

    def per_chunk_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["chunk", "layer", "head", "alr"])
        for c, l, h in np.ndindex(self.per_chunk.shape):
            w.writerow([c, l, h, repr(float(self.per_chunk[c, l, h]))])
        return buf.getvalue()


def _step_alr(state, record) -> tuple[np.ndarray, list]:
    c = state.weights.config
    vals = np.zeros((c.num_layers, c.num_heads))
    curves = []
    for l in range(c.num_layers):
        row_curves = []
        for h in range(c.num_heads):
            cache = state.caches[l][h]
            curve = alr_curve(record.rows[l][h], cache.key_norms)
            vals[l, h] = math.fsum(curve)
            row_curves.append(curve)
        curves.append(row_curves)
    return vals, curves


def alr_heatmap(weights: ModelWeights, corpus_chunks: Sequence[Sequence[int]], chunk_len: int,
                last_steps: int = 1, corpus_id: str = "") -> AlrReport:
    """Mean ALr per (layer, head) over chunks.

    Each chunk's first ``chunk_len - 1`` tokens are prefilled without
    compression; the final step's attention row and the cached key norms give
    one ALr per head. With ``last_steps = s`` the last ``s`` of those tokens
    are decoded one at a time instead and their ALr values averaged.
    """
    if chunk_len < 2:
        raise ValueError("chunks need at least 2 tokens")
    if not corpus_chunks:
        raise ValueError("no chunks given")
    n = chunk_len - 1
    if not 1 <= last_steps <= n:
        raise ValueError("last_steps must lie in [1, chunk_len - 1]")
    per_chunk, curve_sum = [], None
    for chunk in corpus_chunks:
        if len(chunk) < chunk_len:
            raise ValueError("chunk shorter than chunk_len")
        prompt = list(chunk[:n])
        head = n - last_steps + 1
        state = prefill(weights, prompt[:head], NO_COMPRESSION)
        vals, curves = _step_alr(state, state.record)
        acc = [vals]
        for tok in prompt[head:]:
            _, rec = decode_step(weights, state, tok)
            acc.append(_step_alr(state, rec)[0])
            curves = None
        per_chunk.append(np.mean(acc, axis=0))
        if last_steps == 1:
            arr = np.array(curves)
            curve_sum = arr if curve_sum is None else curve_sum + arr
    per_chunk = np.array(per_chunk)
    mean_curves = curve_sum / len(per_chunk) if curve_sum is not None else None
    return AlrReport(per_chunk.mean(axis=0), per_chunk, mean_curves, len(per_chunk),
                     chunk_len, corpus_id)


@dataclass(frozen=True)
class DumpRow:
    layer: int
    head: int
    position: int
    token_id: int
    attention_score: float
    key_norm: float


DUMP_COLUMNS = ("layer", "head", "position", "token_id", "attention_score", "key_norm")


def norm_attention_dump(weights: ModelWeights, tokens, return_state: bool = False):
    """One row per cached position per head at the final prefill step."""
    if len(tokens) < 2:
        raise ValueError("need at least two tokens")
    state = prefill(weights, tokens, NO_COMPRESSION)
    rec = state.record
    rows = []
    for l, layer in enumerate(state.caches):
        for h, cache in enumerate(layer):
            for i in range(len(cache)):
                rows.append(DumpRow(l, h, int(cache.positions[i]), int(cache.token_ids[i]),
                                    float(rec.rows[l][h][i]), float(cache.key_norms[i])))
    return (rows, state) if return_state else rows


def dump_csv(rows: Sequence[DumpRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DUMP_COLUMNS)
    for r in rows:
        w.writerow([r.layer, r.head, r.position, r.token_id, repr(r.attention_score),
                    repr(r.key_norm)])
    return buf.getvalue()


@dataclass
class ProbeResult:
    mode: str
    layer: int
    head: int
    target: int
    zeroed_dims: list[int]
    attention_delta: float
    baseline: np.ndarray = field(repr=False)
    perturbed: np.ndarray = field(repr=False)

    @property
    def k_dims(self) -> int:
        return len(self.zeroed_dims)

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "zeroed_dims": self.zeroed_dims,
                           "attention_delta": self.attention_delta, "k_dims": self.k_dims,
                           "layer": self.layer, "head": self.head, "target": self.target},
                          sort_keys=True)


def head_qk(weights: ModelWeights, tokens, layer: int, head: int):
    """Post-rotary queries and keys of one head over a causal full-context pass."""
    captured = {}

    def mask_fn(li, q, k, v):
        if li == layer:
            captured["q"], captured["k"] = q[0, head].copy(), k[0, head].copy()
        n = q.shape[2]
        return np.tril(np.ones((n, n), dtype=bool))

    forward(weights, np.asarray(tokens)[None], mask_fn=mask_fn)
    return captured["q"], captured["k"]


def _causal_attention(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    q = q.astype(np.float64)
    k = k.astype(np.float64)
    n = q.shape[0]
    s = (q @ k.T) / math.sqrt(q.shape[1])
    s = np.where(np.tril(np.ones((n, n), dtype=bool)), s, -np.inf)
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    return p / p.sum(axis=1, keepdims=True)


def dim_zero_probe(weights: ModelWeights, tokens, k_dims: int, mode: str = "peak_dims",
                   layer: Optional[int] = None, head: int = 0, target: Optional[int] = None,
                   seed: int = 0) -> ProbeResult:
    """Zero ``k_dims`` dimensions of one cached key and measure the attention shift.

    The target defaults to the lowest-norm key of ``(layer, head)``. Mode
    ``peak_dims`` zeroes its largest-magnitude dimensions, ``random_dims`` a
    seeded random set of the same size. ``attention_delta`` is the mean absolute
    change over the attention rows of queries at or after the target.
    """
    c = weights.config
    if len(tokens) < 2:
        raise ValueError("need at least two tokens")
    if not 0 <= k_dims <= c.d_head:
        raise ValueError(f"k_dims must lie in [0, {c.d_head}]")
    if mode not in ("peak_dims", "random_dims"):
        raise ValueError("mode must be peak_dims or random_dims")
    layer = c.num_layers - 1 if layer is None else layer
    q, k = head_qk(weights, tokens, layer, head)
    norms = np.sqrt(np.einsum("ij,ij->i", k.astype(np.float64), k.astype(np.float64)))
    if target is None:
        target = int(norm_drop_order(norms)[-1])
    elif not 0 <= target < len(tokens):
        raise ValueError(f"target position {target} is not cached")
    if mode == "peak_dims":
        order = np.lexsort((np.arange(c.d_head), -np.abs(k[target].astype(np.float64))))
        dims = sorted(int(i) for i in order[:k_dims])
    else:
        dims = sorted(SplitMix64(seed).choice(range(c.d_head), k_dims))
    k2 = k.copy()
    k2[target, dims] = 0.0
    base = _causal_attention(q, k)[target:]
    pert = _causal_attention(q, k2)[target:]
    delta = float(np.mean(np.abs(pert - base)))
    return ProbeResult(mode, layer, head, target, dims, delta, base, pert)


def probe_comparison(weights: ModelWeights, tokens, k_dims: int, seeds: Sequence[int],
                     layer: Optional[int] = None, head: int = 0) -> float:
    """Fraction of seeds where random dims move attention strictly less than peak dims."""
    peak = dim_zero_probe(weights, tokens, k_dims, "peak_dims", layer, head).attention_delta
    wins = [dim_zero_probe(weights, tokens, k_dims, "random_dims", layer, head,
                           seed=s).attention_delta < peak for s in seeds]
    return float(np.mean(wins))
