"""Decoder-only transformer: configuration, weights, batched forward and backward.

Blocks are pre-norm residual: ``x += Attn(RMSNorm(x))`` then
``x += W_out silu(W_in RMSNorm(x))``. There is no final norm; the residual
stream goes straight into the unembedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator, Optional

import numpy as np

from .tensor import ShapeError, derive_seed, matmul, seeded_init, softmax_rows


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    d_model: int = 128
    d_head: int = 32
    d_ff: int = 512
    vocab_size: int = 260
    max_seq_len: int = 512
    use_rope: bool = True
    norm_eps: float = 1e-5

    def __post_init__(self):
        counts = (self.num_layers, self.num_heads, self.d_model, self.d_head,
                  self.d_ff, self.vocab_size, self.max_seq_len)
        if any(int(c) < 1 for c in counts):
            raise ValueError("all ModelConfig counts must be >= 1")
        if self.d_model != self.num_heads * self.d_head:
            raise ValueError(f"d_model ({self.d_model}) must equal num_heads * d_head "
                             f"({self.num_heads} * {self.d_head})")
        if self.use_rope and self.d_head % 2:
            raise ValueError("d_head must be even when use_rope is set")
        if not self.norm_eps > 0:
            raise ValueError("norm_eps must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray

    NAMES = ("wq", "wk", "wv", "wo", "w_in", "w_out", "attn_norm", "mlp_norm")


@dataclass
class ModelWeights:
    config: ModelConfig
    embed: np.ndarray
    layers: list[LayerWeights] = field(default_factory=list)
    unembed: Optional[np.ndarray] = None

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Arrays in canonical (checkpoint) order."""
        yield "embed", self.embed
        for i, lw in enumerate(self.layers):
            for name in LayerWeights.NAMES:
                yield f"layers.{i}.{name}", getattr(lw, name)
        yield "unembed", self.unembed

    def expected_shapes(self) -> list[tuple[int, ...]]:
        c = self.config
        d, f = c.d_model, c.d_ff
        per_layer = [(d, d)] * 4 + [(d, f), (f, d), (d,), (d,)]
        return [(c.vocab_size, d)] + per_layer * c.num_layers + [(d, c.vocab_size)]

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ModelWeights":
        return ModelWeights(
            self.config,
            fn(self.embed),
            [LayerWeights(*(fn(getattr(lw, n)) for n in LayerWeights.NAMES))
             for lw in self.layers],
            fn(self.unembed),
        )

    def astype(self, dtype) -> "ModelWeights":
        return self.map(lambda a: np.ascontiguousarray(a, dtype=dtype))

    def zeros_like(self) -> "ModelWeights":
        return self.map(np.zeros_like)

    def copy(self) -> "ModelWeights":
        return self.map(np.array)

    def validate(self) -> None:
        got = [a.shape for _, a in self.named_arrays()]
        if got != self.expected_shapes():
            raise ShapeError("weight shapes do not match ModelConfig")
        for name, a in self.named_arrays():
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite weights in {name}")

    @property
    def dtype(self):
        return self.embed.dtype


def init_weights(config: ModelConfig, seed: int = 0, sigma: float = 0.02) -> ModelWeights:
    c = config
    d, f = c.d_model, c.d_ff
    resid_sigma = sigma / math.sqrt(2 * c.num_layers)
    counter = iter(range(10_000))

    def normal(rows, cols, s=sigma):
        return seeded_init(rows, cols, "normal", derive_seed(seed, next(counter)), s)

    embed = normal(c.vocab_size, d)
    layers = []
    for _ in range(c.num_layers):
        layers.append(LayerWeights(
            wq=normal(d, d), wk=normal(d, d), wv=normal(d, d), wo=normal(d, d, resid_sigma),
            w_in=normal(d, f), w_out=normal(f, d, resid_sigma),
            attn_norm=np.ones(d, dtype=np.float32), mlp_norm=np.ones(d, dtype=np.float32),
        ))
    return ModelWeights(c, embed, layers, normal(d, c.vocab_size))


def kv_memory_bytes(config: ModelConfig, n: int, precision_bytes: int) -> int:
    """Bytes held by an uncompressed cache of ``n`` tokens."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if precision_bytes not in (2, 4):
        raise ValueError("precision_bytes must be 2 or 4")
    return config.num_layers * config.num_heads * n * config.d_head * 2 * precision_bytes


# -- per-head primitives (used by the cached decoder) ------------------------

def head_block(w: np.ndarray, head: int, d_head: int) -> np.ndarray:
    return w[:, head * d_head:(head + 1) * d_head]


def project_qkv(weights: ModelWeights, x: np.ndarray, layer: int, head: int):
    """Q, K, V (each ``[n, d_head]``) of one head from normalised input ``x``."""
    c = weights.config
    if x.ndim != 2 or x.shape[1] != c.d_model:
        raise ShapeError(f"expected input of width {c.d_model}, got {x.shape}")
    lw = weights.layers[layer]
    return tuple(matmul(x, head_block(w, head, c.d_head)) for w in (lw.wq, lw.wk, lw.wv))


def rope_angles(positions, d_head: int) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = 10000.0 ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = pos[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def _rotate(m: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = m[..., 0::2], m[..., 1::2]
    out = np.empty_like(m)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(m: np.ndarray, positions) -> np.ndarray:
    """Rotate dimension pairs ``(2j, 2j+1)`` by ``pos * 10000**(-2j/d_head)``."""
    n, d_head = m.shape[-2], m.shape[-1]
    if d_head % 2:
        raise ShapeError("rotary encoding needs an even head width")
    if len(positions) != n:
        raise ShapeError(f"{len(positions)} positions for {n} rows")
    cos, sin = rope_angles(positions, d_head)
    return _rotate(m, cos.astype(m.dtype), sin.astype(m.dtype))


def attention_head(q: np.ndarray, cache_k: np.ndarray, cache_v: np.ndarray):
    """Single-query scaled dot-product attention; returns ``(out, scores)``."""
    if cache_k.shape[0] == 0:
        raise ValueError("attention over an empty cache")
    q = np.asarray(q).reshape(1, -1)
    logits = matmul(q, cache_k.T) / math.sqrt(q.shape[1])
    scores = softmax_rows(logits)[0]
    return scores @ cache_v, scores


def multi_head_merge(head_outputs, wo: np.ndarray) -> np.ndarray:
    d = wo.shape[0]
    concat = np.concatenate([np.asarray(h).ravel() for h in head_outputs])
    if concat.shape[0] != d:
        raise ShapeError(f"{len(head_outputs)} heads concatenate to {concat.shape[0]}, "
                         f"W_O expects {d}")
    return matmul(concat[None, :], wo)[0]


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * gain


def silu(u: np.ndarray) -> np.ndarray:
    return u / (1.0 + np.exp(-u))


# -- batched forward / backward -----------------------------------------------

MaskFn = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _split_heads(m: np.ndarray, h: int) -> np.ndarray:
    b, t, d = m.shape
    return m.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(m: np.ndarray) -> np.ndarray:
    b, h, t, dk = m.shape
    return m.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def forward(weights: ModelWeights, tokens, mask_fn: Optional[MaskFn] = None,
            keep: bool = False):
    """Full-context forward over a ``[batch, seq]`` token array.

    ``mask_fn(layer, q, k, v)`` may return a boolean ``[batch, heads, seq, seq]``
    visibility mask (post-rotary ``q``/``k``); the default is causal.
    Returns ``logits`` or ``(logits, tape)`` when ``keep`` is set.
    """
    c = weights.config
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    b, t = tokens.shape
    if t > c.max_seq_len:
        raise ValueError(f"sequence of {t} exceeds max_seq_len {c.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= c.vocab_size:
        raise ValueError("token id out of vocabulary")
    dt = weights.dtype
    scale = 1.0 / math.sqrt(c.d_head)
    causal = np.tril(np.ones((t, t), dtype=bool))
    if c.use_rope:
        cos, sin = (a.astype(dt) for a in rope_angles(np.arange(t), c.d_head))
    x = weights.embed[tokens]
    tape = {"tokens": tokens, "layers": []}
    for li, lw in enumerate(weights.layers):
        rec = {"x_in": x}
        h = rms_norm(x, lw.attn_norm, c.norm_eps)
        q = _split_heads(h @ lw.wq, c.num_heads)
        k = _split_heads(h @ lw.wk, c.num_heads)
        v = _split_heads(h @ lw.wv, c.num_heads)
        if c.use_rope:
            q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
        mask = causal if mask_fn is None else mask_fn(li, q, k, v)
        s = np.where(mask, (q @ k.transpose(0, 1, 3, 2)) * scale, -np.inf)
        s = s - s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        o = _merge_heads(p @ v)
        x = x + o @ lw.wo
        rec.update(h=h, q=q, k=k, v=v, p=p, o=o, x_mid=x)
        h2 = rms_norm(x, lw.mlp_norm, c.norm_eps)
        u = h2 @ lw.w_in
        a = silu(u)
        x = x + a @ lw.w_out
        rec.update(h2=h2, u=u, a=a)
        tape["layers"].append(rec)
    logits = x @ weights.unembed
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    tape["x_final"] = x
    return (logits, tape) if keep else logits


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean NLL over targets ``>= 0``; returns ``(loss, dlogits)``."""
    valid = targets >= 0
    count = int(valid.sum())
    if count == 0:
        raise ValueError("no valid targets in batch")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(np.where(valid, picked, 0.0))) / count
    d = np.exp(logp)
    np.put_along_axis(d, safe[..., None],
                      np.take_along_axis(d, safe[..., None], axis=-1) - 1.0, axis=-1)
    d *= (valid / count)[..., None]
    return loss, d.astype(logits.dtype)


def _rms_backward(dy, x, gain, eps):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    dgain = np.sum(dy * x * r, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = r * dxhat - (r ** 3) * x * np.mean(dxhat * x, axis=-1, keepdims=True)
    return dx, dgain


def forward_train(weights: ModelWeights, token_batch, target_batch):
    """Mean cross-entropy and its gradient with respect to every weight.

    Targets equal to ``-1`` are ignored.
    """
    tokens = np.atleast_2d(np.asarray(token_batch, dtype=np.int64))
    targets = np.atleast_2d(np.asarray(target_batch, dtype=np.int64))
    if tokens.size == 0:
        raise ValueError("empty batch")
    if tokens.shape != targets.shape:
        raise ShapeError("token and target batches differ in shape")
    c = weights.config
    if targets.max() >= c.vocab_size:
        raise ValueError("target id out of vocabulary")
    logits, tape = forward(weights, tokens, keep=True)
    loss, dlogits = cross_entropy(logits, targets)

    grads = weights.zeros_like()
    b, t = tokens.shape
    flat = lambda m: m.reshape(-1, m.shape[-1])  # noqa: E731
    grads.unembed = flat(tape["x_final"]).T @ flat(dlogits)
    dx = dlogits @ weights.unembed.T
    scale = 1.0 / math.sqrt(c.d_head)
    if c.use_rope:
        cos, sin = (a.astype(weights.dtype) for a in rope_angles(np.arange(t), c.d_head))
    for li in reversed(range(c.num_layers)):
        lw, gw, rec = weights.layers[li], grads.layers[li], tape["layers"][li]
        # MLP
        gw.w_out = flat(rec["a"]).T @ flat(dx)
        da = dx @ lw.w_out.T
        sig = 1.0 / (1.0 + np.exp(-rec["u"]))
        du = da * sig * (1.0 + rec["u"] * (1.0 - sig))
        gw.w_in = flat(rec["h2"]).T @ flat(du)
        dh2 = du @ lw.w_in.T
        dxm, gw.mlp_norm = _rms_backward(dh2, rec["x_mid"], lw.mlp_norm, c.norm_eps)
        dx = dx + dxm
        # attention
        gw.wo = flat(rec["o"]).T @ flat(dx)
        do = _split_heads(dx @ lw.wo.T, c.num_heads)
        p, q, k, v = rec["p"], rec["q"], rec["k"], rec["v"]
        dv = p.transpose(0, 1, 3, 2) @ do
        dp = do @ v.transpose(0, 1, 3, 2)
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        if c.use_rope:
            dq, dk = _rotate(dq, cos, -sin), _rotate(dk, cos, -sin)
        dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        h = flat(rec["h"])
        gw.wq, gw.wk, gw.wv = h.T @ flat(dq), h.T @ flat(dk), h.T @ flat(dv)
        dh = dq @ lw.wq.T + dk @ lw.wk.T + dv @ lw.wv.T
        dxa, gw.attn_norm = _rms_backward(dh, rec["x_in"], lw.attn_norm, c.norm_eps)
        dx = dx + dxa
    np.add.at(grads.embed, tokens.ravel(), flat(dx))
    return loss, grads
