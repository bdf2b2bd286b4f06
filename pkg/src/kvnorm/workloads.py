"""Byte-level tokenizer, synthetic retrieval tasks and evaluation harnesses."""

from __future__ import annotations

import csv
import io
import json
import math
import string
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .cache import NO_COMPRESSION, CompressionConfig, EvictionLog
from .inference import greedy_generate, prefill
from .model import ModelWeights
from .tensor import SplitMix64, derive_seed

BOS, MARKER_OPEN, MARKER_CLOSE, QUERY = 256, 257, 258, 259
SPECIAL_TOKENS = frozenset({BOS, MARKER_OPEN, MARKER_CLOSE, QUERY})
VOCAB_SIZE = 260
PUNCTUATION_TOKENS = frozenset(string.punctuation.encode())
DIGIT_TOKENS = tuple(b"0123456789")
NEEDLE_KEY_TOKENS = tuple(string.ascii_uppercase.encode())

_PHRASES = (
    b"the grass is green. ", b"the sky is blue. ", b"the sun is yellow. ",
    b"here we go. ", b"there and back again. ", b"keep going, do not stop. ",
)
_NEEDLE_FILLER = (string.ascii_lowercase + "      ,.").encode()


def tokenize(text) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(tokens: Iterable[int]) -> bytes:
    """Bytes for byte tokens; reserved specials are dropped."""
    return bytes(t for t in tokens if t < 256)


def fastgen_config(local_window: int = 8, **kw) -> CompressionConfig:
    return CompressionConfig(policy="fastgen_lite", local_window=local_window,
                             special_token_ids=SPECIAL_TOKENS,
                             punctuation_token_ids=PUNCTUATION_TOKENS, **kw)


@dataclass
class RetrievalSample:
    tokens: list[int]
    answer_span: tuple[int, int]
    passkey_tokens: list[int]
    depth_fraction: float
    task: str = "passkey"


def _filler_phrases(rng: SplitMix64, n: int) -> list[int]:
    out: list[int] = []
    while len(out) < n:
        out.extend(_PHRASES[int(rng.integers(len(_PHRASES), 1)[0])])
    return out[:n]


def _filler_random(rng: SplitMix64, n: int) -> list[int]:
    return [_NEEDLE_FILLER[i] for i in rng.integers(len(_NEEDLE_FILLER), n)]


def _split(total_len: int, fixed: int, depth_fraction: float) -> tuple[int, int]:
    if not 0.0 <= depth_fraction <= 1.0:
        raise ValueError("depth_fraction must lie in [0, 1]")
    free = total_len - fixed
    if free < 0:
        raise ValueError(f"total_len {total_len} cannot hold the {fixed} structural tokens")
    pre = int(math.floor(depth_fraction * free + 0.5))
    return pre, free - pre


def gen_passkey(seed: int, total_len: int, depth_fraction: float, key_len: int = 5
                ) -> RetrievalSample:
    """``BOS filler OPEN digits CLOSE filler QUERY``; the answer is the digits."""
    if key_len < 1:
        raise ValueError("key_len must be positive")
    rng = SplitMix64(derive_seed(seed, 1))
    pre, post = _split(total_len, key_len + 4, depth_fraction)
    key = [DIGIT_TOKENS[i] for i in rng.integers(10, key_len)]
    filler = _filler_phrases(rng, pre + post)
    tokens = [BOS] + filler[:pre] + [MARKER_OPEN] + key + [MARKER_CLOSE] + filler[pre:] + [QUERY]
    return RetrievalSample(tokens, (pre + 2, key_len), key, depth_fraction, "passkey")


def gen_needle(seed: int, total_len: int, depth_fraction: float) -> RetrievalSample:
    """``BOS noise OPEN key value CLOSE noise QUERY key``; the answer is the value."""
    rng = SplitMix64(derive_seed(seed, 2))
    pre, post = _split(total_len, 7, depth_fraction)
    key = NEEDLE_KEY_TOKENS[int(rng.integers(len(NEEDLE_KEY_TOKENS), 1)[0])]
    value = DIGIT_TOKENS[int(rng.integers(10, 1)[0])]
    filler = _filler_random(rng, pre + post)
    tokens = ([BOS] + filler[:pre] + [MARKER_OPEN, key, value, MARKER_CLOSE] + filler[pre:]
              + [QUERY, key])
    return RetrievalSample(tokens, (pre + 3, 1), [value], depth_fraction, "needle")


def planted_answer(tokens: Sequence[int], task: str = "passkey") -> list[int]:
    """Recover the planted answer by parsing the markers (a self-check)."""
    start = list(tokens).index(MARKER_OPEN) + 1
    end = list(tokens).index(MARKER_CLOSE, start)
    inner = list(tokens[start:end])
    return inner[1:] if task == "needle" else inner


def make_samples(task: str, n: int, seed: int, total_len: int, depths: Sequence[float],
                 key_len: int = 5) -> list[RetrievalSample]:
    """``n`` samples, cycling through ``depths`` in order."""
    out = []
    for i in range(n):
        s = derive_seed(seed, i)
        d = depths[i % len(depths)]
        out.append(gen_passkey(s, total_len, d, key_len) if task == "passkey"
                   else gen_needle(s, total_len, d))
    return out


@dataclass
class EvalResult:
    policy: str
    ratio: Optional[float]
    accuracy: Optional[float] = None
    perplexity: Optional[float] = None
    next_token_accuracy: Optional[float] = None
    num_samples: int = 0
    skip_layers: tuple = ()
    seed: int = 0
    achieved_ratio: Optional[float] = None
    depth: Optional[float] = None
    per_sample: list = field(default_factory=list, repr=False)

    CSV_COLUMNS = ("policy", "ratio", "skip_layers", "accuracy", "perplexity",
                   "next_token_accuracy", "num_samples", "seed")

    def csv_row(self, extra: Sequence[str] = ()) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(round(v, 12))
            return str(v)
        vals = {**asdict(self), "skip_layers": ";".join(str(i) for i in self.skip_layers)}
        return [fmt(vals[c]) for c in list(self.CSV_COLUMNS) + list(extra)]

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("per_sample")
        d["skip_layers"] = list(self.skip_layers)
        return json.dumps(d, sort_keys=True, indent=2)


def results_csv(results: Sequence[EvalResult], extra: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(EvalResult.CSV_COLUMNS) + list(extra))
    for r in results:
        w.writerow(r.csv_row(extra))
    return buf.getvalue()


def _achieved(state, compression: CompressionConfig) -> Optional[float]:
    layers = [l for l in range(len(state.caches)) if compression.compresses(l)]
    if not layers:
        return 0.0
    occ = state.occupancy()[layers]
    return float(1.0 - occ.mean() / state.t)


def _label(compression: CompressionConfig) -> tuple[str, Optional[float]]:
    return compression.policy.value, compression.ratio


def eval_retrieval(weights: ModelWeights, samples: Sequence[RetrievalSample],
                   compression: CompressionConfig = NO_COMPRESSION,
                   log: Optional[EvictionLog] = None) -> EvalResult:
    """Exact-match accuracy of greedy answers under ``compression``."""
    if not samples:
        raise ValueError("need at least one sample")
    hits, achieved = [], []
    for s in samples:
        if len(s.tokens) + len(s.passkey_tokens) - 1 > weights.config.max_seq_len:
            raise ValueError("sample longer than max_seq_len")
        state = prefill(weights, s.tokens, compression, log)
        answer = greedy_generate(weights, state, len(s.passkey_tokens))
        hits.append(answer == list(s.passkey_tokens))
        achieved.append(_achieved(state, compression))
    policy, ratio = _label(compression)
    return EvalResult(policy, ratio, accuracy=float(np.mean(hits)), num_samples=len(samples),
                      skip_layers=tuple(sorted(compression.skip_layers)), seed=compression.seed,
                      achieved_ratio=float(np.mean(achieved)), per_sample=hits)


def corpus_chunks(tokens: Sequence[int], chunk_len: int) -> list[list[int]]:
    if chunk_len < 2:
        raise ValueError("chunk_len must be at least 2")
    n = len(tokens) // chunk_len
    if n == 0:
        raise ValueError("corpus shorter than one chunk")
    return [list(tokens[i * chunk_len:(i + 1) * chunk_len]) for i in range(n)]


def eval_lm(weights: ModelWeights, corpus, chunk_len: int,
            compression: CompressionConfig = NO_COMPRESSION, max_chunks: Optional[int] = None,
            keep_logits: bool = False) -> EvalResult:
    """Teacher-forced perplexity and next-token accuracy under compression."""
    tokens = tokenize(corpus) if isinstance(corpus, (bytes, str)) else list(corpus)
    if not tokens:
        raise ValueError("empty corpus")
    chunks = corpus_chunks(tokens, chunk_len)[:max_chunks]
    nll, hits, dumped = [], [], []
    for chunk in chunks:
        state = prefill(weights, chunk, compression)
        logits = state.prefill_logits[:-1].astype(np.float64)
        targets = np.asarray(chunk[1:])
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        nll.extend(-logp[np.arange(len(targets)), targets])
        hits.extend(np.argmax(logits, axis=1) == targets)
        if keep_logits:
            dumped.append(state.prefill_logits)
    policy, ratio = _label(compression)
    res = EvalResult(policy, ratio, perplexity=float(np.exp(np.mean(nll))),
                     next_token_accuracy=float(np.mean(hits)), num_samples=len(chunks),
                     skip_layers=tuple(sorted(compression.skip_layers)), seed=compression.seed)
    if keep_logits:
        res.per_sample = dumped
    return res
