"""Per-(layer, head) KV storage and budgeted eviction policies.

Selection rules, shared by every caller (decoder, analysis, audits):

* ``keep_low_l2`` evicts the largest key norms first, the earlier position
  first among equal norms.
* ``keep_high_l2`` evicts the smallest key norms first, same tie-break.
* ``oracle_attention`` evicts the smallest attention scores first, same
  tie-break. It needs the attention row of the step, so it is a reference
  policy only.
* ``random`` draws uniformly without replacement from a stream derived from
  ``(seed, layer, head, step)``.
* ``fastgen_lite`` keeps special tokens, punctuation and a local window and
  evicts everything else; it takes no budget.

The ``protect_recent`` newest entries are never candidates for the budgeted
policies.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .tensor import SplitMix64, derive_seed


class Policy(str, Enum):
    NONE = "none"
    KEEP_LOW_L2 = "keep_low_l2"
    KEEP_HIGH_L2 = "keep_high_l2"
    RANDOM = "random"
    ORACLE_ATTENTION = "oracle_attention"
    FASTGEN_LITE = "fastgen_lite"

    @property
    def budgeted(self) -> bool:
        return self not in (Policy.NONE, Policy.FASTGEN_LITE)


BUDGETED_POLICIES = tuple(p for p in Policy if p.budgeted)

# CLI spellings
POLICY_ALIASES = {
    "none": Policy.NONE,
    "l2-low": Policy.KEEP_LOW_L2,
    "l2-high": Policy.KEEP_HIGH_L2,
    "random": Policy.RANDOM,
    "oracle": Policy.ORACLE_ATTENTION,
    "fastgen": Policy.FASTGEN_LITE,
}


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class CacheEntry:
    key: np.ndarray
    value: np.ndarray
    key_norm: float
    position: int
    token_id: int


class LayerHeadCache:
    """Columnar store of cache entries for one (layer, head).

    Entries are kept in position order; ``keys[:size]`` etc. are the live rows.
    """

    def __init__(self, layer: int, head: int, d_head: int, dtype=np.float32,
                 capacity: int = 64):
        self.layer = layer
        self.head = head
        self.size = 0
        self._keys = np.zeros((capacity, d_head), dtype=dtype)
        self._values = np.zeros((capacity, d_head), dtype=dtype)
        self._norms = np.zeros(capacity, dtype=np.float64)
        self._positions = np.zeros(capacity, dtype=np.int64)
        self._tokens = np.zeros(capacity, dtype=np.int64)

    def __len__(self) -> int:
        return self.size

    @property
    def keys(self) -> np.ndarray:
        return self._keys[:self.size]

    @property
    def values(self) -> np.ndarray:
        return self._values[:self.size]

    @property
    def key_norms(self) -> np.ndarray:
        return self._norms[:self.size]

    @property
    def positions(self) -> np.ndarray:
        return self._positions[:self.size]

    @property
    def token_ids(self) -> np.ndarray:
        return self._tokens[:self.size]

    @property
    def entries(self) -> list[CacheEntry]:
        return [CacheEntry(self.keys[i].copy(), self.values[i].copy(), float(self.key_norms[i]),
                           int(self.positions[i]), int(self.token_ids[i]))
                for i in range(self.size)]

    def _reserve(self, extra: int) -> None:
        need = self.size + extra
        cap = self._keys.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in ("_keys", "_values", "_norms", "_positions", "_tokens"):
            old = getattr(self, name)
            grown = np.zeros((new_cap,) + old.shape[1:], dtype=old.dtype)
            grown[:self.size] = old[:self.size]
            setattr(self, name, grown)

    def append(self, key, value, position: int, token_id: int) -> "LayerHeadCache":
        return self.extend(np.asarray(key)[None], np.asarray(value)[None],
                           [position], [token_id])

    def extend(self, keys, values, positions, token_ids) -> "LayerHeadCache":
        positions = np.asarray(positions, dtype=np.int64)
        n = len(positions)
        if n == 0:
            return self
        last = self._positions[self.size - 1] if self.size else -1
        if positions[0] <= last or np.any(np.diff(positions) <= 0):
            raise CacheError("cache positions must be strictly increasing")
        self._reserve(n)
        sl = slice(self.size, self.size + n)
        self._keys[sl] = keys
        self._values[sl] = values
        k64 = self._keys[sl].astype(np.float64)
        self._norms[sl] = np.sqrt(np.einsum("ij,ij->i", k64, k64))
        self._positions[sl] = positions
        self._tokens[sl] = token_ids
        self.size += n
        return self

    def set_key(self, position: int, key) -> None:
        i = self.index_of(position)
        self._keys[i] = key
        k64 = self._keys[i].astype(np.float64)
        self._norms[i] = float(np.sqrt(k64 @ k64))

    def index_of(self, position: int) -> int:
        i = int(np.searchsorted(self.positions, position))
        if i >= self.size or self._positions[i] != position:
            raise CacheError(f"position {position} is not cached")
        return i

    def remove_indices(self, idx: Sequence[int]) -> None:
        if len(idx) == 0:
            return
        keep = np.ones(self.size, dtype=bool)
        keep[list(idx)] = False
        n = int(keep.sum())
        for name in ("_keys", "_values", "_norms", "_positions", "_tokens"):
            arr = getattr(self, name)
            arr[:n] = arr[:self.size][keep]
        self.size = n

    def snapshot(self) -> tuple:
        return (self.positions.copy(), self.token_ids.copy(), self.key_norms.copy())


@dataclass(frozen=True)
class EvictionOutcome:
    evicted_positions: tuple[int, ...] = ()
    retained_count: int = 0

    @property
    def pre_occupancy(self) -> int:
        return self.retained_count + len(self.evicted_positions)


PREFILL_EVICTION_MODES = ("stream", "end")


@dataclass(frozen=True)
class CompressionConfig:
    policy: Policy = Policy.NONE
    budget: Optional[int] = None
    ratio: Optional[float] = None
    skip_layers: frozenset = frozenset({0, 1})
    protect_recent: int = 1
    local_window: int = 0
    special_token_ids: frozenset = frozenset()
    punctuation_token_ids: frozenset = frozenset()
    seed: int = 0
    head_budgets: Mapping = field(default_factory=dict)
    # "stream": evict after every prompt position; "end": one pass once the prompt is encoded
    prefill_eviction: str = "stream"

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        for name in ("skip_layers", "special_token_ids", "punctuation_token_ids"):
            object.__setattr__(self, name, frozenset(int(i) for i in getattr(self, name)))
        has_budget, has_ratio = self.budget is not None, self.ratio is not None
        if self.policy.budgeted:
            if has_budget == has_ratio:
                raise ValueError(f"policy {self.policy.value} needs exactly one of budget/ratio")
        elif has_budget or has_ratio:
            raise ValueError(f"policy {self.policy.value} takes no budget or ratio")
        if has_ratio and not 0.0 <= self.ratio < 1.0:
            raise ValueError("ratio must lie in [0, 1)")
        if self.prefill_eviction not in PREFILL_EVICTION_MODES:
            raise ValueError(f"prefill_eviction must be one of {PREFILL_EVICTION_MODES}")
        if self.protect_recent < 0 or self.local_window < 0:
            raise ValueError("protect_recent and local_window must be non-negative")
        if has_budget:
            if self.budget < 0:
                raise ValueError("budget must be non-negative")
            if self.budget < self.protect_recent:
                raise ValueError("budget is smaller than protect_recent")
        for b in self.head_budgets.values():
            if b < self.protect_recent:
                raise ValueError("per-head budget is smaller than protect_recent")

    @property
    def enabled(self) -> bool:
        return self.policy is not Policy.NONE

    def compresses(self, layer: int) -> bool:
        return self.enabled and layer not in self.skip_layers

    def budget_for(self, layer: int, head: int, seen: int) -> int:
        """Retention target after ``seen`` tokens have been appended."""
        if (layer, head) in self.head_budgets:
            return int(self.head_budgets[(layer, head)])
        if self.budget is not None:
            return self.budget
        # guard against e.g. (1 - 0.7) * 10 = 3.0000000000000004
        target = math.ceil((1.0 - self.ratio) * seen - 1e-9)
        return max(target, self.protect_recent)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.value, "budget": self.budget, "ratio": self.ratio,
            "skip_layers": sorted(self.skip_layers), "protect_recent": self.protect_recent,
            "local_window": self.local_window,
            "special_token_ids": sorted(self.special_token_ids),
            "punctuation_token_ids": sorted(self.punctuation_token_ids),
            "seed": self.seed, "prefill_eviction": self.prefill_eviction,
        }


NO_COMPRESSION = CompressionConfig()


# -- selection (pure) ---------------------------------------------------------

def _order(primary: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Indices sorted by ``primary`` ascending, earlier position first on ties."""
    return np.lexsort((positions, primary))


def select_victims(policy: Policy, key_norms, positions, m: int, protect_recent: int = 0,
                   scores=None, rng_seed: Optional[int] = None) -> list[int]:
    """Storage indices of the ``m`` entries ``policy`` would evict."""
    n = len(positions)
    pool = max(n - protect_recent, 0)
    if m > pool:
        raise CacheError(f"cannot evict {m} of {pool} unprotected entries")
    if m == 0:
        return []
    norms = np.asarray(key_norms, dtype=np.float64)[:pool]
    pos = np.asarray(positions)[:pool]
    if policy is Policy.KEEP_LOW_L2:
        order = _order(-norms, pos)
    elif policy is Policy.KEEP_HIGH_L2:
        order = _order(norms, pos)
    elif policy is Policy.ORACLE_ATTENTION:
        if scores is None or len(scores) != n:
            raise CacheError("oracle eviction needs one attention score per entry")
        order = _order(np.asarray(scores, dtype=np.float64)[:pool], pos)
    elif policy is Policy.RANDOM:
        return sorted(SplitMix64(rng_seed or 0).choice(range(pool), m))
    else:
        raise CacheError(f"policy {policy.value} has no budgeted selection")
    return sorted(int(i) for i in order[:m])


def fastgen_lite_keep(token_ids, positions, config: CompressionConfig) -> np.ndarray:
    token_ids = np.asarray(token_ids)
    n = len(token_ids)
    keep = np.isin(token_ids, list(config.special_token_ids | config.punctuation_token_ids))
    if config.local_window:
        keep[max(n - config.local_window, 0):] = True
    return keep


# -- mutation -----------------------------------------------------------------

def _apply(cache: LayerHeadCache, idx: Sequence[int]) -> EvictionOutcome:
    evicted = tuple(int(cache.positions[i]) for i in idx)
    cache.remove_indices(idx)
    return EvictionOutcome(evicted, cache.size)


def random_stream_seed(config: CompressionConfig, layer: int, head: int, step: int) -> int:
    return derive_seed(config.seed, layer, head, step)


def planned_victims(cache: LayerHeadCache, config: CompressionConfig, step: int = 0,
                    scores=None, seen: Optional[int] = None) -> list[int]:
    """Storage indices ``evict`` would remove, without touching the cache."""
    if not config.compresses(cache.layer):
        return []
    if config.policy is Policy.FASTGEN_LITE:
        keep = fastgen_lite_keep(cache.token_ids, cache.positions, config)
        return [int(i) for i in np.flatnonzero(~keep)]
    seen = cache.size if seen is None else seen
    budget = config.budget_for(cache.layer, cache.head, seen)
    m = cache.size - budget
    if m <= 0:
        return []
    return select_victims(config.policy, cache.key_norms, cache.positions, m,
                          config.protect_recent, scores,
                          random_stream_seed(config, cache.layer, cache.head, step))


def evict(cache: LayerHeadCache, config: CompressionConfig, step: int = 0, scores=None,
          seen: Optional[int] = None) -> EvictionOutcome:
    """Bring ``cache`` down to its budget under ``config.policy``.

    ``seen`` is the number of tokens consumed so far (defaults to occupancy);
    ratio budgets are ``ceil((1 - ratio) * seen)``. ``scores`` is the attention
    row of this step, required by ``oracle_attention``.
    """
    return _apply(cache, planned_victims(cache, config, step, scores, seen))


def oracle_evict(cache: LayerHeadCache, attention_scores, m: int) -> EvictionOutcome:
    if len(attention_scores) != cache.size:
        raise CacheError("attention scores do not match cache occupancy")
    if not 0 <= m <= cache.size:
        raise CacheError(f"m={m} outside [0, {cache.size}]")
    idx = select_victims(Policy.ORACLE_ATTENTION, cache.key_norms, cache.positions, m,
                         0, attention_scores)
    return _apply(cache, idx)


def fastgen_lite_evict(cache: LayerHeadCache, config: CompressionConfig) -> EvictionOutcome:
    keep = fastgen_lite_keep(cache.token_ids, cache.positions, config)
    return _apply(cache, [int(i) for i in np.flatnonzero(~keep)])


def compression_ratio(pre_occupancy: int, post_occupancy: int) -> float:
    if pre_occupancy <= 0:
        raise ValueError("pre-compression occupancy must be positive")
    if post_occupancy > pre_occupancy:
        raise ValueError("post occupancy exceeds pre occupancy")
    return 1.0 - post_occupancy / pre_occupancy


# -- audit ----------------------------------------------------------------------

def counterfactual_losses(cache: LayerHeadCache, scores, config: CompressionConfig,
                          step: int, m: int, policies: Iterable[Policy] = BUDGETED_POLICIES
                          ) -> dict[str, float]:
    """Attention mass each policy would drop evicting ``m`` entries from this cache."""
    scores = np.asarray(scores, dtype=np.float64)
    out = {}
    for p in policies:
        idx = select_victims(p, cache.key_norms, cache.positions, m, config.protect_recent,
                             scores, random_stream_seed(config, cache.layer, cache.head, step))
        out[p.value] = math.fsum(scores[idx])
    return out


@dataclass
class EvictionEvent:
    step: int
    layer: int
    head: int
    policy: str
    pre_occupancy: int
    post_occupancy: int
    evicted_positions: tuple
    attention_loss: Optional[float] = None
    counterfactual: Optional[dict] = None


class EvictionLog:
    """Collects eviction events; serialises to the audit CSV."""

    COLUMNS = ("step", "layer", "head", "policy", "pre_occupancy", "post_occupancy",
               "evicted_positions")

    def __init__(self, audit: bool = False, keep_empty: bool = False):
        self.audit = audit
        self.keep_empty = keep_empty
        self.events: list[EvictionEvent] = []

    def record(self, event: EvictionEvent) -> None:
        if event.evicted_positions or self.keep_empty:
            self.events.append(event)

    def ordered(self) -> list[EvictionEvent]:
        return sorted(self.events, key=lambda e: (e.step, e.layer, e.head))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for e in self.ordered():
            w.writerow([e.step, e.layer, e.head, e.policy, e.pre_occupancy, e.post_occupancy,
                        ";".join(str(p) for p in e.evicted_positions)])
        return buf.getvalue()


def evict_logged(cache: LayerHeadCache, config: CompressionConfig, step: int, scores,
                 seen: int, log: Optional[EvictionLog]) -> EvictionOutcome:
    """``evict`` plus attention-loss bookkeeping into ``log``."""
    idx = planned_victims(cache, config, step, scores, seen)
    if log is None:
        return _apply(cache, idx)
    pre = cache.size
    loss = cf = None
    if scores is not None:
        loss = math.fsum(np.asarray(scores, dtype=np.float64)[idx])
        if log.audit and idx:
            if config.policy is Policy.FASTGEN_LITE:
                ref = select_victims(Policy.ORACLE_ATTENTION, cache.key_norms, cache.positions,
                                     len(idx), 0, scores)
                cf = {Policy.ORACLE_ATTENTION.value: math.fsum(np.asarray(scores, dtype=np.float64)[ref]),
                      Policy.FASTGEN_LITE.value: loss}
            else:
                cf = counterfactual_losses(cache, scores, config, step, len(idx))
    out = _apply(cache, idx)
    log.record(EvictionEvent(step, cache.layer, cache.head, config.policy.value, pre,
                             out.retained_count, out.evicted_positions, loss, cf))
    return out
