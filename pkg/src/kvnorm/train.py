"""Adam training loop for the toy models."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np

from .model import ModelConfig, ModelWeights, forward_train, init_weights
from .tensor import SplitMix64, derive_seed
from .workloads import gen_needle, gen_passkey, tokenize

log = logging.getLogger(__name__)

TASKS = ("passkey", "needle", "lm")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup: int = 100
    seed: int = 0
    task: str = "passkey"
    min_len: int = 32
    max_len: int = 128
    key_len: int = 5
    answer_only: bool = True
    corpus_path: Optional[str] = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.eps <= 0:
            raise ValueError("steps, batch_size, lr and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if not 2 <= self.min_len <= self.max_len:
            raise ValueError("need 2 <= min_len <= max_len")
        if self.task == "lm" and not self.corpus_path:
            raise ValueError("the lm task needs corpus_path")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def retrieval_batch(cfg: TrainConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    rng = SplitMix64(derive_seed(cfg.seed, 0x7EA1, step))
    length = cfg.min_len + int(rng.integers(cfg.max_len - cfg.min_len + 1, 1)[0])
    depths = rng.uniform(cfg.batch_size)
    xs, ys = [], []
    for i in range(cfg.batch_size):
        s = derive_seed(cfg.seed, step, i)
        if cfg.task == "passkey":
            sample = gen_passkey(s, length, float(depths[i]), cfg.key_len)
        else:
            sample = gen_needle(s, length, float(depths[i]))
        seq = sample.tokens + sample.passkey_tokens
        target = np.asarray(seq[1:])
        if cfg.answer_only:
            target[:len(sample.tokens) - 1] = -1
        xs.append(seq[:-1])
        ys.append(target)
    return np.asarray(xs), np.asarray(ys)


def lm_batch(cfg: TrainConfig, corpus: np.ndarray, step: int) -> tuple[np.ndarray, np.ndarray]:
    rng = SplitMix64(derive_seed(cfg.seed, 0x1A, step))
    n = cfg.max_len + 1
    if len(corpus) < n:
        raise ValueError("corpus shorter than one training window")
    starts = rng.integers(len(corpus) - n + 1, cfg.batch_size)
    windows = np.stack([corpus[s:s + n] for s in starts])
    return windows[:, :-1], windows[:, 1:]


class Adam:
    def __init__(self, weights: ModelWeights, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(a) for _, a in weights.named_arrays()]
        self.v = [np.zeros_like(a) for _, a in weights.named_arrays()]
        self.t = 0

    def lr_at(self, step: int) -> float:
        c = self.cfg
        if step < c.warmup:
            return c.lr * (step + 1) / c.warmup
        frac = (step - c.warmup) / max(c.steps - c.warmup, 1)
        return c.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))

    def update(self, weights: ModelWeights, grads: ModelWeights, step: int) -> float:
        c = self.cfg
        gs = [g for _, g in grads.named_arrays()]
        gnorm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in gs))
        clip = min(1.0, c.clip_norm / (gnorm + 1e-12))
        self.t += 1
        lr = self.lr_at(step)
        bc1, bc2 = 1 - c.beta1 ** self.t, 1 - c.beta2 ** self.t
        for (_, w), g, m, v in zip(weights.named_arrays(), gs, self.m, self.v):
            g = g * np.float32(clip)
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            w -= (lr / bc1) * m / (np.sqrt(v / bc2) + c.eps)
        return gnorm


def train(model_config: ModelConfig, train_config: TrainConfig,
          init: Optional[ModelWeights] = None,
          on_step: Optional[Callable[[int, float], None]] = None
          ) -> tuple[ModelWeights, list[tuple[int, float]]]:
    """Train from the seeded initialisation; returns weights and the loss curve."""
    cfg = train_config
    weights = init.copy() if init is not None else init_weights(model_config, seed=cfg.seed)
    opt = Adam(weights, cfg)
    corpus = None
    if cfg.task == "lm":
        with open(cfg.corpus_path, "rb") as fh:
            corpus = np.asarray(tokenize(fh.read()), dtype=np.int64)
    curve: list[tuple[int, float]] = []
    for step in range(cfg.steps):
        if corpus is not None:
            x, y = lm_batch(cfg, corpus, step)
        else:
            x, y = retrieval_batch(cfg, step)
        loss, grads = forward_train(weights, x, y)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step}")
        opt.update(weights, grads, step)
        curve.append((step, loss))
        if on_step is not None:
            on_step(step, loss)
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, loss)
    return weights, curve


def loss_curve_csv(curve: Sequence[tuple[int, float]]) -> str:
    return "step,loss\n" + "".join(f"{s},{l!r}\n" for s, l in curve)
