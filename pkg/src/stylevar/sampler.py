"""Scale-wise autoregressive sampling and teacher-forced scoring.

Each trajectory owns a Philox counter-based generator keyed by its seed, so
a group of rollouts gives the same tokens whatever the chunking, thread
count or execution order. Rollouts are batched in fixed-size chunks; the
chunk size (not the worker count) is the only thing that can change the
floating-point path.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import StyleVAR
from .tokenizer import MultiScaleTokenizer, TokenHierarchy, interpolate


@dataclass
class SamplerConfig:
    top_k: int = 900
    top_p: float = 0.96
    temperature: float = 1.0
    greedy: bool = False
    seed: int = 0
    chunk_size: int = 16
    workers: int = 1

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.chunk_size < 1 or self.workers < 1:
            raise ValueError("chunk_size and workers must be >= 1")


@dataclass
class Conditions:
    """Pre-tokenized conditioning for one (content, style) pair."""

    content_image: np.ndarray
    style_rows: np.ndarray
    content_rows: np.ndarray

    @classmethod
    def build(cls, tokenizer: MultiScaleTokenizer, content: np.ndarray, style: np.ndarray) -> "Conditions":
        return cls(np.asarray(content, dtype=np.float64),
                   tokenizer.condition_inputs(tokenizer.tokenize(style)),
                   tokenizer.condition_inputs(tokenizer.tokenize(content)))


@dataclass
class Trajectory:
    tokens: np.ndarray          # (L,) flat token ids, scale-major
    logp_sample: np.ndarray     # log-prob under the filtered distribution actually sampled from
    logp_full: np.ndarray       # log-prob under the unfiltered, untempered policy
    image: np.ndarray
    f_hat: np.ndarray
    seed: int
    reward: Optional[float] = None

    def hierarchy(self, tokenizer: MultiScaleTokenizer) -> TokenHierarchy:
        return TokenHierarchy.from_flat(self.tokens, tokenizer.schedule)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "reward": self.reward, "tokens": self.tokens.tolist(),
                           "logp_sample": self.logp_sample.tolist(),
                           "logp_full": self.logp_full.tolist()})


def filter_top_k_top_p(probs: np.ndarray, top_k: int, top_p: float) -> np.ndarray:
    """Top-k then nucleus filtering over the last axis, renormalized.

    Ranking is by descending probability with ties going to the lower token
    index. After top-k truncation the kept mass is renormalized and the
    smallest prefix whose cumulative mass is >= ``top_p`` survives.
    """
    probs = np.asarray(probs, dtype=np.float64)
    total = probs.sum(axis=-1)
    if np.any(total <= 0.0):
        raise ValueError("cannot filter an all-zero distribution")
    if np.any(np.abs(total - 1.0) > 1e-9):
        raise ValueError("probabilities must sum to 1 within 1e-9")
    V = probs.shape[-1]
    k = min(int(top_k), V)
    if k >= V and top_p >= 1.0:
        return probs.copy()
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    keep = np.arange(V) < k
    sorted_p = np.where(keep, sorted_p, 0.0)
    if top_p < 1.0:
        sorted_p = sorted_p / sorted_p.sum(axis=-1, keepdims=True)
        cum_before = np.cumsum(sorted_p, axis=-1) - sorted_p
        keep = keep & (cum_before < top_p)
        sorted_p = np.where(keep, sorted_p, 0.0)
    out = np.zeros_like(probs)
    np.put_along_axis(out, order, sorted_p, axis=-1)
    return out / out.sum(axis=-1, keepdims=True)


def trajectory_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def _sample_rows(dist: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one index per row of ``dist``."""
    cdf = np.cumsum(dist, axis=-1)
    u = rng.random(len(dist)) * cdf[:, -1]
    idx = np.array([np.searchsorted(c, x, side="right") for c, x in zip(cdf, u)])
    return np.minimum(idx, dist.shape[-1] - 1)


def _generate_chunk(model: StyleVAR, tokenizer: MultiScaleTokenizer, cond: Conditions,
                    seeds: Sequence[int], cfg: SamplerConfig, mode: str) -> List[Trajectory]:
    sched = tokenizer.schedule
    G, L, d = len(seeds), sched.total_tokens, tokenizer.dim
    K = sched.final_side
    rngs = [trajectory_rng(s) for s in seeds]
    images = np.broadcast_to(cond.content_image, (G, *cond.content_image.shape))
    style = np.broadcast_to(cond.style_rows, (G, L, d))
    content = np.broadcast_to(cond.content_rows, (G, L, d))
    inputs = np.zeros((G, L, d))
    tokens = np.zeros((G, L), dtype=np.int64)
    logp_s = np.zeros((G, L))
    logp_f = np.zeros((G, L))
    f_hat = np.zeros((G, K, K, d))
    offs = sched.offsets
    with ad.no_grad():
        for k, side in enumerate(sched.sides):
            lo, hi = offs[k], offs[k + 1]
            logits = model.forward(inputs[:, :hi], images, style[:, :hi], content[:, :hi], mode=mode)
            lg = logits.data[:, lo:hi]
            full = lg - lg.max(axis=-1, keepdims=True)
            full = full - np.log(np.exp(full).sum(axis=-1, keepdims=True))
            if cfg.greedy:
                idx = lg.argmax(axis=-1)
                dist = None
            else:
                z = lg / cfg.temperature
                p = np.exp(z - z.max(axis=-1, keepdims=True))
                p /= p.sum(axis=-1, keepdims=True)
                dist = filter_top_k_top_p(p, cfg.top_k, cfg.top_p)
                idx = np.stack([_sample_rows(dist[g], rngs[g]) for g in range(G)])
            tokens[:, lo:hi] = idx
            logp_f[:, lo:hi] = np.take_along_axis(full, idx[..., None], axis=-1)[..., 0]
            if dist is None:
                logp_s[:, lo:hi] = 0.0
            else:
                with np.errstate(divide="ignore"):
                    logp_s[:, lo:hi] = np.log(np.take_along_axis(dist, idx[..., None], axis=-1)[..., 0])
            z_k = tokenizer.codebook.lookup(idx.reshape(G, side, side))
            f_hat = tokenizer._accumulate(f_hat, z_k, K)
            if k + 1 < sched.num_scales:
                nxt = sched.sides[k + 1]
                inputs[:, hi:offs[k + 2]] = interpolate(f_hat, nxt, nxt).reshape(G, nxt * nxt, d)
    imgs = tokenizer.decode_features(f_hat)
    return [Trajectory(tokens[g], logp_s[g], logp_f[g], imgs[g], f_hat[g], int(seeds[g]))
            for g in range(G)]


def generate(model: StyleVAR, tokenizer: MultiScaleTokenizer, cond: Conditions,
             seeds: Sequence[int], cfg: SamplerConfig, mode: Optional[str] = None) -> List[Trajectory]:
    """Sample one trajectory per seed for a single (content, style) pair."""
    if model.schedule.sides != tokenizer.schedule.sides:
        raise ValueError(f"model schedule {model.schedule.sides} != tokenizer schedule "
                         f"{tokenizer.schedule.sides}")
    if model.cfg.vocab_size != tokenizer.vocab_size:
        raise ValueError(f"model vocabulary {model.cfg.vocab_size} != codebook size {tokenizer.vocab_size}")
    mode = mode or model.policy_mode
    seeds = [int(s) for s in seeds]
    chunks = [seeds[i:i + cfg.chunk_size] for i in range(0, len(seeds), cfg.chunk_size)]
    run = lambda ch: _generate_chunk(model, tokenizer, cond, ch, cfg, mode)
    if cfg.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(ch) for ch in chunks]
    return [t for part in parts for t in part]


def rollout_seeds(base_seed: int, step: int, group: int) -> List[int]:
    ss = np.random.SeedSequence([int(base_seed), int(step)])
    return [int(x) for x in ss.generate_state(group, dtype=np.uint32)]


def teacher_forced_logprobs(model: StyleVAR, tokenizer: MultiScaleTokenizer, tokens: np.ndarray,
                            cond: Conditions, mode: Optional[str] = None) -> Tensor:
    """``log pi(a_t | state_t)`` for every token of ``tokens`` ``(G, L)`` in one pass.

    Inputs to scale k are built from the sampled tokens of scales < k. The
    result records a graph when gradients are enabled.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    G, L = tokens.shape
    d = tokenizer.dim
    inputs = tokenizer.next_scale_inputs(TokenHierarchy.from_flat(tokens, tokenizer.schedule))
    images = np.broadcast_to(cond.content_image, (G, *cond.content_image.shape))
    logits = model.forward(inputs, images, np.broadcast_to(cond.style_rows, (G, L, d)),
                           np.broadcast_to(cond.content_rows, (G, L, d)), mode=mode)
    return ad.pick(ad.log_softmax(logits, axis=-1), tokens)
