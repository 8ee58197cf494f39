"""Group-relative policy optimization over LoRA adapters.

The reference policy is the base weights (adapters bypassed). Old-policy
log-probabilities come straight from the rollout, which was sampled by the
current policy before the update, so no snapshot copy of the model is kept.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Triplet
from .metrics import ProxyFeatureNet, reward as perceptual_reward
from .model import StyleVAR
from .optim import AdamWState, adamw_step, clip_global_norm
from .sampler import Conditions, SamplerConfig, Trajectory, generate, rollout_seeds, teacher_forced_logprobs
from .tokenizer import MultiScaleTokenizer, ScaleSchedule


class RewardError(RuntimeError):
    pass


@dataclass
class GrpoConfig:
    group_size: int = 16
    clip_eps: float = 0.2
    kl_beta: float = 0.1
    panw_alpha: float = 0.7
    eps_std: float = 1e-4
    lr: float = 1e-5
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0
    steps: int = 500
    seed: int = 0
    # merge-reference schedule
    ema_decay: float = 0.9
    merge_gain: float = 0.05
    merge_patience: int = 50
    merge_cooldown: int = 300
    emergency_kl: float = 2.0
    emergency_cooldown: int = 50

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")
        if not 0.0 <= self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must lie in [0, 1), got {self.clip_eps}")
        if self.eps_std <= 0:
            raise ValueError("eps_std must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")


# -- estimator pieces -------------------------------------------------------

def advantage(rewards: np.ndarray, eps_std: float = 1e-4) -> np.ndarray:
    """Group-standardized rewards, using the population standard deviation."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 1:
        raise ValueError("advantage expects a 1-D reward vector")
    if not np.all(np.isfinite(r)):
        raise RewardError("non-finite reward in group")
    return (r - r.mean()) / (r.std() + eps_std)


def panw_scale_weights(schedule: ScaleSchedule, alpha: float) -> np.ndarray:
    """Per-token weight at each scale: ``n_k**-alpha / sum_j n_j**(1-alpha)``.

    The token-level weights sum to one over a trajectory.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    n = np.asarray(schedule.token_counts, dtype=np.float64)
    raw = n ** -alpha
    return raw / float((n * raw).sum())


def panw_weights(schedule: ScaleSchedule, alpha: float) -> np.ndarray:
    """Per-token weights, shape ``(L,)``."""
    return panw_scale_weights(schedule, alpha)[schedule.scale_index()]


def panw_table(schedule: ScaleSchedule, alpha: float = 0.7) -> List[Dict[str, float]]:
    """Per-scale rows: side, token count, per-token weight (x100) and total scale mass."""
    w = panw_scale_weights(schedule, alpha)
    rows = []
    for side, n, wk in zip(schedule.sides, schedule.token_counts, w):
        rows.append({"side": side, "tokens": n, "per_token_x100": 100.0 * wk, "scale_mass": n * wk})
    return rows


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def k3_kl(logp_ref, logp_theta) -> Tensor:
    """Per-token ``exp(d) - d - 1`` with ``d = logp_ref - logp_theta``; never negative."""
    d = _t(logp_ref) - _t(logp_theta)
    return ad.exp(d) - d - 1.0


def clipped_surrogate(ratio, adv, clip_eps: float) -> Tensor:
    """Per-token PPO loss ``-min(r*A, clip(r, 1-eps, 1+eps)*A)``."""
    r, a = _t(ratio), _t(adv)
    return -ad.minimum(r * a, ad.clip(r, 1.0 - clip_eps, 1.0 + clip_eps) * a)


@dataclass
class LossParts:
    loss: Tensor
    pg: float
    kl: float            # beta-free PANW-weighted KL, averaged over the group
    clip_fraction: float


def grpo_loss(logp_theta: Tensor, logp_old: np.ndarray, logp_ref: np.ndarray, adv: np.ndarray,
              weights: np.ndarray, clip_eps: float, kl_beta: float) -> LossParts:
    """``(1/G) sum_i sum_t w_t [pg_it + beta * kl_it]`` for ``(G, L)`` log-prob arrays."""
    logp_theta = _t(logp_theta)
    G, L = logp_theta.shape
    if np.shape(logp_old) != (G, L) or np.shape(logp_ref) != (G, L):
        raise ValueError("log-prob arrays must share shape (G, L)")
    if np.shape(weights) != (L,) or np.shape(adv) != (G,):
        raise ValueError(f"weights must be ({L},) and advantages ({G},)")
    ratio = ad.exp(logp_theta - Tensor(np.asarray(logp_old, dtype=np.float64)))
    pg_tok = clipped_surrogate(ratio, np.asarray(adv, dtype=np.float64)[:, None], clip_eps)
    kl_tok = k3_kl(np.asarray(logp_ref, dtype=np.float64), logp_theta)
    w = Tensor(np.asarray(weights, dtype=np.float64))
    pg = ad.sum_(pg_tok * w) / float(G)
    kl = ad.sum_(kl_tok * w) / float(G)
    loss = pg + kl * kl_beta
    clipped = np.abs(ratio.data - 1.0) > clip_eps
    return LossParts(loss, float(pg.data), float(kl.data), float(clipped.mean()))


# -- merge-reference state machine -------------------------------------------

@dataclass
class MergeState:
    ema: Optional[float] = None
    baseline: Optional[float] = None
    steps_since_merge: int = 0
    steps_above: int = 0
    last_kl: float = 0.0
    merges: List[Dict[str, Union[int, float, str]]] = field(default_factory=list)

    def observe(self, mean_reward: float, raw_kl: float, decay: float) -> None:
        """Fold this step's group-mean reward into the EMA and tick the counters."""
        if self.ema is None:
            self.ema = float(mean_reward)
        else:
            self.ema = decay * self.ema + (1.0 - decay) * float(mean_reward)
        if self.baseline is None:
            self.baseline = self.ema
        self.last_kl = float(raw_kl)
        self.steps_since_merge += 1

    def to_meta(self) -> dict:
        return {"ema": self.ema, "baseline": self.baseline, "steps_since_merge": self.steps_since_merge,
                "steps_above": self.steps_above, "last_kl": self.last_kl, "merges": self.merges}

    @classmethod
    def from_meta(cls, d: dict) -> "MergeState":
        return cls(**d)


def maybe_merge_reference(state: MergeState, cfg: GrpoConfig, step: int = 0,
                          model: Optional[StyleVAR] = None) -> Optional[str]:
    """Decide whether to fold the adapters into the reference after this step.

    Call after :meth:`MergeState.observe`. A normal merge needs the EMA to
    have stayed above ``baseline + merge_gain`` for ``merge_patience``
    consecutive steps and at least ``merge_cooldown`` steps since the last
    merge. An emergency merge fires when the raw KL exceeds
    ``emergency_kl`` and ``emergency_cooldown`` steps have passed. Returns
    ``"normal"``, ``"emergency"`` or ``None``.
    """
    if state.ema is None:
        raise RuntimeError("maybe_merge_reference called before observe()")
    if state.ema > state.baseline + cfg.merge_gain:
        state.steps_above += 1
    else:
        state.steps_above = 0
    kind = None
    if state.last_kl > cfg.emergency_kl and state.steps_since_merge >= cfg.emergency_cooldown:
        kind = "emergency"
    elif state.steps_above >= cfg.merge_patience and state.steps_since_merge >= cfg.merge_cooldown:
        kind = "normal"
    if kind is None:
        return None
    state.merges.append({"step": int(step), "kind": kind, "ema": state.ema, "baseline": state.baseline,
                         "kl": state.last_kl, "steps_since_merge": state.steps_since_merge})
    state.baseline = state.ema
    state.steps_since_merge = 0
    state.steps_above = 0
    if model is not None:
        model.lora_merge()
    return kind


# -- training step ----------------------------------------------------------

RewardFn = Callable[[Sequence[Trajectory], Triplet], np.ndarray]


def perceptual_reward_fn(scale: float = 5.0, net: Optional[ProxyFeatureNet] = None) -> RewardFn:
    def fn(trajs: Sequence[Trajectory], triplet: Triplet) -> np.ndarray:
        imgs = np.stack([t.image for t in trajs])
        return perceptual_reward(imgs, np.broadcast_to(triplet.target, imgs.shape), scale, net)
    return fn


def freeze_base(model: StyleVAR) -> None:
    """Base weights stop recording gradients; only adapters train."""
    for p in model.named_parameters().values():
        p.requires_grad = False
        p.grad = None


def grpo_step(model: StyleVAR, tokenizer: MultiScaleTokenizer, triplet: Triplet, step: int,
              cfg: GrpoConfig, sampler: SamplerConfig, opt: AdamWState, reward_fn: RewardFn,
              state: Optional[MergeState] = None, cond: Optional[Conditions] = None) -> Dict[str, float]:
    """Roll out a group, score it and take one adapter update.

    When ``state`` is given the merge schedule is advanced (and may merge).
    """
    if not model.has_adapters:
        raise RuntimeError("grpo_step needs adapters attached")
    cond = cond or Conditions.build(tokenizer, triplet.content, triplet.style)
    seeds = rollout_seeds(cfg.seed, step, cfg.group_size)
    trajs = generate(model, tokenizer, cond, seeds, sampler, mode="current")
    rewards = np.asarray(reward_fn(trajs, triplet), dtype=np.float64)
    if rewards.shape != (len(trajs),) or not np.all(np.isfinite(rewards)):
        raise RewardError(f"step {step}: reward function returned invalid values {rewards}")
    for t, r in zip(trajs, rewards):
        t.reward = float(r)
    adv = advantage(rewards, cfg.eps_std)
    tokens = np.stack([t.tokens for t in trajs])
    logp_old = np.stack([t.logp_full for t in trajs])
    with ad.no_grad():
        logp_ref = teacher_forced_logprobs(model, tokenizer, tokens, cond, mode="reference").data
    logp_theta = teacher_forced_logprobs(model, tokenizer, tokens, cond, mode="current")
    weights = panw_weights(tokenizer.schedule, cfg.panw_alpha)
    parts = grpo_loss(logp_theta, logp_old, logp_ref, adv, weights, cfg.clip_eps, cfg.kl_beta)
    if not math.isfinite(float(parts.loss.data)):
        raise RewardError(f"step {step}: non-finite GRPO loss")
    params = model.named_adapters()
    model.zero_grad()
    parts.loss.backward()
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    norm = clip_global_norm(params, cfg.grad_clip)
    adamw_step(params, opt, cfg.lr)
    out = {"step": step, "reward_mean": float(rewards.mean()), "reward_std": float(rewards.std()),
           "loss": float(parts.loss.data), "pg_loss": parts.pg, "kl": parts.kl,
           "clip_fraction": parts.clip_fraction, "grad_norm": norm, "merged": ""}
    if state is not None:
        state.observe(out["reward_mean"], parts.kl, cfg.ema_decay)
        kind = maybe_merge_reference(state, cfg, step, model)
        if kind:
            # fresh adapters restart their moments
            opt.reset(list(params))
            out["merged"] = kind
        out["reward_ema"] = state.ema
        out["merges"] = len(state.merges)
    return out


LOG_FIELDS = ("step", "reward_mean", "reward_std", "reward_ema", "loss", "pg_loss", "kl",
              "clip_fraction", "grad_norm", "merges", "merged")


def pick_triplet(seed: int, step: int, n: int) -> int:
    return int(np.random.default_rng(np.random.SeedSequence([seed, 11, step])).integers(n))


def run_grpo(model: StyleVAR, tokenizer: MultiScaleTokenizer, train: Sequence[Triplet],
             cfg: GrpoConfig, sampler: SamplerConfig, reward_fn: RewardFn,
             opt: Optional[AdamWState] = None, state: Optional[MergeState] = None,
             start_step: int = 0, log_path=None, merge_log_path=None,
             on_step: Optional[Callable[[Dict[str, float]], None]] = None) -> Tuple[AdamWState, MergeState]:
    """Run steps ``start_step .. cfg.steps - 1``; adapters are attached if missing."""
    if not train:
        raise ValueError("run_grpo needs at least one triplet")
    if not model.has_adapters:
        model.attach_adapters()
    freeze_base(model)
    opt = opt or AdamWState(betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    state = state or MergeState()
    conds: Dict[int, Conditions] = {}
    log = mlog = None
    try:
        if log_path is not None:
            fresh = start_step == 0 or not Path(log_path).exists()
            log = open(log_path, "w" if fresh else "a", newline="")
            writer = csv.writer(log, lineterminator="\n")
            if fresh:
                writer.writerow(LOG_FIELDS)
        if merge_log_path is not None:
            mlog = open(merge_log_path, "w" if start_step == 0 else "a")
        for step in range(start_step, cfg.steps):
            i = pick_triplet(cfg.seed, step, len(train))
            if i not in conds:
                conds[i] = Conditions.build(tokenizer, train[i].content, train[i].style)
            n_merges = len(state.merges)
            row = grpo_step(model, tokenizer, train[i], step, cfg, sampler, opt, reward_fn, state, conds[i])
            if log:
                writer.writerow([row.get(k, "") for k in LOG_FIELDS])
                log.flush()
            if mlog and len(state.merges) > n_merges:
                mlog.write(json.dumps(state.merges[-1], sort_keys=True) + "\n")
                mlog.flush()
            if on_step:
                on_step(row)
    finally:
        for fh in (log, mlog):
            if fh:
                fh.close()
    return opt, state
