"""Scale-wise autoregressive transformer with blended cross-attention.

Each block runs, with pre-norm residuals:

1. block-causal self-attention over the target stream (a position at scale
   k sees target positions of scales <= k);
2. blended cross-attention, where style and content condition rows act as
   queries over the target stream's keys/values and the two branches are
   mixed per scale: ``alpha_k * style + (1 - alpha_k) * content``;
3. a GELU feed-forward network.

Target inputs are continuous next-scale features (the running tokenizer
reconstruction downsampled to each scale) passed through ``word_embed``; the
first position is replaced by the start token computed from the content
image. Condition rows use the same ``word_embed`` plus a stream embedding.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LayerNorm, Linear, Module, ModuleList, adapted_linears, param
from .tokenizer import TOY_SCHEDULE, ScaleSchedule

POLICY_MODES = ("current", "reference", "snapshot")
MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    embed_dim: int = 128
    num_heads: int = 4
    num_layers: int = 4
    vocab_size: int = 64
    feature_dim: int = 16
    image_size: int = 16
    schedule: Tuple[int, ...] = TOY_SCHEDULE
    # per-scale blend coefficients; None means a linear ramp alpha_start -> alpha_end
    blend_alpha: Optional[Tuple[float, ...]] = None
    alpha_start: float = 0.2
    alpha_end: float = 0.8
    mlp_ratio: int = 4
    encoder_channels: Tuple[int, int] = (16, 32)
    adapter_rank: int = 8
    adapter_scaling: float = 2.0
    adapt_head: bool = True      # also put an adapter on the output projection
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.schedule = tuple(self.schedule)
        self.encoder_channels = tuple(self.encoder_channels)
        if self.blend_alpha is not None:
            self.blend_alpha = tuple(float(a) for a in self.blend_alpha)
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.image_size % 4:
            raise ValueError("start-token encoder needs image_size divisible by 4")
        alphas = self.alphas()
        if any(not 0.0 <= a <= 1.0 for a in alphas):
            raise ValueError(f"blend alphas must lie in [0, 1], got {alphas}")

    @property
    def scale_schedule(self) -> ScaleSchedule:
        return ScaleSchedule(self.schedule)

    def alphas(self) -> Tuple[float, ...]:
        K = len(self.schedule)
        if self.blend_alpha is not None:
            if len(self.blend_alpha) != K:
                raise ValueError(f"blend_alpha has {len(self.blend_alpha)} entries for {K} scales")
            return self.blend_alpha
        if K == 1:
            return (self.alpha_start,)
        return tuple(self.alpha_start + (self.alpha_end - self.alpha_start) * k / (K - 1)
                     for k in range(K))


def alpha_schedule(config: ModelConfig, k: int) -> float:
    """Blend coefficient of scale ``k`` (0-based)."""
    return config.alphas()[k]


def block_causal_mask(schedule: ScaleSchedule, n: Optional[int] = None) -> np.ndarray:
    """Additive (n, n) mask: query at scale a may see keys at scales <= a."""
    scale = schedule.scale_index()
    if n is not None:
        scale = scale[:n]
    allowed = scale[None, :] <= scale[:, None]
    return np.where(allowed, 0.0, MASK_VALUE)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, D = x.shape
    return x.reshape(B, L, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: Optional[np.ndarray]) -> Tensor:
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(qh.shape[-1]))
    if mask is not None:
        scores = scores + mask
    return _merge_heads(ad.softmax(scores, axis=-1) @ vh)


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        D, s = cfg.embed_dim, cfg.init_std
        self.heads = cfg.num_heads
        self.ln1 = LayerNorm(D)
        self.qkv = Linear(D, 3 * D, rng, s)
        self.attn_proj = Linear(D, D, rng, s)
        self.ln2 = LayerNorm(D)
        self.ln_cond = LayerNorm(D)
        self.q_cond = Linear(D, D, rng, s)   # shared by the style and content queries
        self.kv = Linear(D, 2 * D, rng, s)
        self.cross_proj = Linear(D, D, rng, s)
        self.ln3 = LayerNorm(D)
        self.fc1 = Linear(D, cfg.mlp_ratio * D, rng, s)
        self.fc2 = Linear(cfg.mlp_ratio * D, D, rng, s)

    def self_attention(self, x: Tensor, mask, adapter: bool) -> Tensor:
        D = x.shape[-1]
        qkv = self.qkv(self.ln1(x), adapter)
        q, k, v = qkv[..., :D], qkv[..., D:2 * D], qkv[..., 2 * D:]
        return self.attn_proj(attention(q, k, v, self.heads, mask), adapter)

    def blended_update(self, h: Tensor, s: Tensor, c: Tensor, alpha, mask, adapter: bool) -> Tensor:
        """``alpha * Attn(Q=s, K=h, V=h) + (1 - alpha) * Attn(Q=c, K=h, V=h)`` through a shared projection.

        ``alpha`` is a scalar or one value per query row.
        """
        D = h.shape[-1]
        kv = self.kv(self.ln2(h), adapter)
        k, v = kv[..., :D], kv[..., D:]
        a_s = attention(self.q_cond(self.ln_cond(s), adapter), k, v, self.heads, mask)
        a_c = attention(self.q_cond(self.ln_cond(c), adapter), k, v, self.heads, mask)
        alpha = np.asarray(alpha, dtype=h.data.dtype)
        if alpha.ndim == 1:
            alpha = alpha[:, None]
        return self.cross_proj(a_s * alpha + a_c * (1.0 - alpha), adapter)

    def __call__(self, x: Tensor, s: Tensor, c: Tensor, alpha_rows: np.ndarray, mask,
                 adapter: bool) -> Tensor:
        x = x + self.self_attention(x, mask, adapter)
        x = x + self.blended_update(x, s, c, alpha_rows, mask, adapter)
        return x + self.fc2(ad.gelu(self.fc1(self.ln3(x), adapter)), adapter)


def blended_cross_attention(block: Block, h: Tensor, s_k: Tensor, c_k: Tensor, alpha: float,
                            adapter: bool = True) -> Tensor:
    """Apply one block's blended cross-attention for a single scale.

    ``h`` holds the visible target rows (scales <= k) with the scale-k slice
    last; ``s_k`` and ``c_k`` hold that scale's condition rows. Returns ``h``
    with the update added to its final ``len(s_k)`` rows.
    """
    n = s_k.shape[-2]
    if c_k.shape[-2] != n:
        raise ValueError(f"style has {n} condition rows but content has {c_k.shape[-2]}")
    if h.shape[-2] < n:
        raise ValueError(f"target stream has {h.shape[-2]} rows, fewer than the {n} scale-k rows")
    update = block.blended_update(h, s_k, c_k, alpha, None, adapter)
    head = h[:, : h.shape[1] - n]
    return ad.concat([head, h[:, h.shape[1] - n:] + update], axis=1)


class StartTokenEncoder(Module):
    """Two stride-2 patch convolutions, global mean pool, then a 2-layer MLP."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        c1, c2 = cfg.encoder_channels
        self.conv1 = Linear(2 * 2 * 3, c1, rng, np.sqrt(2.0 / 12))
        self.conv2 = Linear(2 * 2 * c1, c2, rng, np.sqrt(2.0 / (4 * c1)))
        self.mlp1 = Linear(c2, cfg.embed_dim, rng, np.sqrt(1.0 / c2))
        self.mlp2 = Linear(cfg.embed_dim, cfg.embed_dim, rng, cfg.init_std)

    @staticmethod
    def _patch2(x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        x = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, H // 2, W // 2, 4 * C)

    def __call__(self, images: np.ndarray) -> Tensor:
        x = Tensor(np.asarray(images, dtype=ad.get_default_dtype()) - 0.5)
        x = ad.gelu(self.conv1(self._patch2(x)))
        x = ad.gelu(self.conv2(self._patch2(x)))
        B = x.shape[0]
        pooled = x.reshape(B, -1, x.shape[-1]).mean(axis=1)
        return self.mlp2(ad.gelu(self.mlp1(pooled)))


class StyleVAR(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        object.__setattr__(self, "cfg", cfg)
        sched = cfg.scale_schedule
        object.__setattr__(self, "schedule", sched)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        D, s = cfg.embed_dim, cfg.init_std
        self.word_embed = Linear(cfg.feature_dim, D, rng, s)
        self.stream_embed = param(rng.normal(0, s, (3, D)))
        self.level_embed = param(rng.normal(0, s, (sched.num_scales, D)))
        self.pos_embed = param(rng.normal(0, s, (sched.total_tokens, D)))
        self.start = StartTokenEncoder(cfg, rng)
        self.blocks = ModuleList([Block(cfg, rng) for _ in range(cfg.num_layers)])
        self.ln_f = LayerNorm(D)
        self.head = Linear(D, cfg.vocab_size, rng, s)
        object.__setattr__(self, "policy_mode", "current")
        object.__setattr__(self, "_snapshot", None)
        object.__setattr__(self, "merges", 0)
        object.__setattr__(self, "_mask_cache", {})

    # -- policy modes -----------------------------------------------------
    def set_policy_mode(self, mode: str) -> None:
        if mode not in POLICY_MODES:
            raise ValueError(f"unknown policy mode {mode!r}; expected one of {POLICY_MODES}")
        if mode == "snapshot" and self._snapshot is None:
            raise RuntimeError("snapshot mode requested before take_snapshot()")
        object.__setattr__(self, "policy_mode", mode)

    def take_snapshot(self) -> None:
        snap = copy.deepcopy(self)
        object.__setattr__(snap, "_snapshot", None)
        object.__setattr__(self, "_snapshot", snap)

    # -- adapters ---------------------------------------------------------
    def _adaptable(self):
        for b in self.blocks:
            yield from (b.qkv, b.attn_proj, b.q_cond, b.kv, b.cross_proj, b.fc1, b.fc2)
        if self.cfg.adapt_head:
            yield self.head

    @property
    def has_adapters(self) -> bool:
        return bool(adapted_linears(self))

    def attach_adapters(self, rank: Optional[int] = None, scaling: Optional[float] = None) -> None:
        rank = rank or self.cfg.adapter_rank
        scaling = self.cfg.adapter_scaling if scaling is None else scaling
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 2, self.merges]))
        for lin in self._adaptable():
            lin.attach_adapter(rank, scaling, rng)

    def lora_merge(self) -> None:
        """Bake every adapter delta into its base weight and restart adapters at zero."""
        lins = adapted_linears(self)
        if not lins:
            raise RuntimeError("lora_merge called without attached adapters")
        object.__setattr__(self, "merges", self.merges + 1)
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 2, self.merges]))
        for lin in lins:
            lin.merge_adapter()
            lin.reset_adapter(rng)

    # -- forward ----------------------------------------------------------
    def _mask(self, n: int) -> np.ndarray:
        m = self._mask_cache.get(n)
        if m is None:
            m = self._mask_cache[n] = block_causal_mask(self.schedule, n)
        return m

    def embed_conditions(self, feats: np.ndarray, stream: int, n: int) -> Tensor:
        x = self.word_embed(Tensor(feats), adapter=False)
        lvl = self.schedule.scale_index()[:n]
        return x + ad.embedding(self.level_embed, lvl) + self.pos_embed[:n] + self.stream_embed[stream]

    def forward(self, target_feats: np.ndarray, content_images: np.ndarray, style_feats: np.ndarray,
                content_feats: np.ndarray, mode: Optional[str] = None) -> Tensor:
        """Logits ``(B, n, V)`` for the first ``n`` token positions.

        ``target_feats``, ``style_feats`` and ``content_feats`` are
        ``(B, n, feature_dim)`` with ``n`` a whole number of scales; the first
        target row is ignored in favour of the start token.
        """
        mode = mode or self.policy_mode
        if mode == "snapshot":
            if self._snapshot is None:
                raise RuntimeError("snapshot mode requested before take_snapshot()")
            return self._snapshot.forward(target_feats, content_images, style_feats, content_feats,
                                          mode="current")
        if mode not in POLICY_MODES:
            raise ValueError(f"unknown policy mode {mode!r}")
        adapter = mode == "current"
        B, n, _ = target_feats.shape
        if n not in self.schedule.offsets[1:]:
            raise ValueError(f"{n} target rows is not a whole number of scales of {self.schedule.sides}")
        for name, f in (("style", style_feats), ("content", content_feats)):
            if f.shape[:2] != (B, n):
                raise ValueError(f"{name} condition rows {f.shape[:2]} do not match target {(B, n)}")

        start = self.start(content_images).reshape(B, 1, -1)
        rows = [start]
        if n > 1:
            rows.append(self.word_embed(Tensor(target_feats[:, 1:]), adapter=False))
        x = ad.concat(rows, axis=1) if len(rows) > 1 else start
        lvl_idx = self.schedule.scale_index()[:n]
        x = x + ad.embedding(self.level_embed, lvl_idx) + self.pos_embed[:n] + self.stream_embed[0]
        s = self.embed_conditions(style_feats, 1, n)
        c = self.embed_conditions(content_feats, 2, n)

        alpha_rows = np.asarray(self.cfg.alphas())[lvl_idx]
        mask = self._mask(n)
        for blk in self.blocks:
            x = blk(x, s, c, alpha_rows, mask, adapter)
        return self.head(self.ln_f(x), adapter=adapter)

    __call__ = forward

    # -- state ------------------------------------------------------------
    def state_arrays(self, adapters: bool = True) -> dict:
        out = {f"model/{k}": t.data for k, t in self.named_parameters().items()}
        if adapters:
            out.update({f"adapter/{k}": t.data for k, t in self.named_adapters().items()})
        return out
