"""End-to-end stages: data, tokenizer, SFT, GRPO, sampling and evaluation."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import TrainingState, load_training_state, save_training_state
from .config import RunConfig
from .data import Triplet, generate_dataset, load_dataset
from .grpo import MergeState, perceptual_reward_fn, run_grpo
from .metrics import MetricReport, ProxyFeatureNet, adain_baseline, evaluate
from .model import StyleVAR
from .optim import AdamWState
from .sampler import Conditions, SamplerConfig, generate
from .sft import SftProgress, run_sft
from .tokenizer import MultiScaleTokenizer

log = logging.getLogger("stylevar")


def load_triplets(cfg: RunConfig, data_dir=None) -> List[Triplet]:
    """Read a generated dataset directory, or regenerate it in memory from the config."""
    if data_dir is not None:
        triplets = load_dataset(data_dir)
        size = triplets[0].content.shape[0]
        if size != cfg.data.image_size:
            raise ValueError(f"dataset images are {size}px but config expects {cfg.data.image_size}px")
        return triplets
    return generate_dataset(cfg.data.n, cfg.data.seed, cfg.data.image_size)


def split(triplets: Sequence[Triplet]) -> Tuple[List[Triplet], List[Triplet]]:
    return [t for t in triplets if t.split == "train"], [t for t in triplets if t.split == "val"]


def fit_tokenizer(cfg: RunConfig, train: Sequence[Triplet]) -> MultiScaleTokenizer:
    items = list(train[:cfg.tokenizer.fit_images])
    imgs = np.stack([t.target for t in items] + [t.style for t in items] + [t.content for t in items])
    return MultiScaleTokenizer.fit(imgs, cfg.scale_schedule(), cfg.tokenizer.dim, cfg.tokenizer.vocab,
                                   cfg.tokenizer.seed, cfg.tokenizer.kmeans_iters)


def sft_stage(cfg: RunConfig, triplets: Sequence[Triplet], out_dir, resume=None,
              on_step=None) -> Tuple[MultiScaleTokenizer, StyleVAR]:
    """Fit the tokenizer, train with cross-entropy and write ``sft_{best,final}.ckpt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = split(triplets)
    if resume:
        st = load_training_state(resume)
        if st.meta.get("stage") != "sft":
            raise ValueError(f"{resume} is not an SFT checkpoint")
        tok, model, opt = st.tokenizer, st.model, st.optimizer
        progress = SftProgress.from_meta(st.meta["progress"])
    else:
        tok = fit_tokenizer(cfg, train)
        model = StyleVAR(cfg.model_config())
        opt, progress = None, None

    def checkpoint(tag: str, opt_state: AdamWState, prog: SftProgress) -> None:
        save_training_state(out / f"sft_{tag}.ckpt", cfg, tok, model, opt_state,
                            {"stage": "sft", "progress": prog.to_meta()})

    run_sft(model, tok, train, val, cfg.sft, cfg.deterministic, opt, progress,
            log_path=out / "sft_metrics.csv", checkpoint=checkpoint, on_step=on_step)
    return tok, model


def grpo_stage(cfg: RunConfig, triplets: Sequence[Triplet], init_ckpt, out_dir, resume=None,
               on_step=None) -> Tuple[MultiScaleTokenizer, StyleVAR, MergeState]:
    """Adapter-only GRPO from an SFT checkpoint; writes ``grpo_final.ckpt``.

    GRPO hyperparameters come from ``cfg`` (not from the checkpoint's config),
    so the same SFT checkpoint can seed several RL runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = split(triplets)
    st = load_training_state(resume or init_ckpt)
    tok, model = st.tokenizer, st.model
    if resume:
        if st.meta.get("stage") != "grpo":
            raise ValueError(f"{resume} is not a GRPO checkpoint")
        opt, state, start = st.optimizer, MergeState.from_meta(st.meta["merge_state"]), st.meta["step"]
    else:
        opt, state, start = None, None, 0
    net = ProxyFeatureNet(cfg.reward.net_seed)
    reward_fn = perceptual_reward_fn(cfg.reward.scale, net)
    opt, state = run_grpo(model, tok, train, cfg.grpo, cfg.sampler, reward_fn, opt, state, start,
                          log_path=out / "grpo_metrics.csv", merge_log_path=out / "grpo_merges.jsonl",
                          on_step=on_step)
    save_training_state(out / "grpo_final.ckpt", cfg, tok, model, opt,
                        {"stage": "grpo", "step": cfg.grpo.steps, "merge_state": state.to_meta()})
    return tok, model, state


def render(model: StyleVAR, tok: MultiScaleTokenizer, content: np.ndarray, style: np.ndarray,
           sampler: SamplerConfig, seed: int, mode: str = "current") -> np.ndarray:
    cond = Conditions.build(tok, content, style)
    return generate(model, tok, cond, [seed], sampler, mode=mode)[0].image


def eval_sampler(cfg: RunConfig, greedy: bool = True) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(s.top_k, s.top_p, s.temperature, greedy, s.seed, s.chunk_size, s.workers)


def evaluate_model(model: StyleVAR, tok: MultiScaleTokenizer, triplets: Sequence[Triplet],
                   sampler: SamplerConfig, net: Optional[ProxyFeatureNet] = None,
                   method: str = "stylevar") -> MetricReport:
    base = sampler.seed
    return evaluate(lambda i, t: render(model, tok, t.content, t.style, sampler, base + i),
                    triplets, method, net)


def evaluate_adain(triplets: Sequence[Triplet], net: Optional[ProxyFeatureNet] = None) -> MetricReport:
    return evaluate(lambda i, t: adain_baseline(t.content, t.style), triplets, "adain", net)


def eval_stage(cfg: RunConfig, triplets: Sequence[Triplet], ckpt, out_dir, greedy: bool = True,
               baseline: bool = True) -> dict:
    """Score a checkpoint (and optionally AdaIN) on the held-out split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, val = split(triplets)
    if not val:
        raise ValueError("dataset has no held-out triplets")
    st: TrainingState = load_training_state(ckpt)
    net = ProxyFeatureNet(cfg.reward.net_seed)
    reports = [evaluate_model(st.model, st.tokenizer, val, eval_sampler(cfg, greedy), net,
                              method=st.meta.get("stage", "stylevar"))]
    if baseline:
        reports.append(evaluate_adain(val, net))
    summary = {}
    for r in reports:
        r.write_csv(out / f"eval_{r.method}.csv")
        r.write_json(out / f"eval_{r.method}.json")
        summary[r.method] = r.aggregate()
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
