"""Finite-difference checks for every differentiable primitive and the full SFT loss."""

from __future__ import annotations

from typing import Callable, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check

SHAPES_PER_OP = 10


def _shape(rng: np.random.Generator, ndim_lo: int = 1, ndim_hi: int = 3) -> Tuple[int, ...]:
    return tuple(int(s) for s in rng.integers(1, 5, rng.integers(ndim_lo, ndim_hi + 1)))


def _away_from(rng, shape, points, margin=0.05, scale=1.0):
    """Uniform samples nudged away from kinks so central differences stay valid."""
    x = rng.uniform(-scale, scale, shape)
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.sign(x[near] - p + 1e-12) * margin * 2
    return x


def _scalarize(y: Tensor, weights: np.ndarray) -> Tensor:
    return ad.sum_(y * Tensor(weights))


def _unary_cases() -> List[Tuple[str, Callable, Callable]]:
    pos = lambda r, s: r.uniform(0.5, 2.0, s)
    std = lambda r, s: r.normal(0.0, 1.0, s)
    return [
        ("neg", ad.neg, std),
        ("exp", ad.exp, std),
        ("log", ad.log, pos),
        ("tanh", ad.tanh, std),
        ("relu", ad.relu, lambda r, s: _away_from(r, s, [0.0])),
        ("gelu", ad.gelu, std),
        ("power", lambda x: ad.power(x, 3.0), std),
        ("sqrt_power", lambda x: ad.power(x, 0.5), pos),
        ("clip", lambda x: ad.clip(x, -0.5, 0.5), lambda r, s: _away_from(r, s, [-0.5, 0.5])),
        ("sum_axis", lambda x: ad.sum_(x, axis=-1, keepdims=True), std),
        ("mean", lambda x: ad.mean(x, axis=0), std),
        ("softmax", lambda x: ad.softmax(x, axis=-1), std),
        ("log_softmax", lambda x: ad.log_softmax(x, axis=-1), std),
        ("transpose", lambda x: ad.transpose(x), std),
        ("reshape", lambda x: ad.reshape(x, (-1,)), std),
        ("getitem", lambda x: x[..., :1], std),
    ]


def _binary_cases():
    std = lambda r, s: r.normal(0.0, 1.0, s)
    return [
        ("add", ad.add, std, std),
        ("sub", ad.sub, std, std),
        ("mul", ad.mul, std, std),
        ("div", ad.div, std, lambda r, s: r.uniform(0.5, 2.0, s) * r.choice([-1, 1], s)),
    ]


def _check(name: str, f, x: Tensor, tol: float, seed: int) -> GradCheckReport:
    return grad_check(f, x, tol=tol, seed=seed)


def primitive_reports(tol: float = 1e-5, seed: int = 0) -> List[Tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    out = []
    for name, op, init in _unary_cases():
        for i in range(SHAPES_PER_OP):
            shape = _shape(rng)
            x = Tensor(init(rng, shape))
            w = rng.normal(size=op(Tensor(x.data)).shape)
            out.append((f"{name}{shape}", _check(name, lambda t: _scalarize(op(t), w), x, tol, seed)))
    for name, op, init_a, init_b in _binary_cases():
        for i in range(SHAPES_PER_OP):
            shape = _shape(rng)
            a, b = Tensor(init_a(rng, shape)), Tensor(init_b(rng, shape[-1:]))   # broadcast b
            w = rng.normal(size=shape)
            out.append((f"{name}_lhs{shape}", _check(name, lambda t: _scalarize(op(t, b), w), a, tol, seed)))
            out.append((f"{name}_rhs{shape}", _check(name, lambda t: _scalarize(op(a, t), w), b, tol, seed)))
    for i in range(SHAPES_PER_OP):
        shape = _shape(rng)
        a = rng.normal(size=shape)
        b = a + _away_from(rng, shape, [0.0])
        w = rng.normal(size=shape)
        out.append((f"minimum{shape}", _check("minimum", lambda t: _scalarize(ad.minimum(t, Tensor(b)), w),
                                              Tensor(a), tol, seed)))
    for i in range(SHAPES_PER_OP):
        B, n, k, m = (int(v) for v in rng.integers(1, 5, 4))
        a, b = Tensor(rng.normal(size=(B, n, k))), Tensor(rng.normal(size=(k, m)))
        bb = Tensor(rng.normal(size=(B, k, m)))
        w = rng.normal(size=(B, n, m))
        out.append((f"matmul_w({B},{n},{k},{m})", _check("matmul", lambda t: _scalarize(ad.matmul(a, t), w), b, tol, seed)))
        out.append((f"matmul_x({B},{n},{k},{m})", _check("matmul", lambda t: _scalarize(ad.matmul(t, b), w), a, tol, seed)))
        out.append((f"matmul_batched({B},{n},{k},{m})",
                    _check("matmul", lambda t: _scalarize(ad.matmul(a, t), w), bb, tol, seed)))
    for i in range(SHAPES_PER_OP):
        shape = _shape(rng, 2, 3)
        a, b = Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape))
        w = rng.normal(size=ad.concat([a, b], axis=-1).shape)
        out.append((f"concat{shape}", _check("concat", lambda t: _scalarize(ad.concat([t, b], axis=-1), w), a, tol, seed)))
    for i in range(SHAPES_PER_OP):
        V, D, n = (int(v) for v in rng.integers(2, 6, 3))
        table = Tensor(rng.normal(size=(V, D)))
        idx = rng.integers(0, V, (2, n))
        w = rng.normal(size=(2, n, D))
        out.append((f"embedding({V},{D})", _check("embedding", lambda t: _scalarize(ad.embedding(t, idx), w), table, tol, seed)))
        logits = Tensor(rng.normal(size=(2, n, V)))
        tgt = rng.integers(0, V, (2, n))
        wp = rng.normal(size=(2, n))
        out.append((f"pick({V})", _check("pick", lambda t: _scalarize(ad.pick(t, tgt), wp), logits, tol, seed)))
        for red in ("mean", "sum"):
            out.append((f"cross_entropy_{red}({V})",
                        _check("ce", lambda t: ad.cross_entropy(t, tgt, reduction=red), logits, tol, seed)))
    for i in range(SHAPES_PER_OP):
        shape = _shape(rng, 2, 3)
        D = shape[-1] + 1
        shape = shape[:-1] + (D,)
        x = Tensor(rng.normal(size=shape))
        g, b = Tensor(rng.normal(size=D)), Tensor(rng.normal(size=D))
        w = rng.normal(size=shape)
        out.append((f"layer_norm_x{shape}", _check("ln", lambda t: _scalarize(ad.layer_norm(t, g, b), w), x, tol, seed)))
        out.append((f"layer_norm_gamma{shape}", _check("ln", lambda t: _scalarize(ad.layer_norm(x, t, b), w), g, tol, seed)))
        out.append((f"layer_norm_beta{shape}", _check("ln", lambda t: _scalarize(ad.layer_norm(x, g, t), w), b, tol, seed)))
    return out


def sft_loss_reports(tol: float = 1e-5, seed: int = 0, per_param: int = 4) -> List[Tuple[str, GradCheckReport]]:
    """Check the teacher-forced loss of a tiny model w.r.t. every parameter tensor."""
    from .data import generate_dataset
    from .model import ModelConfig, StyleVAR
    from .sft import BatchBuilder, sft_loss
    from .tokenizer import MultiScaleTokenizer, ScaleSchedule

    sched = ScaleSchedule((1, 2))
    tri = generate_dataset(6, seed, 8)
    imgs = np.stack([t.target for t in tri] + [t.style for t in tri])
    tok = MultiScaleTokenizer.fit(imgs, sched, dim=4, vocab=6, seed=seed, kmeans_iters=10)
    cfg = ModelConfig(embed_dim=8, num_heads=2, num_layers=1, vocab_size=6, feature_dim=4, image_size=8,
                      schedule=(1, 2), encoder_channels=(4, 4), init_std=0.3, seed=seed)
    model = StyleVAR(cfg)
    batch = BatchBuilder(tok).build(tri[:2])
    loss = lambda _t: sft_loss(model, batch)[0]
    out = []
    for name, p in model.named_parameters().items():
        out.append((f"sft_loss/{name}", grad_check(loss, p, tol=tol, seed=seed, max_elems=per_param)))
    return out


def run_suite(tol: float = 1e-5, seed: int = 0) -> List[Tuple[str, GradCheckReport]]:
    return primitive_reports(tol, seed) + sft_loss_reports(tol, seed)
