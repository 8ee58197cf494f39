"""Frozen multi-scale residual vector quantizer.

Images are cut into non-overlapping patches and projected to ``d``-dim
features on an ``s_K x s_K`` grid. Quantization walks the scale schedule
coarse to fine: the residual between the features and the running
reconstruction is area-downsampled to the current scale, snapped to the
nearest codeword, bilinearly upsampled back, and added to the running
reconstruction. Decoding replays the same accumulation from the token maps.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.cluster.vq import ClusterError, kmeans2

FULL_SCHEDULE = (1, 2, 3, 4, 5, 6, 8, 10, 13, 16)
TOY_SCHEDULE = (1, 2, 3, 4)


@dataclass(frozen=True)
class ScaleSchedule:
    sides: Tuple[int, ...] = TOY_SCHEDULE

    def __post_init__(self):
        sides = tuple(int(s) for s in self.sides)
        object.__setattr__(self, "sides", sides)
        if not sides or sides[0] < 1 or any(b <= a for a, b in zip(sides, sides[1:])):
            raise ValueError(f"scale schedule must be strictly ascending positive ints, got {sides}")

    @property
    def num_scales(self) -> int:
        return len(self.sides)

    @property
    def final_side(self) -> int:
        return self.sides[-1]

    @property
    def token_counts(self) -> Tuple[int, ...]:
        return tuple(s * s for s in self.sides)

    @property
    def total_tokens(self) -> int:
        return sum(self.token_counts)

    @property
    def offsets(self) -> Tuple[int, ...]:
        return tuple(np.concatenate([[0], np.cumsum(self.token_counts)]).tolist())

    def scale_slice(self, k: int) -> slice:
        """Flat-token slice of scale ``k`` (0-based)."""
        o = self.offsets
        return slice(o[k], o[k + 1])

    def scale_index(self) -> np.ndarray:
        """Scale id (0-based) of every flat token position."""
        return np.repeat(np.arange(self.num_scales), self.token_counts)

    def prefix(self, n: int) -> "ScaleSchedule":
        return ScaleSchedule(self.sides[:n])


# -- resampling -------------------------------------------------------------

@lru_cache(maxsize=None)
def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix for one spatial axis.

    Upsampling is linear with the half-pixel (align_corners=False)
    convention and edge clamping; downsampling is adaptive area averaging
    where output cell i covers input cells [floor(i*n/m), ceil((i+1)*n/m)).
    """
    if n_in <= 0 or n_out <= 0:
        raise ValueError(f"resample sizes must be positive, got {n_in}->{n_out}")
    m = np.zeros((n_out, n_in))
    if n_out == n_in:
        np.fill_diagonal(m, 1.0)
    elif n_out > n_in:
        scale = n_in / n_out
        for i in range(n_out):
            src = max((i + 0.5) * scale - 0.5, 0.0)
            i0 = min(int(np.floor(src)), n_in - 1)
            i1 = min(i0 + 1, n_in - 1)
            lam = src - i0
            m[i, i0] += 1.0 - lam
            m[i, i1] += lam
    else:
        for i in range(n_out):
            lo = (i * n_in) // n_out
            hi = -((-(i + 1) * n_in) // n_out)
            m[i, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


def interpolate(fmap: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Resample ``(..., h, w, d)`` to ``(..., target_h, target_w, d)``."""
    h, w = fmap.shape[-3], fmap.shape[-2]
    if (h, w) == (target_h, target_w):
        return fmap
    mh = resample_matrix(h, target_h)
    mw = resample_matrix(w, target_w)
    return np.einsum("ih,...hwd,jw->...ijd", mh, fmap, mw)


# -- codebook ---------------------------------------------------------------

@dataclass
class Codebook:
    vectors: np.ndarray
    frozen: bool = True

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) == 0:
            raise ValueError("codebook must be a non-empty (V, d) array")
        if len(np.unique(self.vectors, axis=0)) != len(self.vectors):
            raise ValueError("codebook contains duplicate entries")
        if self.frozen:
            self.vectors.setflags(write=False)

    @property
    def size(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def nearest(self, x: np.ndarray) -> np.ndarray:
        """Index of the closest codeword for every ``(..., d)`` vector; ties go to the lower index."""
        flat = x.reshape(-1, self.dim)
        d2 = ((flat[:, None, :] - self.vectors[None, :, :]) ** 2).sum(-1)
        return d2.argmin(axis=1).reshape(x.shape[:-1])

    def lookup(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise IndexError(f"token index out of codebook range [0, {self.size})")
        return self.vectors[idx]


def build_codebook(samples: np.ndarray, size: int, seed: int, iters: int = 40,
                   include_zero: bool = False) -> Codebook:
    """Seeded k-means (k-means++ init, fixed iteration cap) over ``samples``.

    With ``include_zero`` the zero vector is placed at index 0 and the other
    ``size - 1`` codewords come from k-means.
    """
    samples = np.asarray(samples, dtype=np.float64)
    k = size - 1 if include_zero else size
    if size < 1 or k < 0:
        raise ValueError(f"codebook size must be >= 1, got {size}")
    distinct = np.unique(samples, axis=0)
    if len(distinct) < k:
        raise ValueError(f"need at least {k} distinct samples for the codebook, got {len(distinct)}")
    vecs = np.empty((0, samples.shape[1]))
    if k > 0:
        try:
            vecs, _ = kmeans2(samples, k, iter=iters, minit="++", seed=seed, missing="raise")
        except ClusterError as exc:
            raise ValueError(f"k-means produced an empty cluster: {exc}") from exc
    if include_zero:
        vecs = np.vstack([np.zeros((1, samples.shape[1])), vecs])
    return Codebook(vecs)


# -- token hierarchies ------------------------------------------------------

@dataclass
class TokenHierarchy:
    """One integer map per scale, each ``(..., s_k, s_k)``."""

    maps: List[np.ndarray]

    def validate(self, schedule: ScaleSchedule, vocab: Optional[int] = None) -> None:
        if len(self.maps) != schedule.num_scales:
            raise ValueError(f"expected {schedule.num_scales} token maps, got {len(self.maps)}")
        for k, (m, s) in enumerate(zip(self.maps, schedule.sides)):
            if m.shape[-2:] != (s, s):
                raise ValueError(f"scale {k}: token map shape {m.shape} does not end in ({s}, {s})")
            if vocab is not None and m.size and (m.min() < 0 or m.max() >= vocab):
                raise IndexError(f"scale {k}: token outside [0, {vocab})")

    def flat(self) -> np.ndarray:
        lead = self.maps[0].shape[:-2]
        return np.concatenate([m.reshape(*lead, -1) for m in self.maps], axis=-1)

    @classmethod
    def from_flat(cls, flat: np.ndarray, schedule: ScaleSchedule) -> "TokenHierarchy":
        flat = np.asarray(flat)
        lead = flat.shape[:-1]
        o = schedule.offsets
        return cls([flat[..., o[k]:o[k + 1]].reshape(*lead, s, s)
                    for k, s in enumerate(schedule.sides)])

    def __len__(self):
        return len(self.maps)


# -- tokenizer --------------------------------------------------------------

def _dc_preserving_projection(patch: int, d: int, seed: int) -> np.ndarray:
    """Seeded orthonormal (p*p*3, d) embedding whose first 3 columns are channel means."""
    n_in = patch * patch * 3
    if d < 3 or d > n_in:
        raise ValueError(f"feature dim must lie in [3, {n_in}], got {d}")
    dc = np.zeros((n_in, 3))
    for c in range(3):
        dc[c::3, c] = 1.0 / np.sqrt(patch * patch)
    rng = np.random.default_rng(seed)
    rand = rng.standard_normal((n_in, d - 3))
    rand -= dc @ (dc.T @ rand)
    q, _ = np.linalg.qr(rand)
    return np.hstack([dc, q[:, : d - 3]])


@dataclass
class MultiScaleTokenizer:
    schedule: ScaleSchedule
    image_size: int
    projection: np.ndarray
    decoder_weight: np.ndarray
    decoder_bias: np.ndarray
    codebook: Codebook
    _checksum: str = field(default="", repr=False)

    def __post_init__(self):
        if self.image_size % self.schedule.final_side:
            raise ValueError(f"image size {self.image_size} not divisible by final scale "
                             f"{self.schedule.final_side}")
        for a in (self.projection, self.decoder_weight, self.decoder_bias):
            a.setflags(write=False)
        self._checksum = self.checksum()

    @property
    def patch(self) -> int:
        return self.image_size // self.schedule.final_side

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.codebook.size

    # construction --------------------------------------------------------
    @classmethod
    def fit(cls, images: np.ndarray, schedule: ScaleSchedule, dim: int = 16, vocab: int = 64,
            seed: int = 0, kmeans_iters: int = 40) -> "MultiScaleTokenizer":
        """Build projection, decoder and codebook from sample images, then freeze."""
        images = np.asarray(images, dtype=np.float64)
        size = images.shape[1]
        patch = size // schedule.final_side
        proj = _dc_preserving_projection(patch, dim, seed)
        feats = _patchify(images, patch) @ proj
        cells = feats.reshape(-1, dim)
        pixels = _patchify(images, patch).reshape(len(cells), -1) + 0.5
        design = np.hstack([cells, np.ones((len(cells), 1))])
        sol, *_ = np.linalg.lstsq(design, pixels, rcond=None)
        dec_w, dec_b = sol[:-1], sol[-1]

        # two passes: a provisional codebook from pooled multi-scale features,
        # then k-means on the residuals it actually produces.
        pooled = [interpolate(feats, s, s).reshape(-1, dim) for s in schedule.sides]
        provisional = build_codebook(np.vstack(pooled), vocab, seed, kmeans_iters, include_zero=True)
        tmp = cls(schedule, size, proj, dec_w, dec_b, provisional)
        residuals = tmp._collect_residuals(feats)
        codebook = build_codebook(residuals, vocab, seed + 1, kmeans_iters, include_zero=True)
        return cls(schedule, size, proj, dec_w, dec_b, codebook)

    def _collect_residuals(self, feats: np.ndarray) -> np.ndarray:
        out = []
        f_hat = np.zeros_like(feats)
        K = self.schedule.final_side
        for s in self.schedule.sides:
            r = interpolate(feats - f_hat, s, s)
            out.append(r.reshape(-1, self.dim))
            z = self.codebook.lookup(self.codebook.nearest(r))
            f_hat = f_hat + interpolate(z, K, K)
        return np.vstack(out)

    # encode / decode -----------------------------------------------------
    def encode_features(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape[-3:] != (self.image_size, self.image_size, 3):
            raise ValueError(f"expected (..., {self.image_size}, {self.image_size}, 3) image, "
                             f"got {image.shape}")
        return _patchify(image, self.patch) @ self.projection

    def ms_quantize(self, f: np.ndarray, identity: bool = False) -> Tuple[TokenHierarchy, np.ndarray]:
        """Residual-quantize features; returns token maps and the accumulated f_hat.

        ``identity`` skips codebook snapping (continuous residuals), in which
        case token maps are all zero and f_hat reproduces ``f``.
        """
        K = self.schedule.final_side
        f_hat = np.zeros_like(f)
        maps = []
        for s in self.schedule.sides:
            r = interpolate(f - f_hat, s, s)
            if identity:
                idx = np.zeros(r.shape[:-1], dtype=np.int64)
                z = r
            else:
                idx = self.codebook.nearest(r)
                z = self.codebook.lookup(idx)
            maps.append(idx)
            f_hat = self._accumulate(f_hat, z, K)
        return TokenHierarchy(maps), f_hat

    @staticmethod
    def _accumulate(f_hat: np.ndarray, z: np.ndarray, K: int) -> np.ndarray:
        return f_hat + interpolate(z, K, K)

    def tokenize(self, image: np.ndarray) -> TokenHierarchy:
        return self.ms_quantize(self.encode_features(image))[0]

    def accumulate(self, tokens: TokenHierarchy, upto: Optional[int] = None) -> np.ndarray:
        """f_hat after the first ``upto`` scales (all by default)."""
        if upto is None:
            tokens.validate(self.schedule, self.vocab_size)
        K = self.schedule.final_side
        lead = tokens.maps[0].shape[:-2]
        f_hat = np.zeros((*lead, K, K, self.dim))
        for m in tokens.maps[: upto if upto is not None else len(tokens.maps)]:
            f_hat = self._accumulate(f_hat, self.codebook.lookup(m), K)
        return f_hat

    def decode_features(self, f_hat: np.ndarray) -> np.ndarray:
        lead = f_hat.shape[:-3]
        K, p = self.schedule.final_side, self.patch
        pix = f_hat @ self.decoder_weight + self.decoder_bias
        img = pix.reshape(*lead, K, K, p, p, 3)
        img = np.moveaxis(img, -3, -4).reshape(*lead, K * p, K * p, 3)
        return np.clip(img, 0.0, 1.0)

    def accumulate_decode(self, tokens: TokenHierarchy) -> Tuple[np.ndarray, np.ndarray]:
        f_hat = self.accumulate(tokens)
        return f_hat, self.decode_features(f_hat)

    # model inputs --------------------------------------------------------
    def next_scale_inputs(self, tokens: TokenHierarchy) -> np.ndarray:
        """Teacher-forcing inputs ``(..., L, d)``: scale k sees f_hat of scales < k.

        Rows of the first scale are zero; the model overwrites them with the
        start token.
        """
        K = self.schedule.final_side
        lead = tokens.maps[0].shape[:-2]
        f_hat = np.zeros((*lead, K, K, self.dim))
        rows = []
        for k, s in enumerate(self.schedule.sides):
            rows.append(interpolate(f_hat, s, s).reshape(*lead, s * s, self.dim))
            f_hat = self._accumulate(f_hat, self.codebook.lookup(tokens.maps[k]), K)
        return np.concatenate(rows, axis=-2)

    def condition_inputs(self, tokens: TokenHierarchy) -> np.ndarray:
        """Condition rows ``(..., L, d)``: scale k sees f_hat of scales <= k."""
        K = self.schedule.final_side
        lead = tokens.maps[0].shape[:-2]
        f_hat = np.zeros((*lead, K, K, self.dim))
        rows = []
        for k, s in enumerate(self.schedule.sides):
            f_hat = self._accumulate(f_hat, self.codebook.lookup(tokens.maps[k]), K)
            rows.append(interpolate(f_hat, s, s).reshape(*lead, s * s, self.dim))
        return np.concatenate(rows, axis=-2)

    # integrity -----------------------------------------------------------
    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.projection, self.decoder_weight, self.decoder_bias, self.codebook.vectors):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        h.update(repr(self.schedule.sides).encode())
        return h.hexdigest()

    def assert_frozen(self) -> None:
        if self.checksum() != self._checksum:
            raise RuntimeError("tokenizer weights changed after freeze")


def _patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(..., H, W, 3)`` -> ``(..., H/p, W/p, p*p*3)`` centred patch vectors."""
    lead = images.shape[:-3]
    H, W = images.shape[-3], images.shape[-2]
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible into {patch}x{patch} patches")
    x = images.reshape(*lead, H // patch, patch, W // patch, patch, 3)
    x = np.moveaxis(x, -4, -3)
    return x.reshape(*lead, H // patch, W // patch, patch * patch * 3) - 0.5


def token_count(sides: Sequence[int]) -> int:
    return ScaleSchedule(tuple(sides)).total_tokens
