"""Procedural (content, style, target) triplets and their on-disk layout.

Content images are a few flat-coloured shapes on a plain background. Style
images are a 3-5 colour palette laid out as stripes, a checkerboard or
quantized smooth noise. The target recolours the content by luminance band
with the style palette (darkest band -> darkest palette colour) and blends
the result 0.7/0.3 with the style image. All pixels are snapped to 8-bit
levels at generation time so the PPM files on disk are lossless copies.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .tokenizer import interpolate

LUMA = np.array([0.299, 0.587, 0.114])
VAL_FRACTION = 0.05


@dataclass
class Triplet:
    content: np.ndarray
    style: np.ndarray
    target: np.ndarray
    seed: int
    split: str = "train"


def _q8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def luminance(img: np.ndarray) -> np.ndarray:
    return img @ LUMA


def _grid(size: int):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def make_content(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    img = np.empty((size, size, 3))
    img[:] = rng.uniform(0, 1, 3)
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0, 1, 3)
        kind = rng.integers(3)
        cy, cx = rng.uniform(0.15, 0.85, 2)
        r = rng.uniform(0.12, 0.35)
        if kind == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif kind == 1:
            ry = rng.uniform(0.1, 0.35)
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= r)
        else:
            # upward triangle: apex at top, base at cy + r
            t = (yy - (cy - r)) / (2 * r)
            mask = (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * r)
        img[mask] = color
    return _q8(img)


def make_style(rng: np.random.Generator, size: int):
    """Return ``(style_image, palette)``; palette rows sorted by luminance."""
    n = int(rng.integers(3, 6))
    palette = rng.uniform(0, 1, (n, 3))
    palette = palette[np.argsort(luminance(palette), kind="stable")]
    yy, xx = _grid(size)
    kind = rng.integers(3)
    if kind == 0:
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(0.15, 0.4)
        u = (np.cos(theta) * yy + np.sin(theta) * xx) / period
        idx = np.floor(u * n).astype(int) % n
    elif kind == 1:
        cell = rng.choice([2, 4, 8])
        cy = np.floor(yy * size / cell).astype(int)
        cx = np.floor(xx * size / cell).astype(int)
        idx = (cy + cx) % n
    else:
        noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8, mode="wrap")
        ranks = np.argsort(np.argsort(noise, axis=None)).reshape(size, size)
        idx = np.minimum(ranks * n // (size * size), n - 1)
    perm = rng.permutation(n)
    return _q8(palette[perm[idx]]), palette


def stylize(content: np.ndarray, style: np.ndarray, palette: np.ndarray) -> np.ndarray:
    n = len(palette)
    band = np.minimum(np.floor(luminance(content) * n).astype(int), n - 1)
    return _q8(0.7 * palette[band] + 0.3 * style)


def item_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_triplet(seed: int, image_size: int = 16) -> Triplet:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    content = make_content(rng, image_size)
    style, palette = make_style(rng, image_size)
    return Triplet(content, style, stylize(content, style, _q8(palette)), seed)


def split_assignment(n: int, seed: int) -> List[str]:
    """95/5 train/val split by seeded uniform permutation."""
    n_val = int(round(n * VAL_FRACTION))
    if n >= 2:
        n_val = max(n_val, 1)
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117])).permutation(n)
    tags = ["train"] * n
    for i in order[:n_val]:
        tags[i] = "val"
    return tags


def generate_dataset(n: int, seed: int, image_size: int = 16) -> List[Triplet]:
    if n < 1:
        raise ValueError(f"need n >= 1 triplets, got {n}")
    tags = split_assignment(n, seed)
    out = []
    for i in range(n):
        t = generate_triplet(item_seed(seed, i), image_size)
        t.split = tags[i]
        out.append(t)
    return out


# -- image I/O --------------------------------------------------------------

def to_bytes8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    """Write an ``(H, W, 3)`` float image as binary PPM (P6) or PNG by suffix."""
    path = Path(path)
    data = to_bytes8(img)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(data, "RGB").save(path, format="PNG")
        return
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1: pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    """Read a PPM, or a PNG through Pillow, as ``(H, W, 3)`` floats in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return read_ppm(path)


# -- dataset directories ----------------------------------------------------

def write_dataset(root, n: int, seed: int, image_size: int = 16) -> Path:
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    items = []
    for i, t in enumerate(generate_dataset(n, seed, image_size)):
        names = {}
        for role in ("content", "style", "target"):
            name = f"images/{i:05d}_{role}.ppm"
            write_image(root / name, getattr(t, role))
            names[role] = name
        items.append({"index": i, "seed": t.seed, "split": t.split, **names})
    manifest = {"n": n, "seed": seed, "image_size": image_size, "items": items}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_dataset(root) -> List[Triplet]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    return [Triplet(read_ppm(root / it["content"]), read_ppm(root / it["style"]),
                    read_ppm(root / it["target"]), it["seed"], it["split"])
            for it in manifest["items"]]


def directory_hash(root) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def data_root(default: str = "data") -> Path:
    return Path(os.environ.get("STYLEVAR_DATA_ROOT", default))


def checkpoint_root(default: str = "checkpoints") -> Path:
    return Path(os.environ.get("STYLEVAR_CKPT_ROOT", default))


# -- augmentation -----------------------------------------------------------

def augment_content(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rotation by one of {-10, 0, +10} degrees, then brightness x U[0.8, 1.2]."""
    angle = float(rng.choice([-10.0, 0.0, 10.0]))
    out = img
    if angle:
        out = ndimage.rotate(img, angle, axes=(0, 1), reshape=False, order=1, mode="nearest")
    return np.clip(out * rng.uniform(0.8, 1.2), 0.0, 1.0)


def augment_style(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random crop covering 87.5% of the area, resized back bilinearly."""
    size = img.shape[0]
    side = int(round(np.sqrt(0.875) * size))
    y0, x0 = rng.integers(0, size - side + 1, 2)
    crop = img[y0:y0 + side, x0:x0 + side]
    return np.clip(interpolate(crop, size, size), 0.0, 1.0)


def iter_split(triplets: Sequence[Triplet], split: str) -> Iterator[Triplet]:
    return (t for t in triplets if t.split == split)


def stack(triplets: Sequence[Triplet], role: str, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    items = triplets if indices is None else [triplets[i] for i in indices]
    return np.stack([getattr(t, role) for t in items])
