"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SVAR" | u32 version | u32 meta_len | meta JSON (UTF-8, sorted keys)
    u32 n_entries, then per entry:
        u16 name_len | name (UTF-8) | u8 dtype code | u8 ndim | u32 dim * ndim
        u64 payload_len | u32 crc32(payload) | payload (row-major, little-endian)

Dtype codes: 1 = float64, 2 = float32, 3 = int64. Entry names are
namespaced: ``model/``, ``adapter/``, ``optim/m/``, ``optim/v/``,
``tokenizer/``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

MAGIC = b"SVAR"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 1, np.dtype("float32"): 2, np.dtype("int64"): 3}


class CheckpointError(ValueError):
    pass


def _encode_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    mb = _encode_meta(meta)
    parts += [struct.pack("<I", len(mb)), mb, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", code, arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  struct.pack("<QI", len(payload), zlib.crc32(payload)), payload]
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, skip_prefixes: Iterable[str] = ()) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Read ``(meta, arrays)``; entries whose name starts with a skipped prefix are not decoded."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a SVAR checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = r.unpack("<I", "meta length")
    try:
        meta = json.loads(r.take(mlen, "meta").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    (n,) = r.unpack("<I", "entry count")
    skip = tuple(skip_prefixes)
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(n):
        (nlen,) = r.unpack("<H", "entry name length")
        name = r.take(nlen, "entry name").decode("utf-8", errors="replace")
        code, ndim = r.unpack("<BB", f"{name} header")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: entry {name} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        plen, crc = r.unpack("<QI", f"{name} payload header")
        dt = _DTYPES[code]
        if plen != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{path}: entry {name} payload size does not match shape {shape}")
        payload = r.take(plen, f"{name} payload")
        if name.startswith(skip) if skip else False:
            continue
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{path}: checksum mismatch in entry {name}")
        arrays[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return meta, arrays


# -- training state ---------------------------------------------------------

@dataclass
class TrainingState:
    config: "object"
    tokenizer: "object"
    model: "object"
    optimizer: "object"
    meta: dict


def tokenizer_arrays(tok) -> Dict[str, np.ndarray]:
    return {"tokenizer/projection": tok.projection, "tokenizer/decoder_weight": tok.decoder_weight,
            "tokenizer/decoder_bias": tok.decoder_bias, "tokenizer/codebook": tok.codebook.vectors}


def save_training_state(path, config, tokenizer, model, optimizer=None, extra: Optional[dict] = None) -> None:
    arrays = dict(tokenizer_arrays(tokenizer))
    arrays.update(model.state_arrays(adapters=True))
    meta = {"config": config.to_dict(), "adapters": model.has_adapters, "merges": model.merges,
            "tokenizer_checksum": tokenizer.checksum(), **(extra or {})}
    if optimizer is not None:
        meta["optimizer"] = {"step": optimizer.step, "betas": list(optimizer.betas),
                             "eps": optimizer.eps, "weight_decay": optimizer.weight_decay}
        for k in optimizer.m:
            arrays[f"optim/m/{k}"] = optimizer.m[k]
            arrays[f"optim/v/{k}"] = optimizer.v[k]
    save_checkpoint(path, meta, arrays)


def load_training_state(path, reference: bool = False) -> TrainingState:
    """Rebuild config, tokenizer, model and optimizer state.

    ``reference`` skips the adapter namespace (and its optimizer moments),
    giving the base-weights-only reference policy.
    """
    from .config import RunConfig
    from .model import StyleVAR
    from .nn import load_arrays
    from .optim import AdamWState
    from .tokenizer import Codebook, MultiScaleTokenizer

    skip = ("adapter/",) if reference else ()
    meta, arrays = load_checkpoint(path, skip_prefixes=skip)
    config = RunConfig.from_dict(meta["config"])
    try:
        tok = MultiScaleTokenizer(config.scale_schedule(), config.data.image_size,
                                  arrays["tokenizer/projection"].copy(),
                                  arrays["tokenizer/decoder_weight"].copy(),
                                  arrays["tokenizer/decoder_bias"].copy(),
                                  Codebook(arrays["tokenizer/codebook"].copy()))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing tokenizer entry {exc}") from exc
    if tok.checksum() != meta.get("tokenizer_checksum"):
        raise CheckpointError(f"{path}: tokenizer checksum mismatch")
    model = StyleVAR(config.model_config())
    object.__setattr__(model, "merges", int(meta.get("merges", 0)))
    base = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    load_arrays(model.named_parameters(), base, what=f"{path} model")
    adapters = {k[len("adapter/"):]: v for k, v in arrays.items() if k.startswith("adapter/")}
    if meta.get("adapters") and not reference:
        model.attach_adapters()
        load_arrays(model.named_adapters(), adapters, what=f"{path} adapters")
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = AdamWState(betas=tuple(o["betas"]), eps=o["eps"], weight_decay=o["weight_decay"],
                         step=o["step"])
        for k, v in arrays.items():
            if k.startswith("optim/m/"):
                name = k[len("optim/m/"):]
                opt.m[name] = v.copy()
                opt.v[name] = arrays[f"optim/v/{name}"].copy()
    return TrainingState(config, tok, model, opt, meta)
