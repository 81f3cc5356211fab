"""Binary checkpoints for encoders and discriminators.

Layout (all little-endian)::

    b"ADDF"                      magic
    u32 version                  currently 1
    u32 ndim, u32 dims[ndim]     stack input shape
    u32 layer_count
    per layer:
        u32 tag                  layer type (see autodiff.LAYER_TYPES)
        u32 nconf, f64 conf[nconf]
        u32 nparams
        per param: u32 ndim, u32 dims[ndim], f64 values[prod(dims)]

Metadata lives next to the binary in ``<path>.meta`` as UTF-8 ``key=value`` lines.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointCorruptError, CheckpointMagicError, CheckpointVersionError
from .models import ArchSpec, DiscriminatorModel, EncoderModel

MAGIC = b"ADDF"
VERSION = 1


def _layer_from_config(tag: int, conf: list[float]) -> ad.Layer:
    cls = ad.LAYER_TYPES.get(tag)
    if cls is None:
        raise CheckpointCorruptError(f"unknown layer tag {tag}")
    try:
        if cls is ad.Affine:
            return ad.Affine(int(conf[0]), int(conf[1]))
        if cls is ad.Conv2D:
            cin, cout, k, s, p = (int(c) for c in conf)
            return ad.Conv2D(cin, cout, k, s, p)
        if cls is ad.MaxPool:
            return ad.MaxPool(int(conf[0]), int(conf[1]))
        if cls is ad.DropoutSite:
            return ad.DropoutSite(conf[0], bool(conf[1]))
        return cls()
    except (IndexError, ValueError) as exc:
        raise CheckpointCorruptError(f"bad configuration for layer tag {tag}: {conf}") from exc


def encode_stack(stack: ad.LayerStack) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    out.append(struct.pack(f"<I{len(stack.input_shape)}I", len(stack.input_shape), *stack.input_shape))
    out.append(struct.pack("<I", len(stack.layers)))
    for layer in stack.layers:
        conf = layer.config()
        out.append(struct.pack(f"<II{len(conf)}d", layer.tag, len(conf), *conf))
        out.append(struct.pack("<I", len(layer.params)))
        for p in layer.params:
            out.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
            out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointCorruptError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else list(vals)


def decode_stack(data: bytes) -> ad.LayerStack:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointMagicError(f"not a checkpoint: bad magic {data[:4]!r}")
    r = _Reader(data)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    ndim = r.u32()
    input_shape = tuple(r.u32(ndim)) if ndim > 1 else (r.u32(),)
    layers = []
    for _ in range(r.u32()):
        tag, nconf = r.u32(2)
        conf = list(struct.unpack(f"<{nconf}d", r.take(8 * nconf)))
        layer = _layer_from_config(tag, conf)
        nparams = r.u32()
        if nparams != len(layer.params):
            raise CheckpointCorruptError(f"layer {layer!r} expects {len(layer.params)} params, file has {nparams}")
        for p in layer.params:
            pdim = r.u32()
            shape = tuple(r.u32(pdim)) if pdim > 1 else (r.u32(),)
            if shape != p.shape:
                raise CheckpointCorruptError(f"parameter shape {shape} does not match {layer!r}")
            p[...] = np.frombuffer(r.take(8 * p.size), dtype="<f8").reshape(shape)
        layers.append(layer)
    if r.pos != len(data):
        raise CheckpointCorruptError(f"{len(data) - r.pos} trailing bytes after last layer")
    try:
        return ad.LayerStack(layers, input_shape)
    except ValueError as exc:
        raise CheckpointCorruptError(f"layers do not compose: {exc}") from exc


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def write_meta(path, meta: dict) -> None:
    lines = [f"{k}={v}" for k, v in meta.items()]
    _meta_path(Path(path)).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_meta(path) -> dict[str, str]:
    mp = _meta_path(Path(path))
    if not mp.exists():
        return {}
    meta = {}
    for line in mp.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def _arch_meta(arch: ArchSpec | None) -> dict:
    if arch is None:
        return {}
    return {"arch": arch.preset, "input_dim": arch.input_dim,
            "hidden": ",".join(map(str, arch.hidden)),
            "disc_hidden": ",".join(map(str, arch.disc_hidden)),
            "image_size": arch.image_size}


def save_checkpoint(path, model, metadata: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_stack(model.stack))
    meta = {"K": model.K}
    if isinstance(model, EncoderModel):
        meta.update(kind="encoder", frozen=int(model.frozen), seed=model.seed, **_arch_meta(model.arch))
    else:
        meta.update(kind="discriminator", head=model.head, l1_lambda=repr(model.l1_lambda))
    meta.update(metadata or {})
    write_meta(path, meta)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def load_checkpoint(path):
    """Rebuild the model saved at ``path``; returns ``(model, metadata)``."""
    path = Path(path)
    stack = decode_stack(path.read_bytes())
    meta = read_meta(path)
    K = int(meta.get("K", stack.output_shape[0]))
    if meta.get("kind") == "discriminator":
        model = DiscriminatorModel(stack, K, meta.get("head", "joint"), float(meta.get("l1_lambda", 0.0)))
    else:
        arch = None
        if "arch" in meta:
            arch = ArchSpec(preset=meta["arch"], input_dim=int(meta.get("input_dim", 2)),
                            hidden=_ints(meta.get("hidden", "")),
                            disc_hidden=_ints(meta.get("disc_hidden", "")),
                            image_size=int(meta.get("image_size", 28)))
        seed = meta.get("seed")
        model = EncoderModel(stack, K, arch, int(seed) if seed not in (None, "None") else None)
        if meta.get("frozen") == "1":
            model.freeze()
    return model, meta
