"""Forward-only U-Net inference from a serialized weight container.

One small architecture family serves two roles: an epsilon-prediction network
for diffusion sampling (2-channel input: noisy slice + analytic
reconstruction) and a direct denoiser that maps an analytic reconstruction
slice to a clean slice. Conditioning values (diffusion step, slice index,
number of views) enter through sinusoidal embeddings, both as a bias inside
every residual block and as cross-attention context at the bottleneck.

Weight container (little-endian throughout)::

    magic 'CDPA' | u32 version=1 | u32 tensor_count | u32 descriptor_len |
    descriptor UTF-8 JSON |
    per tensor: u32 name_len | name | u8 dtype(0=f32) | u8 rank |
                rank x u64 dims | row-major f32 payload |
    footer: u32 CRC32 of all preceding bytes

The same container format carries inference parity fixtures (tensors named
``input``, ``expected_output`` plus condition scalars).
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "WeightFormatError",
    "BadMagicError",
    "BadVersionError",
    "TruncatedFileError",
    "ChecksumError",
    "TensorShapeError",
    "MissingTensorError",
    "NonFiniteWeightError",
    "ConditionBundle",
    "WeightStore",
    "sinusoidal_embed",
    "conv2d",
    "group_norm",
    "silu",
    "upsample_nearest",
    "softmax",
    "expected_tensors",
    "UNetModel",
    "unet_forward",
    "load_weights",
    "save_weights",
    "read_container",
    "write_container",
]

MAGIC = b"CDPA"
VERSION = 1
DTYPE_F32 = 0

# Keep intermediate conv buffers under ~200 MB by chunking the batch axis.
_CONV_CHUNK_ELEMS = 48_000_000


class WeightFormatError(ValueError):
    """Base class for weight-container failures."""


class BadMagicError(WeightFormatError):
    pass


class BadVersionError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class ChecksumError(WeightFormatError):
    pass


class TensorShapeError(WeightFormatError):
    pass


class MissingTensorError(WeightFormatError):
    pass


class NonFiniteWeightError(WeightFormatError):
    pass


@dataclass(frozen=True)
class ConditionBundle:
    """Per-slice conditioning: analytic reconstruction slice plus scalar tags."""

    fdk_slice: np.ndarray | None
    slice_index: int
    num_views: int
    timestep: int | None = None

    def __post_init__(self):
        if self.slice_index < 0:
            raise ValueError("slice_index must be nonnegative")
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

def sinusoidal_embed(value, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos embedding at geometrically spaced frequencies.

    ``value`` may be a scalar or an array; the embedding axis is appended.
    Even positions carry sines, odd positions cosines, so value 0 maps to
    (0, 1, 0, 1, ...).
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError("embedding dim must be even and >= 2")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    v = np.asarray(value, dtype=np.float64)
    phase = v[..., None] * freqs
    out = np.empty(v.shape + (dim,), dtype=np.float32)
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Cross-correlation with zero 'same' padding for 3x3 (or none for 1x1)."""
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if kh == 1 and kw == 1:
        y = np.tensordot(weight[:, :, 0, 0], x, axes=([1], [1]))  # (cout, b, h, w)
        return (y.transpose(1, 0, 2, 3) + bias[None, :, None, None]).astype(np.float32)
    if (kh, kw) != (3, 3):
        raise ValueError("only 1x1 and 3x3 kernels are supported")
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho = h // stride if stride > 1 else h
    wo = w // stride if stride > 1 else w
    # Nine shifted channel contractions beat an explicit im2col here: the GEMM
    # keeps a wide trailing dimension and the 9x input copy never materializes.
    acc = np.zeros((cout, b, ho, wo), dtype=np.float32)
    for di in range(3):
        for dj in range(3):
            sl = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            acc += np.tensordot(weight[:, :, di, dj], sl, axes=([1], [1]))
    return (acc.transpose(1, 0, 2, 3) + bias[None, :, None, None]).astype(np.float32)


def group_norm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, groups: int,
               eps: float = 1e-5) -> np.ndarray:
    b, c, h, w = x.shape
    if c % groups != 0:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    g = x.reshape(b, groups, -1)
    mean = g.mean(axis=2, dtype=np.float64).astype(np.float32)
    centered = g - mean[:, :, None]
    var = (centered * centered).sum(axis=2, dtype=np.float64) / g.shape[2]
    scale = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    normed = (centered * scale[:, :, None]).reshape(b, c, h, w)
    return normed * weight[None, :, None, None] + bias[None, :, None, None]


def silu(x: np.ndarray) -> np.ndarray:
    return (x / (1.0 + np.exp(-x))).astype(np.float32)


def upsample_nearest(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return (e / np.sum(e, axis=axis, keepdims=True)).astype(np.float32)


# ---------------------------------------------------------------------------
# Architecture contract
# ---------------------------------------------------------------------------

_DEFAULT_DESCRIPTOR = {
    "arch": "unet-v1",
    "mode": "noise-prediction",
    "in_channels": 2,
    "out_channels": 1,
    "channels": [32, 64, 128],
    "groups": 8,
    "embed_dim": 128,
    "cond_fields": ["timestep", "slice_index", "num_views"],
    "field_embed_dim": 32,
    "max_period": 10000.0,
}


def default_descriptor(mode: str = "noise-prediction") -> dict:
    desc = dict(_DEFAULT_DESCRIPTOR)
    desc["mode"] = mode
    if mode == "denoise":
        desc["in_channels"] = 1
        desc["cond_fields"] = ["slice_index", "num_views"]
    return desc


def _res_block_tensors(prefix: str, cin: int, cout: int, embed_dim: int) -> dict:
    t = {
        f"{prefix}.norm1.weight": (cin,),
        f"{prefix}.norm1.bias": (cin,),
        f"{prefix}.conv1.weight": (cout, cin, 3, 3),
        f"{prefix}.conv1.bias": (cout,),
        f"{prefix}.emb.weight": (cout, embed_dim),
        f"{prefix}.emb.bias": (cout,),
        f"{prefix}.norm2.weight": (cout,),
        f"{prefix}.norm2.bias": (cout,),
        f"{prefix}.conv2.weight": (cout, cout, 3, 3),
        f"{prefix}.conv2.bias": (cout,),
    }
    if cin != cout:
        t[f"{prefix}.skip.weight"] = (cout, cin, 1, 1)
        t[f"{prefix}.skip.bias"] = (cout,)
    return t


def _attention_tensors(prefix: str, channels: int, context_dim: int) -> dict:
    return {
        f"{prefix}.norm.weight": (channels,),
        f"{prefix}.norm.bias": (channels,),
        f"{prefix}.q.weight": (channels, channels),
        f"{prefix}.q.bias": (channels,),
        f"{prefix}.k.weight": (channels, context_dim),
        f"{prefix}.k.bias": (channels,),
        f"{prefix}.v.weight": (channels, context_dim),
        f"{prefix}.v.bias": (channels,),
        f"{prefix}.out.weight": (channels, channels),
        f"{prefix}.out.bias": (channels,),
    }


def expected_tensors(descriptor: dict) -> dict[str, tuple[int, ...]]:
    """Full name -> shape map the descriptor implies; the load-time contract."""
    if descriptor.get("arch") != "unet-v1":
        raise TensorShapeError(f"unsupported architecture {descriptor.get('arch')!r}")
    c0, c1, c2 = descriptor["channels"]
    ed = descriptor["embed_dim"]
    fed = descriptor["field_embed_dim"]
    n_fields = len(descriptor["cond_fields"])
    in_ch = descriptor["in_channels"]
    out_ch = descriptor["out_channels"]
    t: dict[str, tuple[int, ...]] = {
        "cond.lin1.weight": (ed, n_fields * fed),
        "cond.lin1.bias": (ed,),
        "cond.lin2.weight": (ed, ed),
        "cond.lin2.bias": (ed,),
        "stem.weight": (c0, in_ch, 3, 3),
        "stem.bias": (c0,),
        "down0.weight": (c1, c0, 3, 3),
        "down0.bias": (c1,),
        "down1.weight": (c2, c1, 3, 3),
        "down1.bias": (c2,),
        "up1.weight": (c1, c2, 3, 3),
        "up1.bias": (c1,),
        "up0.weight": (c0, c1, 3, 3),
        "up0.bias": (c0,),
        "head.norm.weight": (c0,),
        "head.norm.bias": (c0,),
        "head.weight": (out_ch, c0, 3, 3),
        "head.bias": (out_ch,),
    }
    t.update(_res_block_tensors("enc0", c0, c0, ed))
    t.update(_res_block_tensors("enc1", c1, c1, ed))
    t.update(_res_block_tensors("mid1", c2, c2, ed))
    t.update(_attention_tensors("attn", c2, c2))
    t.update(_attention_tensors("xattn", c2, fed))
    t.update(_res_block_tensors("mid2", c2, c2, ed))
    t.update(_res_block_tensors("dec1", 2 * c1, c1, ed))
    t.update(_res_block_tensors("dec0", 2 * c0, c0, ed))
    return t


@dataclass(frozen=True)
class WeightStore:
    """Named tensors plus the architecture descriptor they satisfy."""

    descriptor: dict
    tensors: dict

    def validate(self) -> None:
        expected = expected_tensors(self.descriptor)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise MissingTensorError(f"descriptor requires tensor {name!r}, absent from file")
            got = self.tensors[name]
            if tuple(got.shape) != shape:
                raise TensorShapeError(f"tensor {name!r} has shape {tuple(got.shape)}, expected {shape}")
            if not np.all(np.isfinite(got)):
                raise NonFiniteWeightError(f"tensor {name!r} contains non-finite values")


# ---------------------------------------------------------------------------
# Container serialization
# ---------------------------------------------------------------------------

def write_container(path: str, descriptor: dict, tensors: dict) -> None:
    """Serialize named float32 tensors with a JSON descriptor and CRC footer."""
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    body += struct.pack("<I", len(tensors))
    desc_bytes = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(desc_bytes))
    body += desc_bytes
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        name_bytes = name.encode("utf-8")
        body += struct.pack("<I", len(name_bytes))
        body += name_bytes
        body += struct.pack("<BB", DTYPE_F32, arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes(order="C")
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(body))
    import os
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(
                f"file ends at byte {len(self.blob)}, needed {self.pos + n}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def read_container(path: str) -> tuple[dict, dict]:
    """Parse a container; returns (descriptor, tensors). Verifies the CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise TruncatedFileError("file shorter than the magic header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise TruncatedFileError("file ends inside the version field")
    r = _Reader(blob[:-4])
    r.pos = 4
    version = r.u32()
    if version != VERSION:
        raise BadVersionError(f"unsupported container version {version}")
    if len(blob) < 12:
        raise TruncatedFileError("file ends before the checksum footer")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(f"CRC32 mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")
    tensor_count = r.u32()
    desc_len = r.u32()
    try:
        descriptor = json.loads(r.take(desc_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"descriptor is not valid JSON: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    for _ in range(tensor_count):
        name = r.take(r.u32()).decode("utf-8")
        dtype = r.u8()
        if dtype != DTYPE_F32:
            raise WeightFormatError(f"tensor {name!r} has unsupported dtype code {dtype}")
        rank = r.u8()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.pos != len(blob) - 4:
        raise WeightFormatError(f"{len(blob) - 4 - r.pos} unexpected trailing bytes before footer")
    return descriptor, tensors


def load_weights(path: str) -> WeightStore:
    """Read and fully validate a network weight container."""
    descriptor, tensors = read_container(path)
    store = WeightStore(descriptor=descriptor, tensors=tensors)
    store.validate()
    return store


def save_weights(path: str, store: WeightStore) -> None:
    write_container(path, store.descriptor, store.tensors)


# ---------------------------------------------------------------------------
# Network forward pass
# ---------------------------------------------------------------------------

class UNetModel:
    """Inference engine over a validated :class:`WeightStore`.

    Weights are immutable after construction; ``forward`` is a pure function
    of (input, condition values), safe to call from concurrent workers.
    """

    def __init__(self, store: WeightStore):
        store.validate()
        self.descriptor = store.descriptor
        self.mode = store.descriptor["mode"]
        self.in_channels = int(store.descriptor["in_channels"])
        self.groups = int(store.descriptor["groups"])
        self.embed_dim = int(store.descriptor["embed_dim"])
        self.field_embed_dim = int(store.descriptor["field_embed_dim"])
        self.cond_fields = list(store.descriptor["cond_fields"])
        self.max_period = float(store.descriptor["max_period"])
        self.p = {k: np.asarray(v, dtype=np.float32) for k, v in store.tensors.items()}

    # -- conditioning -------------------------------------------------------

    def _field_values(self, field: str, timestep, slice_index, num_views, n: int) -> np.ndarray:
        src = {"timestep": timestep, "slice_index": slice_index, "num_views": num_views}[field]
        if src is None:
            raise ValueError(f"network conditions on {field!r} but no value was given")
        arr = np.asarray(src)
        if arr.ndim == 0:
            arr = np.full(n, float(arr))
        return arr.astype(np.float64)

    def _conditioning(self, n: int, timestep, slice_index, num_views, drop_condition: bool):
        segments = []
        tokens = []
        for field in self.cond_fields:
            vals = self._field_values(field, timestep, slice_index, num_views, n)
            emb = sinusoidal_embed(vals, self.field_embed_dim, self.max_period)
            if drop_condition and field != "timestep":
                emb = np.zeros_like(emb)
            segments.append(emb)
            tokens.append(emb)
        vec = np.concatenate(segments, axis=-1)
        e = vec @ self.p["cond.lin1.weight"].T + self.p["cond.lin1.bias"]
        e = silu(e) @ self.p["cond.lin2.weight"].T + self.p["cond.lin2.bias"]
        context = np.stack(tokens, axis=1)  # (n, fields, field_embed_dim)
        return e.astype(np.float32), context.astype(np.float32)

    # -- blocks -------------------------------------------------------------

    def _res_block(self, prefix: str, x: np.ndarray, e: np.ndarray) -> np.ndarray:
        p = self.p
        h = conv2d(silu(group_norm(x, p[f"{prefix}.norm1.weight"], p[f"{prefix}.norm1.bias"], self.groups)),
                   p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"])
        bias = silu(e) @ p[f"{prefix}.emb.weight"].T + p[f"{prefix}.emb.bias"]
        h = h + bias[:, :, None, None]
        h = conv2d(silu(group_norm(h, p[f"{prefix}.norm2.weight"], p[f"{prefix}.norm2.bias"], self.groups)),
                   p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"])
        if f"{prefix}.skip.weight" in p:
            x = conv2d(x, p[f"{prefix}.skip.weight"], p[f"{prefix}.skip.bias"])
        return x + h

    def _attention(self, prefix: str, x: np.ndarray, context: np.ndarray | None) -> np.ndarray:
        p = self.p
        b, c, h, w = x.shape
        normed = group_norm(x, p[f"{prefix}.norm.weight"], p[f"{prefix}.norm.bias"], self.groups)
        q_in = normed.reshape(b, c, h * w).transpose(0, 2, 1)  # (b, hw, c)
        kv_in = q_in if context is None else context
        q = q_in @ p[f"{prefix}.q.weight"].T + p[f"{prefix}.q.bias"]
        k = kv_in @ p[f"{prefix}.k.weight"].T + p[f"{prefix}.k.bias"]
        v = kv_in @ p[f"{prefix}.v.weight"].T + p[f"{prefix}.v.bias"]
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(c)
        attn = softmax(scores, axis=-1)
        out = attn @ v
        out = out @ p[f"{prefix}.out.weight"].T + p[f"{prefix}.out.bias"]
        return x + out.transpose(0, 2, 1).reshape(b, c, h, w)

    # -- full forward -------------------------------------------------------

    def forward(self, x: np.ndarray, timestep=None, slice_index=None, num_views=None,
                drop_condition: bool = False) -> np.ndarray:
        """Run the network on (B, C, H, W) float32; returns (B, H, W)."""
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"input must be (B, {self.in_channels}, H, W), got {x.shape}")
        if x.shape[2] % 4 != 0 or x.shape[3] % 4 != 0:
            raise ValueError("spatial dims must be divisible by 4 (two downsamples)")
        n = x.shape[0]
        p = self.p
        e, context = self._conditioning(n, timestep, slice_index, num_views, drop_condition)

        h = conv2d(x, p["stem.weight"], p["stem.bias"])
        s0 = self._res_block("enc0", h, e)
        h = conv2d(s0, p["down0.weight"], p["down0.bias"], stride=2)
        s1 = self._res_block("enc1", h, e)
        h = conv2d(s1, p["down1.weight"], p["down1.bias"], stride=2)
        h = self._res_block("mid1", h, e)
        h = self._attention("attn", h, None)
        h = self._attention("xattn", h, context)
        h = self._res_block("mid2", h, e)
        h = conv2d(upsample_nearest(h), p["up1.weight"], p["up1.bias"])
        h = self._res_block("dec1", np.concatenate([h, s1], axis=1), e)
        h = conv2d(upsample_nearest(h), p["up0.weight"], p["up0.bias"])
        h = self._res_block("dec0", np.concatenate([h, s0], axis=1), e)
        h = conv2d(silu(group_norm(h, p["head.norm.weight"], p["head.norm.bias"], self.groups)),
                   p["head.weight"], p["head.bias"])
        return h[:, 0]


def unet_forward(x: np.ndarray, cond: ConditionBundle, weights: WeightStore | UNetModel,
                 mode: str) -> np.ndarray:
    """Single-slice convenience wrapper around :class:`UNetModel`.

    noise-prediction mode expects ``x`` = noisy slice and consumes
    ``cond.fdk_slice`` as the second input channel; denoise mode expects
    ``x`` = the analytic reconstruction slice itself.
    """
    model = weights if isinstance(weights, UNetModel) else UNetModel(weights)
    if model.mode != mode:
        raise ValueError(f"weights are for mode {model.mode!r}, requested {mode!r}")
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError("x must be a single 2D slice")
    if model.in_channels == 2:
        if cond.fdk_slice is None:
            raise ValueError("this network needs cond.fdk_slice as its second channel")
        inp = np.stack([x, np.asarray(cond.fdk_slice, dtype=np.float32)])[None]
    else:
        inp = x[None, None]
    if mode == "noise-prediction" and cond.timestep is None:
        raise ValueError("noise-prediction mode needs cond.timestep")
    out = model.forward(inp, timestep=cond.timestep, slice_index=cond.slice_index,
                        num_views=cond.num_views)
    return out[0]


def denoise_slices(model: UNetModel, fdk_slices: np.ndarray, slice_indices, num_views: int,
                   batch: int = 64) -> np.ndarray:
    """Apply a denoise-mode network to a (S, H, W) stack of analytic slices."""
    if model.mode != "denoise":
        raise ValueError("denoise_slices needs a denoise-mode network")
    fdk_slices = np.asarray(fdk_slices, dtype=np.float32)
    idx = np.asarray(slice_indices, dtype=np.int64)
    out = np.empty_like(fdk_slices)
    for lo in range(0, fdk_slices.shape[0], batch):
        hi = min(lo + batch, fdk_slices.shape[0])
        out[lo:hi] = model.forward(fdk_slices[lo:hi, None], slice_index=idx[lo:hi],
                                   num_views=num_views)
    return out
