"""A small patch-embedding image feature extractor with an exact reverse pass.

Two variants share the patch embedding and the output projection:

``linear-pool``
    patchify -> affine embedding -> mean over patches -> affine to K
``tiny-attn``
    patchify -> affine embedding -> L pre-norm transformer blocks
    (multi-head self-attention and a ReLU feed-forward, both residual)
    -> mean over patches -> affine to K

All arrays are float64.  Batched calls take (B, H, W, C) pixel arrays in [0, 1].
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, ValidationError, WeightFileError
from .seeding import stream

LN_EPS = 1e-5
VARIANTS = ("linear-pool", "tiny-attn")
MAGIC = b"CVDCMW01"


@dataclass(frozen=True)
class ExtractorConfig:
    resolution: int = 32
    patch_size: int = 8
    embed_dim: int = 32
    num_heads: int = 2
    num_blocks: int = 1
    feature_dim: int = 16
    variant: str = "tiny-attn"
    channels: int = 3
    positional: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.resolution <= 0 or self.patch_size <= 0 or self.resolution % self.patch_size:
            raise ValidationError(
                f"resolution {self.resolution} must be a positive multiple of patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ValidationError(f"embed_dim {self.embed_dim} must be divisible by num_heads {self.num_heads}")
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be at least 1")
        if self.num_blocks < 0:
            raise ValidationError("num_blocks must be non-negative")

    @property
    def n_patches(self) -> int:
        return (self.resolution // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def blocks(self) -> int:
        return self.num_blocks if self.variant == "tiny-attn" else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# weights


def weight_shapes(config: ExtractorConfig) -> dict:
    d, f = config.embed_dim, config.patch_dim
    shapes = {"embed.w": (f, d), "embed.b": (d,)}
    if config.positional:
        shapes["pos"] = (config.n_patches, d)
    for l in range(config.blocks):
        p = f"block{l}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.wq": (d, d),
                p + "attn.bq": (d,),
                p + "attn.wk": (d, d),
                p + "attn.bk": (d,),
                p + "attn.wv": (d, d),
                p + "attn.bv": (d,),
                p + "attn.wo": (d, d),
                p + "attn.bo": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "ffn.w1": (d, 4 * d),
                p + "ffn.b1": (4 * d,),
                p + "ffn.w2": (4 * d, d),
                p + "ffn.b2": (d,),
            }
        )
    shapes["head.w"] = (d, config.feature_dim)
    shapes["head.b"] = (config.feature_dim,)
    return shapes


def init_weights(config: ExtractorConfig, seed: int = 0) -> dict:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    rng = stream(seed, "extractor-init")
    weights = {}
    for name, shape in weight_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            weights[name] = rng.uniform(-limit, limit, size=shape)
        elif leaf == "g":
            weights[name] = np.ones(shape)
        else:
            weights[name] = np.zeros(shape)
    return weights


def num_params(weights: dict) -> int:
    return int(sum(w.size for w in weights.values()))


def sum_squares(weights: dict) -> float:
    return float(sum(np.sum(w * w) for w in weights.values()))


def zeros_like(weights: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in weights.items()}


def check_weights(config: ExtractorConfig, weights: dict) -> None:
    shapes = weight_shapes(config)
    if set(shapes) != set(weights):
        missing = sorted(set(shapes) - set(weights))
        extra = sorted(set(weights) - set(shapes))
        raise ValidationError(f"weight names do not match config (missing {missing}, unexpected {extra})")
    for k, s in shapes.items():
        if tuple(weights[k].shape) != s:
            raise ValidationError(f"weight {k} has shape {weights[k].shape}, expected {s}")


# ---------------------------------------------------------------------------
# forward / backward


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Split (H, W, C) or (B, H, W, C) into row-major non-overlapping patches.

    Within a patch, pixels are ordered row-major with channels innermost.
    """
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    b, h, w, c = x.shape
    p = patch_size
    if h % p or w % p:
        raise ValidationError(f"image size {h}x{w} is not divisible by patch size {p}; height and width must both be multiples of {p}")
    out = x.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // p) * (w // p), p * p * c)
    return out[0] if single else out


def _as_batch(config: ExtractorConfig, images) -> tuple:
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.dtype == np.uint8:
        x = x.astype(np.float64) / 255.0
    else:
        x = x.astype(np.float64, copy=False)
    if x.shape[1:] != (config.resolution, config.resolution, config.channels):
        raise ValidationError(
            f"images must be {config.resolution}x{config.resolution}x{config.channels}, got {x.shape[1:]}; resize first"
        )
    return x, single


def _check(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in extractor layer {name}")


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dg = np.einsum("bnd,bnd->d", dy, xhat)
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _affine(x, w, b):
    return x @ w + b


def _affine_grads(x, dy):
    """Weight and bias gradients of y = x @ w + b, summed over leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dy.reshape(-1, dy.shape[-1])
    return x2.T @ d2, d2.sum(axis=0)


def _heads(x, h):
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def forward_with_cache(config: ExtractorConfig, weights: dict, images) -> tuple:
    """Feature maps plus the activations needed by :func:`backward`."""
    x, single = _as_batch(config, images)
    w = weights
    patches = patchify(x, config.patch_size)
    h = _affine(patches, w["embed.w"], w["embed.b"])
    if config.positional:
        h = h + w["pos"]
    _check("embed", h)
    cache = {"patches": patches, "blocks": [], "single": single}
    nh = config.num_heads
    scale = 1.0 / np.sqrt(config.embed_dim // nh)
    for l in range(config.blocks):
        p = f"block{l}."
        a, ln1 = _layer_norm(h, w[p + "ln1.g"], w[p + "ln1.b"])
        q = _heads(_affine(a, w[p + "attn.wq"], w[p + "attn.bq"]), nh)
        k = _heads(_affine(a, w[p + "attn.wk"], w[p + "attn.bk"]), nh)
        v = _heads(_affine(a, w[p + "attn.wv"], w[p + "attn.bv"]), nh)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(axis=-1, keepdims=True)
        o = _merge(att @ v)
        h1 = h + _affine(o, w[p + "attn.wo"], w[p + "attn.bo"])
        _check(p + "attn", h1)
        a2, ln2 = _layer_norm(h1, w[p + "ln2.g"], w[p + "ln2.b"])
        u = _affine(a2, w[p + "ffn.w1"], w[p + "ffn.b1"])
        r = np.maximum(u, 0.0)
        h2 = h1 + _affine(r, w[p + "ffn.w2"], w[p + "ffn.b2"])
        _check(p + "ffn", h2)
        cache["blocks"].append(
            {"a": a, "ln1": ln1, "q": q, "k": k, "v": v, "att": att, "o": o, "a2": a2, "ln2": ln2, "u": u, "r": r}
        )
        h = h2
    pooled = h.mean(axis=1)
    z = _affine(pooled, w["head.w"], w["head.b"])
    _check("head", z)
    cache["pooled"] = pooled
    return (z[0] if single else z), cache


def forward(config: ExtractorConfig, weights: dict, images) -> np.ndarray:
    """K-dimensional feature map of one image, or a (B, K) array for a batch."""
    return forward_with_cache(config, weights, images)[0]


def backward(config: ExtractorConfig, weights: dict, images, upstream, cache=None) -> dict:
    """Gradient of ``sum(upstream * z)`` with respect to every weight."""
    if cache is None:
        _, cache = forward_with_cache(config, weights, images)
    dz = np.asarray(upstream, dtype=np.float64)
    if cache["single"]:
        dz = dz[None]
    n_images = cache["patches"].shape[0]
    if dz.shape != (n_images, config.feature_dim):
        raise ValidationError(f"upstream gradient has shape {dz.shape}, expected {(n_images, config.feature_dim)}")
    w = weights
    g = {}
    g["head.w"], g["head.b"] = _affine_grads(cache["pooled"], dz)
    dpooled = dz @ w["head.w"].T
    n = config.n_patches
    dh = np.broadcast_to(dpooled[:, None, :] / n, (n_images, n, config.embed_dim)).copy()
    nh = config.num_heads
    scale = 1.0 / np.sqrt(config.embed_dim // nh)
    for l in reversed(range(config.blocks)):
        p = f"block{l}."
        c = cache["blocks"][l]
        g[p + "ffn.w2"], g[p + "ffn.b2"] = _affine_grads(c["r"], dh)
        du = (dh @ w[p + "ffn.w2"].T) * (c["u"] > 0)
        g[p + "ffn.w1"], g[p + "ffn.b1"] = _affine_grads(c["a2"], du)
        dx, g[p + "ln2.g"], g[p + "ln2.b"] = _layer_norm_back(du @ w[p + "ffn.w1"].T, w[p + "ln2.g"], c["ln2"])
        dh1 = dh + dx

        g[p + "attn.wo"], g[p + "attn.bo"] = _affine_grads(c["o"], dh1)
        do = _heads(dh1 @ w[p + "attn.wo"].T, nh)
        att = c["att"]
        datt = do @ c["v"].transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = _merge(ds @ c["k"])
        dk = _merge(ds.transpose(0, 1, 3, 2) @ c["q"])
        dv = _merge(dv)
        g[p + "attn.wq"], g[p + "attn.bq"] = _affine_grads(c["a"], dq)
        g[p + "attn.wk"], g[p + "attn.bk"] = _affine_grads(c["a"], dk)
        g[p + "attn.wv"], g[p + "attn.bv"] = _affine_grads(c["a"], dv)
        da = dq @ w[p + "attn.wq"].T + dk @ w[p + "attn.wk"].T + dv @ w[p + "attn.wv"].T
        dx, g[p + "ln1.g"], g[p + "ln1.b"] = _layer_norm_back(da, w[p + "ln1.g"], c["ln1"])
        dh = dh1 + dx
    if config.positional:
        g["pos"] = dh.sum(axis=0)
    g["embed.w"], g["embed.b"] = _affine_grads(cache["patches"], dh)
    return {k: g[k] for k in weights}


def attention_maps(cache: dict) -> list:
    return [c["att"] for c in cache["blocks"]]


# ---------------------------------------------------------------------------
# weight files
#
# layout: MAGIC | uint64 header length | JSON header | float32 LE tensors | uint32 CRC32 of all preceding bytes


def snap_float32(weights: dict) -> dict:
    """Round weights to float32 precision, the precision stored on disk."""
    return {k: v.astype("<f4").astype(np.float64) for k, v in weights.items()}


def save_weights(weights: dict, path, config: ExtractorConfig) -> None:
    check_weights(config, weights)
    tensors = []
    offset = 0
    blobs = []
    for name, arr in weights.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config.to_dict(), "dtype": "<f4", "tensors": tensors}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_weight_file(path) -> tuple:
    """Returns ``(config, weights)`` from a weight file."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 or raw[: len(MAGIC)] != MAGIC:
        raise WeightFileError(f"{path}: not a weight file or truncated")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen + 4 > len(raw):
        raise WeightFileError(f"{path}: truncated header")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise WeightFileError(f"{path}: checksum mismatch (file truncated or corrupted)")
    try:
        header = json.loads(raw[16 : 16 + hlen])
        config = ExtractorConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFileError(f"{path}: unreadable header ({exc})") from exc
    data = raw[16 + hlen : -4]
    weights = {}
    for t in header["tensors"]:
        start, stop = t["offset"], t["offset"] + t["nbytes"]
        if stop > len(data):
            raise WeightFileError(f"{path}: tensor {t['name']} extends past the end of the data")
        weights[t["name"]] = np.frombuffer(data[start:stop], dtype="<f4").astype(np.float64).reshape(t["shape"])
    try:
        check_weights(config, weights)
    except ValidationError as exc:
        raise WeightFileError(f"{path}: {exc}") from exc
    return config, weights


def load_weights(path, config: ExtractorConfig = None) -> dict:
    stored, weights = read_weight_file(path)
    if config is not None and stored != config:
        raise WeightFileError(f"{path}: stored config {stored} does not match requested {config}")
    return weights
