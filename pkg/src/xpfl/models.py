"""Teacher and student networks.

The teacher is a tiny masked autoencoder built from ViT blocks; the
student is a two-block CNN whose extra linear head emits a feature vector
the size of the teacher's embedding, so the two can be distilled.

Parameters live in plain ``dict[str, np.ndarray]`` objects (insertion order
is the flattening order). Forward passes take a mapping of name -> Tensor
so the caller decides what is tracked on the gradient tape.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import DimensionError, Tensor

# ---------------------------------------------------------------------------
# configs and init


@dataclass(frozen=True)
class GaeConfig:
    height: int = 16
    width: int = 16
    channels: int = 1
    patch: int = 4
    dim: int = 32
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 1
    mask_ratio: float = 0.5
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise nk.ParameterError(
                f"image {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise nk.ParameterError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise nk.ParameterError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")

    @property
    def n_patches(self):
        return (self.height * self.width) // (self.patch * self.patch)

    @property
    def patch_dim(self):
        return self.patch * self.patch * self.channels

    @property
    def d_k(self):
        return self.dim // self.heads


@dataclass(frozen=True)
class ClassifierConfig:
    height: int = 16
    width: int = 16
    channels: int = 1
    n_classes: int = 10
    conv1: int = 8
    conv2: int = 16
    feature_dim: int = 32

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise nk.ParameterError("classifier input must be divisible by 4 (two 2x2 pools)")

    @property
    def flat_dim(self):
        return self.conv2 * (self.height // 4) * (self.width // 4)


@dataclass
class GaeModel:
    config: GaeConfig
    params: dict

    def copy(self):
        return GaeModel(self.config, {k: v.copy() for k, v in self.params.items()})


@dataclass
class ClassifierModel:
    config: ClassifierConfig
    params: dict

    def copy(self):
        return ClassifierModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def size(self):
        return int(sum(v.size for v in self.params.values()))


def xavier(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _block_params(p, prefix, D, hidden, rng):
    p[f"{prefix}.ln1.g"] = np.ones(D)
    p[f"{prefix}.ln1.b"] = np.zeros(D)
    for name in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.attn.{name}"] = xavier(rng, (D, D), D, D)
    p[f"{prefix}.ln2.g"] = np.ones(D)
    p[f"{prefix}.ln2.b"] = np.zeros(D)
    p[f"{prefix}.mlp.w1"] = xavier(rng, (D, hidden), D, hidden)
    p[f"{prefix}.mlp.b1"] = np.zeros(hidden)
    p[f"{prefix}.mlp.w2"] = xavier(rng, (hidden, D), hidden, D)
    p[f"{prefix}.mlp.b2"] = np.zeros(D)


def init_gae(cfg: GaeConfig, rng) -> GaeModel:
    D, N, pd = cfg.dim, cfg.n_patches, cfg.patch_dim
    hidden = D * cfg.mlp_ratio
    p = {}
    p["patch_embed.w"] = xavier(rng, (pd, D), pd, D)
    p["pos"] = 0.02 * rng.standard_normal((N, D))
    for layer in range(cfg.enc_layers):
        _block_params(p, f"enc.{layer}", D, hidden, rng)
    p["enc.norm.g"] = np.ones(D)
    p["enc.norm.b"] = np.zeros(D)
    p["mask_token"] = 0.02 * rng.standard_normal(D)
    p["dec.embed.w"] = xavier(rng, (D, D), D, D)
    p["dec.embed.b"] = np.zeros(D)
    p["dec.pos"] = 0.02 * rng.standard_normal((N, D))
    for layer in range(cfg.dec_layers):
        _block_params(p, f"dec.{layer}", D, hidden, rng)
    p["dec.norm.g"] = np.ones(D)
    p["dec.norm.b"] = np.zeros(D)
    p["dec.head.w"] = xavier(rng, (D, pd), D, pd)
    p["dec.head.b"] = np.zeros(pd)
    return GaeModel(cfg, p)


def init_classifier(cfg: ClassifierConfig, rng) -> ClassifierModel:
    C, c1, c2 = cfg.channels, cfg.conv1, cfg.conv2
    p = {}
    p["conv1.w"] = xavier(rng, (c1, C, 3, 3), C * 9, c1 * 9)
    p["conv1.b"] = np.zeros(c1)
    p["conv2.w"] = xavier(rng, (c2, c1, 3, 3), c1 * 9, c2 * 9)
    p["conv2.b"] = np.zeros(c2)
    p["fc.w"] = xavier(rng, (cfg.flat_dim, cfg.n_classes), cfg.flat_dim, cfg.n_classes)
    p["fc.b"] = np.zeros(cfg.n_classes)
    p["feat.w"] = xavier(rng, (cfg.flat_dim, cfg.feature_dim), cfg.flat_dim, cfg.feature_dim)
    p["feat.b"] = np.zeros(cfg.feature_dim)
    return ClassifierModel(cfg, p)


def as_tensors(params, requires_grad=False, trainable=None):
    """Wrap a param dict; ``trainable`` limits which names require grad."""
    out = {}
    for k, v in params.items():
        rg = requires_grad and (trainable is None or k in trainable)
        out[k] = Tensor(v, requires_grad=rg)
    return out


def layout_tag(params):
    """Short digest of (name, shape) pairs; equal tags mean compatible layouts."""
    h = hashlib.sha1()
    for k, v in params.items():
        h.update(f"{k}:{'x'.join(map(str, np.shape(v)))};".encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# GAE pieces


def patchify(images, patch):
    """(B, H, W, C) -> (B, N, P*P*C); patches row-major, pixels (dy, dx, c) inside."""
    images = np.asarray(images, dtype=np.float64)
    B, H, W, C = images.shape
    x = images.reshape(B, H // patch, patch, W // patch, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // patch) * (W // patch), patch * patch * C)


def unpatchify(x, cfg: GaeConfig):
    """Inverse of :func:`patchify` for a (B, N, P*P*C) tensor."""
    B = x.shape[0]
    P, C = cfg.patch, cfg.channels
    gh, gw = cfg.height // P, cfg.width // P
    x = nk.reshape(x, (B, gh, gw, P, P, C))
    x = nk.transpose(x, (0, 1, 3, 2, 4, 5))
    return nk.reshape(x, (B, cfg.height, cfg.width, C))


def _batched(images, cfg):
    arr = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise DimensionError(
            f"image shape {arr.shape[1:]} does not match config "
            f"{(cfg.height, cfg.width, cfg.channels)}")
    return arr, single


def patch_embed(image, model: GaeModel, params=None):
    """Z_0: each flattened patch times the embedding matrix E."""
    params = params or as_tensors(model.params)
    arr, single = _batched(image, model.config)
    z = nk.matmul(Tensor(patchify(arr, model.config.patch)), params["patch_embed.w"])
    return nk.reshape(z, z.shape[1:]) if single else z


def add_positions(z0, model: GaeModel, params=None, key="pos"):
    params = params or as_tensors(model.params)
    z0 = nk.as_tensor(z0)
    pos = params[key]
    if z0.shape[-2:] != pos.shape:
        raise DimensionError(f"sequence {z0.shape} vs positions {pos.shape}")
    return nk.add(z0, pos)


def attention_head(q, k, v, d_k):
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    kt = nk.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = nk.mul(nk.matmul(q, kt), 1.0 / np.sqrt(d_k))
    return nk.matmul(nk.softmax(scores, axis=-1), v)


def multi_head(z, params, prefix, heads, d_k=None, residual=True):
    """Multi-head self-attention of a (..., N, D) sequence.

    With ``residual`` the block is pre-norm: ``z + MHA(LN(z))``.
    """
    z = nk.as_tensor(z)
    D = z.shape[-1]
    if D % heads:
        raise nk.ParameterError(f"dim {D} not divisible by {heads} heads")
    dh = D // heads
    d_k = dh if d_k is None else d_k
    x = nk.layer_norm(z, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"]) if residual else z
    lead = x.shape[:-2]
    N = x.shape[-2]
    nlead = len(lead)

    def split(t):
        t = nk.reshape(t, lead + (N, heads, dh))
        return nk.transpose(t, tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2))

    q = split(nk.matmul(x, params[f"{prefix}.attn.wq"]))
    k = split(nk.matmul(x, params[f"{prefix}.attn.wk"]))
    v = split(nk.matmul(x, params[f"{prefix}.attn.wv"]))
    h = attention_head(q, k, v, d_k)  # (..., heads, N, dh)
    h = nk.transpose(h, tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2))
    h = nk.reshape(h, lead + (N, D))
    out = nk.matmul(h, params[f"{prefix}.attn.wo"])
    return nk.add(z, out) if residual else out


def transformer_block(z, params, prefix, heads, d_k=None):
    z = multi_head(z, params, prefix, heads, d_k=d_k, residual=True)
    x = nk.layer_norm(z, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    x = nk.relu(nk.add(nk.matmul(x, params[f"{prefix}.mlp.w1"]), params[f"{prefix}.mlp.b1"]))
    x = nk.add(nk.matmul(x, params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"])
    return nk.add(z, x)


def random_masking(batch, n_patches, mask_ratio, rng):
    """Per-sample (keep_idx, restore_idx); keep_idx lists visible patches."""
    n_keep = max(1, int(n_patches * (1.0 - mask_ratio)))
    noise = rng.random((batch, n_patches))
    shuffle = np.argsort(noise, axis=1, kind="stable")
    restore = np.argsort(shuffle, axis=1, kind="stable")
    return shuffle[:, :n_keep], restore


def gae_encode(images, model: GaeModel, params=None, mask_ratio=None, rng=None):
    """Encoder pass. Returns features (B, N, D) with mask tokens in hidden slots."""
    cfg = model.config
    params = params or as_tensors(model.params)
    ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
    arr, _ = _batched(images, cfg)
    B, N, D = arr.shape[0], cfg.n_patches, cfg.dim
    z = add_positions(patch_embed(arr, model, params), model, params)
    if ratio > 0:
        if rng is None:
            raise nk.UsageError("masking requires an rng or mask seed")
        keep, restore = random_masking(B, N, ratio, rng)
        z = nk.gather(z, keep, axis=1)
    for layer in range(cfg.enc_layers):
        z = transformer_block(z, params, f"enc.{layer}", cfg.heads, cfg.d_k)
    z = nk.layer_norm(z, params["enc.norm.g"], params["enc.norm.b"])
    if ratio > 0:
        n_mask = N - z.shape[1]
        tokens = nk.broadcast_to(params["mask_token"], (B, n_mask, D))
        z = nk.gather(nk.concat([z, tokens], axis=1), restore, axis=1)
    return z


def gae_decode(features, model: GaeModel, params=None):
    cfg = model.config
    params = params or as_tensors(model.params)
    y = nk.add(nk.matmul(features, params["dec.embed.w"]), params["dec.embed.b"])
    y = add_positions(y, model, params, key="dec.pos")
    for layer in range(cfg.dec_layers):
        y = transformer_block(y, params, f"dec.{layer}", cfg.heads, cfg.d_k)
    y = nk.layer_norm(y, params["dec.norm.g"], params["dec.norm.b"])
    y = nk.add(nk.matmul(y, params["dec.head.w"]), params["dec.head.b"])
    return unpatchify(y, cfg)


def gae_forward(image, model: GaeModel, mask_seed=0, params=None, mask_ratio=None, rng=None):
    """(features F, reconstruction x_hat) for one image (H, W, C) or a batch.

    The mask is drawn from ``rng`` when given, else from ``mask_seed``.
    """
    arr, single = _batched(image, model.config)
    if rng is None:
        rng = nk.make_rng(mask_seed)
    params = params or as_tensors(model.params)
    feats = gae_encode(arr, model, params, mask_ratio=mask_ratio, rng=rng)
    recon = gae_decode(feats, model, params)
    if single:
        return nk.reshape(feats, feats.shape[1:]), nk.reshape(recon, recon.shape[1:])
    return feats, recon


def teacher_features(images, model: GaeModel):
    """Mean-pooled unmasked encoder output, (B, D) array."""
    feats = gae_encode(images, model, mask_ratio=0.0)
    return feats.data.mean(axis=1)


def reconstruction_loss(x, x_hat):
    """Mean squared pixel residual; works on arrays or tape tensors."""
    x, x_hat = nk.as_tensor(x), nk.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"reconstruction shapes differ: {x.shape} vs {x_hat.shape}")
    return nk.mean(nk.square(nk.sub(x, x_hat)))


# ---------------------------------------------------------------------------
# classifier


def classifier_trunk(images, model: ClassifierModel, params=None):
    """Flattened output of the two conv+pool blocks, (B, flat_dim)."""
    cfg = model.config
    params = params or as_tensors(model.params)
    arr = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise DimensionError(f"image shape {arr.shape[1:]} does not match classifier config")
    x = Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    x = nk.maxpool2d(nk.relu(nk.conv2d(x, params["conv1.w"], params["conv1.b"], pad=1)))
    x = nk.maxpool2d(nk.relu(nk.conv2d(x, params["conv2.w"], params["conv2.b"], pad=1)))
    return nk.reshape(x, (arr.shape[0], cfg.flat_dim))


def classifier_forward(image, model: ClassifierModel, params=None):
    """(logits, student features); batched if ``image`` is (B, H, W, C)."""
    params = params or as_tensors(model.params)
    single = np.ndim(image.data if isinstance(image, Tensor) else image) == 3
    h = classifier_trunk(image, model, params)
    logits = nk.add(nk.matmul(h, params["fc.w"]), params["fc.b"])
    feats = nk.add(nk.matmul(h, params["feat.w"]), params["feat.b"])
    if single:
        return nk.reshape(logits, logits.shape[1:]), nk.reshape(feats, feats.shape[1:])
    return logits, feats


def predict(images, model: ClassifierModel, batch=256):
    images = np.asarray(images)
    if len(images) == 0:
        return np.zeros(0, dtype=np.int64)
    out = []
    for i in range(0, len(images), batch):
        logits, _ = classifier_forward(images[i:i + batch], model)
        out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out)


def penultimate(images, model: ClassifierModel, batch=256):
    images = np.asarray(images)
    return np.concatenate([classifier_trunk(images[i:i + batch], model).data
                           for i in range(0, len(images), batch)])


# ---------------------------------------------------------------------------
# checkpoint format

MAGIC = b"XPFLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params):
    """Write a flat little-endian record of named float64 tensors."""
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (version,) = take("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise CheckpointError(f"{path}: truncated name")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated data for {name}")
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return params


def classifier_from_params(params):
    """Rebuild a ClassifierModel by reading the architecture off tensor shapes."""
    c1, C = params["conv1.w"].shape[:2]
    c2 = params["conv2.w"].shape[0]
    flat, M = params["fc.w"].shape
    fdim = params["feat.w"].shape[1]
    side = int(round(np.sqrt(flat / c2))) * 4
    cfg = ClassifierConfig(height=side, width=side, channels=C, n_classes=M,
                           conv1=c1, conv2=c2, feature_dim=fdim)
    if cfg.flat_dim != flat:
        raise CheckpointError("classifier checkpoint has non-square input; cannot infer size")
    return ClassifierModel(cfg, dict(params))
