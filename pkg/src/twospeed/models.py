"""The two network families: a small VGG-style CNN and a patch Vision Transformer."""

from __future__ import annotations

import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from twospeed import autodiff as ad
from twospeed.autodiff import ShapeError, Tensor


class ConfigError(ValueError):
    pass


class ModelFormatError(ValueError):
    """Raised when a model byte stream is corrupt or incompatible."""


@dataclass(frozen=True)
class HsCnnConfig:
    block_filters: tuple[tuple[int, int], ...] = ((32, 32), (64, 64), (128, 128))
    dense_sizes: tuple[int, ...] = (1024, 512)
    dropout_rate: float = 0.25
    l2_lambda: float = 1e-4
    num_classes: int = 17
    input_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "block_filters", tuple(tuple(int(c) for c in b) for b in self.block_filters))
        object.__setattr__(self, "dense_sizes", tuple(int(d) for d in self.dense_sizes))
        if len(self.block_filters) != 3 or any(len(b) != 2 for b in self.block_filters):
            raise ConfigError("HS-CNN needs exactly 3 blocks of 2 convolution widths")
        if self.input_size % 8:
            raise ConfigError("input_size must be divisible by 8 (three pooling stages)")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0 or self.l2_lambda < 0:
            raise ConfigError("dropout_rate must be in [0, 1) and l2_lambda >= 0")


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    hidden_dim: int = 64
    mlp_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    num_classes: int = 17
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if min(self.num_layers, self.num_heads, self.num_classes, self.mlp_dim) < 1:
            raise ConfigError("layer, head, class and MLP sizes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


# ViT-B/16 at 224x224 with a 17-way head; only ever built for parameter counting.
REFERENCE_VIT = VitConfig(
    image_size=224, patch_size=16, hidden_dim=768, mlp_dim=3072, num_layers=12, num_heads=12, num_classes=17
)
REFERENCE_HS_CNN = HsCnnConfig()
TINY_VIT = VitConfig()
MINI_HS_CNN = HsCnnConfig(block_filters=((8, 8), (16, 16), (32, 32)), dense_sizes=(64,), num_classes=6)


# ---------------------------------------------------------------- building blocks


def patchify(x, patch_size: int):
    """Split ``[B x] C x H x W`` into ``[B x] N x (C*p*p)`` row-major patches.

    Works on numpy arrays and on :class:`Tensor` (differentiably).
    """
    is_tensor = isinstance(x, Tensor)
    shape = x.shape
    squeeze = len(shape) == 3
    if len(shape) not in (3, 4):
        raise ShapeError(f"patchify expects C x H x W or B x C x H x W, got {shape}")
    b = 1 if squeeze else shape[0]
    c, h, w = shape[-3:]
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    axes = (0, 2, 4, 1, 3, 5)
    if is_tensor:
        y = ad.reshape(x, (b, c, gh, p, gw, p))
        y = ad.transpose(y, axes)
        y = ad.reshape(y, (gh * gw, c * p * p) if squeeze else (b, gh * gw, c * p * p))
        return y
    y = np.asarray(x).reshape(b, c, gh, p, gw, p).transpose(axes).reshape(b, gh * gw, c * p * p)
    return y[0] if squeeze else y


def unpatchify(patches: np.ndarray, patch_size: int, channels: int, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`patchify` for numpy arrays."""
    patches = np.asarray(patches)
    squeeze = patches.ndim == 2
    if squeeze:
        patches = patches[None]
    p = patch_size
    gh, gw = height // p, width // p
    b = patches.shape[0]
    x = patches.reshape(b, gh, gw, channels, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(b, channels, height, width)
    return x[0] if squeeze else x


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def multi_head_attention(
    x: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over ``[B x] T x d`` tokens.

    With ``return_weights`` the per-head attention probabilities
    (``[B x] heads x T x T``) are returned alongside the output.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"attention expects T x d or B x T x d tokens, got {x.shape}")
    b, t, d = x.shape
    if d % heads:
        raise ShapeError(f"model width {d} is not divisible by {heads} heads")
    for w in (wq, wk, wv, wo):
        if w.shape != (d, d):
            raise ShapeError(f"projection weights must be {d}x{d}, got {w.shape}")
    dh = d // heads

    def split(z):
        return ad.transpose(ad.reshape(z, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split(dense(x, wq, bq))
    k = split(dense(x, wk, bk))
    v = split(dense(x, wv, bv))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    out = dense(ctx, wo, bo)
    weights = attn.data
    if squeeze:
        out = ad.reshape(out, (t, d))
        weights = weights[0]
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------- model container


class Model:
    """A network: kind, config, named parameters and a train/eval mode."""

    def __init__(self, kind: str, config, params: "OrderedDict[str, Tensor]"):
        if kind not in ("hs_cnn", "vit"):
            raise ConfigError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.config = config
        self.params = params
        self.training = False

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def input_size(self) -> int:
        return self.config.input_size if self.kind == "hs_cnn" else self.config.image_size

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def decay_mask(self) -> list[bool]:
        """Which parameters carry the L2 penalty: dense-layer weights of the CNN head."""
        if self.kind != "hs_cnn":
            return [False] * len(self.params)
        return [n.endswith(".weight") and (n.startswith("dense") or n.startswith("head")) for n in self.params]

    def copy(self) -> "Model":
        params = OrderedDict((n, Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n)) for n, p in self.params.items())
        m = Model(self.kind, self.config, params)
        m.training = self.training
        return m

    def check_input(self, batch) -> None:
        s = self.input_size
        if batch.ndim != 4 or batch.shape[1:] != (3, s, s):
            raise ShapeError(f"{self.kind} expects a B x 3 x {s} x {s} batch, got {tuple(batch.shape)}")

    def logits(self, batch, rng: np.random.Generator | None = None, return_attention: bool = False):
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self._dtype()))
        self.check_input(x)
        if self.kind == "hs_cnn":
            return _hs_cnn_logits(self, x, rng)
        return _vit_logits(self, x, rng, return_attention)

    def predict_proba(self, batch, batch_size: int = 256) -> np.ndarray:
        """Eval-mode class probabilities for a float batch, in chunks."""
        was = self.training
        self.training = False
        try:
            out = [forward(self, batch[i : i + batch_size]).data for i in range(0, len(batch), batch_size)]
        finally:
            self.training = was
        if not out:
            return np.zeros((0, self.num_classes), dtype=self._dtype())
        return np.concatenate(out, axis=0)

    def _dtype(self):
        return next(iter(self.params.values())).dtype


def forward(model: Model, batch) -> Tensor:
    """Class probabilities (post-softmax) for a ``B x 3 x S x S`` batch in ``[0, 1]``."""
    return ad.softmax(model.logits(batch))


def param_count(model: Model) -> int:
    return int(sum(p.data.size for p in model.params.values()))


def _init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator, dtype) -> np.ndarray:
    if name.endswith((".bias", ".beta")):
        return np.zeros(shape, dtype=dtype)
    if name.endswith(".gamma"):
        return np.ones(shape, dtype=dtype)
    # small readout keeps untrained outputs near uniform while still passing gradient down
    if name in ("cls_token", "pos_embed", "head.weight"):
        return (rng.standard_normal(shape) * 0.02).astype(dtype)
    # He-uniform; conv kernels are out x in x 3 x 3, dense weights are in x out
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _build(kind: str, cfg, rng: np.random.Generator, dtype) -> Model:
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in _expected_shapes(kind, cfg).items():
        params[name] = Tensor(_init_param(name, shape, rng, dtype), requires_grad=True, name=name)
    return Model(kind, cfg, params)


def build_hs_cnn(cfg: HsCnnConfig, rng: np.random.Generator, dtype=np.float32) -> Model:
    """(conv3x3-relu x2, maxpool, dropout) x3 -> dense-relu stack -> linear head."""
    return _build("hs_cnn", cfg, rng, dtype)


def build_vit(cfg: VitConfig, rng: np.random.Generator, dtype=np.float32) -> Model:
    """Patch embedding, class token, position embeddings, pre-norm encoder, class-token head."""
    return _build("vit", cfg, rng, dtype)


def _hs_cnn_logits(model: Model, x: Tensor, rng) -> Tensor:
    cfg: HsCnnConfig = model.config
    p = model.params
    for bi in range(1, 4):
        for ci in (1, 2):
            x = ad.relu(ad.conv2d(x, p[f"block{bi}.conv{ci}.weight"], p[f"block{bi}.conv{ci}.bias"]))
        x = ad.maxpool2d(x)
        x = ad.dropout(x, cfg.dropout_rate, model.training, rng)
    x = ad.reshape(x, (x.shape[0], -1))
    for di in range(1, len(cfg.dense_sizes) + 1):
        x = ad.relu(dense(x, p[f"dense{di}.weight"], p[f"dense{di}.bias"]))
    return dense(x, p["head.weight"], p["head.bias"])


def encoder_layer(x: Tensor, p, pre: str, heads: int, drop: float, training: bool, rng, return_attention=False):
    """One pre-norm transformer encoder block over ``B x T x d`` tokens."""
    h, attn = multi_head_attention(
        ad.layer_norm(x, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"]),
        p[f"{pre}.attn.q.weight"], p[f"{pre}.attn.q.bias"],
        p[f"{pre}.attn.k.weight"], p[f"{pre}.attn.k.bias"],
        p[f"{pre}.attn.v.weight"], p[f"{pre}.attn.v.bias"],
        p[f"{pre}.attn.out.weight"], p[f"{pre}.attn.out.bias"],
        heads,
        return_weights=True,
    )
    x = ad.add(x, ad.dropout(h, drop, training, rng))
    h = ad.layer_norm(x, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
    h = ad.gelu(dense(h, p[f"{pre}.mlp.fc1.weight"], p[f"{pre}.mlp.fc1.bias"]))
    h = dense(h, p[f"{pre}.mlp.fc2.weight"], p[f"{pre}.mlp.fc2.bias"])
    x = ad.add(x, ad.dropout(h, drop, training, rng))
    return (x, attn) if return_attention else x


def _vit_logits(model: Model, x: Tensor, rng, return_attention: bool):
    cfg: VitConfig = model.config
    p = model.params
    b = x.shape[0]
    tokens = dense(patchify(x, cfg.patch_size), p["patch_embed.weight"], p["patch_embed.bias"])
    cls = ad.broadcast_to(p["cls_token"], (b, 1, cfg.hidden_dim))
    z = ad.add(ad.concat([cls, tokens], axis=1), p["pos_embed"])
    z = ad.dropout(z, cfg.dropout_rate, model.training, rng)
    maps = []
    for li in range(cfg.num_layers):
        z, attn = encoder_layer(z, p, f"layers.{li}", cfg.num_heads, cfg.dropout_rate, model.training, rng, True)
        maps.append(attn)
    z = ad.layer_norm(z, p["ln_f.gamma"], p["ln_f.beta"])
    logits = dense(z[:, 0, :], p["head.weight"], p["head.bias"])
    return (logits, maps) if return_attention else logits


def build_model(kind: str, cfg, rng: np.random.Generator, dtype=np.float32) -> Model:
    if kind == "hs_cnn":
        return build_hs_cnn(cfg, rng, dtype)
    if kind == "vit":
        return build_vit(cfg, rng, dtype)
    raise ConfigError(f"unknown model kind {kind!r}")


def config_from_dict(kind: str, d: dict):
    if kind == "hs_cnn":
        return HsCnnConfig(**d)
    if kind == "vit":
        return VitConfig(**d)
    raise ConfigError(f"unknown model kind {kind!r}")


def forward_macs(kind: str, cfg) -> int:
    """Multiply-accumulates of one single-image forward pass."""
    if kind == "hs_cnn":
        total, cin, side = 0, 3, cfg.input_size
        for widths in cfg.block_filters:
            for cout in widths:
                total += side * side * cout * cin * 9
                cin = cout
            side //= 2
        fan = cin * side * side
        for width in (*cfg.dense_sizes, cfg.num_classes):
            total += fan * width
            fan = width
        return total
    t, d = cfg.num_patches + 1, cfg.hidden_dim
    per_layer = 4 * t * d * d + 2 * t * t * d + 2 * t * d * cfg.mlp_dim
    return cfg.num_patches * 3 * cfg.patch_size**2 * d + cfg.num_layers * per_layer + d * cfg.num_classes


# ---------------------------------------------------------------- persistence

MAGIC = b"TSPD"
FORMAT_VERSION = 1
_KIND_TAGS = {"hs_cnn": 0, "vit": 1}
_DTYPE_TAGS = {np.dtype("<f4"): 4, np.dtype("<f8"): 8}


def save_model(model: Model) -> bytes:
    """Serialise to the versioned ``TSPD`` binary format."""
    buf = io.BytesIO()
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<HBI", FORMAT_VERSION, _KIND_TAGS[model.kind], len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<"))
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", arr.ndim, _DTYPE_TAGS[arr.dtype]))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("truncated model stream")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(data: bytes) -> Model:
    """Parse a ``TSPD`` stream; raises :class:`ModelFormatError` on any defect."""
    r = _Reader(bytes(data))
    if r.take(4) != MAGIC:
        raise ModelFormatError("bad magic bytes")
    version, kind_tag, cfg_len = r.unpack("<HBI")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    kinds = {v: k for k, v in _KIND_TAGS.items()}
    if kind_tag not in kinds:
        raise ModelFormatError(f"unknown kind tag {kind_tag}")
    kind = kinds[kind_tag]
    try:
        cfg = config_from_dict(kind, json.loads(r.take(cfg_len)))
    except (ValueError, TypeError) as exc:
        raise ModelFormatError(f"bad config block: {exc}") from exc
    # an unallocated skeleton gives the expected names and shapes
    expected = _expected_shapes(kind, cfg)
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise ModelFormatError(f"config implies {len(expected)} tensors, stream holds {count}")
    params: OrderedDict[str, Tensor] = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        rank, dtag = r.unpack("<BB")
        dims = r.unpack(f"<{rank}I")
        if name not in expected or expected[name] != tuple(dims):
            raise ModelFormatError(f"tensor {name!r} with shape {dims} does not match the config")
        if dtag not in (4, 8):
            raise ModelFormatError(f"unknown dtype tag {dtag}")
        dtype = np.dtype("<f4") if dtag == 4 else np.dtype("<f8")
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        params[name] = Tensor(arr, requires_grad=True, name=name)
    if r.pos != len(r.data):
        raise ModelFormatError("trailing bytes after last tensor")
    if list(params) != list(expected):
        raise ModelFormatError("tensor names out of order")
    return Model(kind, cfg, params).eval()


def _expected_shapes(kind: str, cfg) -> "OrderedDict[str, tuple[int, ...]]":
    out: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    if kind == "hs_cnn":
        cin = 3
        for bi, widths in enumerate(cfg.block_filters, start=1):
            for ci, cout in enumerate(widths, start=1):
                out[f"block{bi}.conv{ci}.weight"] = (cout, cin, 3, 3)
                out[f"block{bi}.conv{ci}.bias"] = (cout,)
                cin = cout
        fan = cin * (cfg.input_size // 8) ** 2
        for di, width in enumerate(cfg.dense_sizes, start=1):
            out[f"dense{di}.weight"] = (fan, width)
            out[f"dense{di}.bias"] = (width,)
            fan = width
        out["head.weight"] = (fan, cfg.num_classes)
        out["head.bias"] = (cfg.num_classes,)
        return out
    d = cfg.hidden_dim
    out["patch_embed.weight"] = (3 * cfg.patch_size**2, d)
    out["patch_embed.bias"] = (d,)
    out["cls_token"] = (1, 1, d)
    out["pos_embed"] = (1, cfg.num_patches + 1, d)
    for li in range(cfg.num_layers):
        pre = f"layers.{li}"
        out[f"{pre}.ln1.gamma"] = (d,)
        out[f"{pre}.ln1.beta"] = (d,)
        for proj in ("q", "k", "v", "out"):
            out[f"{pre}.attn.{proj}.weight"] = (d, d)
            out[f"{pre}.attn.{proj}.bias"] = (d,)
        out[f"{pre}.ln2.gamma"] = (d,)
        out[f"{pre}.ln2.beta"] = (d,)
        out[f"{pre}.mlp.fc1.weight"] = (d, cfg.mlp_dim)
        out[f"{pre}.mlp.fc1.bias"] = (cfg.mlp_dim,)
        out[f"{pre}.mlp.fc2.weight"] = (cfg.mlp_dim, d)
        out[f"{pre}.mlp.fc2.bias"] = (d,)
    out["ln_f.gamma"] = (d,)
    out["ln_f.beta"] = (d,)
    out["head.weight"] = (d, cfg.num_classes)
    out["head.bias"] = (cfg.num_classes,)
    return out
