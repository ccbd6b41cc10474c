"""ViT encoder with a categorical head and a differential ordinal head.

Batched helpers take ``[B, C, S, S]`` images; the single-sample functions
are thin wrappers so both views share exactly one code path.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 8
    dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    # output widths of the three FF linear layers; the last must equal dim
    ff_hidden: tuple[int, int, int] = (128, 128, 64)
    # widths of the two hidden layers of the categorical head
    head_hidden: tuple[int, int] = (64, 64)
    num_classes: int = 4
    leaky_slope: float = 0.01
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "ff_hidden", tuple(int(v) for v in self.ff_hidden))
        object.__setattr__(self, "head_hidden", tuple(int(v) for v in self.head_hidden))
        self.validate()

    def validate(self) -> None:
        ints = dict(image_size=self.image_size, channels=self.channels, patch_size=self.patch_size,
                    dim=self.dim, num_blocks=self.num_blocks, num_heads=self.num_heads)
        for k, v in ints.items():
            if v < 1:
                raise ConfigError(f"{k} must be positive, got {v}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.dim % self.num_heads:
            raise ConfigError(f"num_heads {self.num_heads} does not divide dim {self.dim}")
        if self.dim % 2:
            raise ConfigError(f"dim must be even for sin-cos positions, got {self.dim}")
        if len(self.ff_hidden) != 3 or min(self.ff_hidden) < 1:
            raise ConfigError(f"ff_hidden needs three positive widths, got {self.ff_hidden}")
        if self.ff_hidden[2] != self.dim:
            raise ConfigError(f"last ff_hidden width {self.ff_hidden[2]} must equal dim {self.dim}")
        if len(self.head_hidden) != 2 or min(self.head_hidden) < 1:
            raise ConfigError(f"head_hidden needs two positive widths, got {self.head_hidden}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


def param_shapes(cfg: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in checkpoint order."""
    D = cfg.dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch.W": (cfg.patch_dim, D),
        "patch.b": (D,),
        "cls": (D,),
    }
    for l in range(cfg.num_blocks):
        p = f"block{l}."
        shapes[p + "ln1.gamma"] = (D,)
        shapes[p + "ln1.beta"] = (D,)
        shapes[p + "attn.q.W"] = (D, D)
        shapes[p + "attn.q.b"] = (D,)
        # no key bias: it adds a per-query constant to every score and
        # cancels in the softmax
        shapes[p + "attn.k.W"] = (D, D)
        shapes[p + "attn.v.W"] = (D, D)
        shapes[p + "attn.v.b"] = (D,)
        shapes[p + "attn.out.W"] = (D, D)
        shapes[p + "attn.out.b"] = (D,)
        shapes[p + "ln2.gamma"] = (D,)
        shapes[p + "ln2.beta"] = (D,)
        widths = (D,) + cfg.ff_hidden
        for i in range(3):
            shapes[p + f"ff{i}.W"] = (widths[i], widths[i + 1])
            shapes[p + f"ff{i}.b"] = (widths[i + 1],)
    shapes["ln_out.gamma"] = (D,)
    shapes["ln_out.beta"] = (D,)
    widths = (D,) + cfg.head_hidden + (cfg.num_classes,)
    for i in range(3):
        shapes[f"cat{i}.W"] = (widths[i], widths[i + 1])
        shapes[f"cat{i}.b"] = (widths[i + 1],)
    shapes["diff.W"] = (D, 1)
    return shapes


def param_count(cfg: ArchConfig) -> int:
    return int(sum(int(np.prod(s)) for s in param_shapes(cfg).values()))


@dataclass
class Model:
    """Parameters of extractor, categorical head and differential head."""

    config: ArchConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def groups(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def init_model(cfg: ArchConfig, rng: np.random.Generator) -> Model:
    """Uniform(+-1/sqrt(fan_in)) for weights and biases; zero class token; unit LN."""
    dtype = ad.get_default_dtype()
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith(".beta") or name == "cls":
            arr = np.zeros(shape)
        else:
            layer = name.rsplit(".", 1)[0]
            fan_in = param_shapes(cfg)[layer + ".W"][0]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return Model(cfg, params)


# ---------------------------------------------------------------- extractor


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """``[..., C, S, S]`` -> ``[..., E, C*P*P]``; patches row-major, channel-major inside."""
    *lead, C, S, S2 = image.shape
    if S != S2:
        raise ConfigError(f"images must be square, got {S}x{S2}")
    if S % patch_size:
        raise ConfigError(f"patch_size {patch_size} does not divide image size {S}")
    n = S // patch_size
    x = image.reshape(*lead, C, n, patch_size, n, patch_size)
    k = len(lead)
    x = x.transpose(*range(k), k + 1, k + 3, k, k + 2, k + 4)
    return x.reshape(*lead, n * n, C * patch_size * patch_size)


def positional_encoding(num_positions: int, dim: int) -> np.ndarray:
    """sin on even dims 2j with exponent (2j+1)/D, cos on odd dims 2j+1 with exponent 2j/D."""
    if dim % 2:
        raise ConfigError(f"dim must be even, got {dim}")
    i = np.arange(num_positions, dtype=np.float64)[:, None]
    j = np.arange(dim // 2, dtype=np.float64)[None, :]
    table = np.empty((num_positions, dim))
    table[:, 0::2] = np.sin(i / 10000.0 ** ((2 * j + 1) / dim))
    table[:, 1::2] = np.cos(i / 10000.0 ** (2 * j / dim))
    return table


def mhsa(g: Tensor, params: dict[str, Tensor], prefix: str, num_heads: int) -> Tensor:
    """Multi-head self-attention over ``[..., T, D]`` tokens."""
    *lead, T, D = g.shape
    dm = D // num_heads

    def heads(x: Tensor) -> Tensor:
        x = ad.reshape(x, (*lead, T, num_heads, dm))
        k = len(lead)
        return ad.transpose(x, (*range(k), k + 1, k, k + 2))

    q = heads(ad.linear(g, params[prefix + "q.W"], params[prefix + "q.b"]))
    k = heads(ad.linear(g, params[prefix + "k.W"]))
    v = heads(ad.linear(g, params[prefix + "v.W"], params[prefix + "v.b"]))
    scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(dm))
    attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(attn, v)
    n = len(lead)
    out = ad.transpose(out, (*range(n), n + 1, n, n + 2))
    out = ad.reshape(out, (*lead, T, D))
    return ad.linear(out, params[prefix + "out.W"], params[prefix + "out.b"])


def feed_forward(g: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = ad.relu(ad.linear(g, params[prefix + "ff0.W"], params[prefix + "ff0.b"]))
    h = ad.relu(ad.linear(h, params[prefix + "ff1.W"], params[prefix + "ff1.b"]))
    return ad.linear(h, params[prefix + "ff2.W"], params[prefix + "ff2.b"])


def encoder_block(g: Tensor, params: dict[str, Tensor], layer: int, cfg: ArchConfig) -> Tensor:
    p = f"block{layer}."
    eps = cfg.ln_eps
    h = ad.layer_norm(g, params[p + "ln1.gamma"], params[p + "ln1.beta"], eps)
    g1 = ad.add(mhsa(h, params, p + "attn.", cfg.num_heads), g)
    h = ad.layer_norm(g1, params[p + "ln2.gamma"], params[p + "ln2.beta"], eps)
    return ad.add(feed_forward(h, params, p), g1)


def extract_features_batch(model: Model, images: np.ndarray) -> Tensor:
    """``[B, C, S, S]`` images -> ``[B, D]`` class-token features."""
    cfg = model.config
    images = np.asarray(images)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ConfigError(f"images of shape {images.shape[1:] if images.ndim == 4 else images.shape} "
                          f"do not match config {expected}")
    P = model.params
    B = images.shape[0]
    dtype = P["patch.W"].data.dtype
    patches = Tensor(patchify(images, cfg.patch_size).astype(dtype))
    tokens = ad.linear(patches, P["patch.W"], P["patch.b"])
    cls = ad.broadcast_to(ad.reshape(P["cls"], (1, 1, cfg.dim)), (B, 1, cfg.dim))
    g = ad.concat([cls, tokens], axis=1)
    pos = positional_encoding(cfg.num_tokens + 1, cfg.dim).astype(dtype)
    g = ad.add(g, Tensor(np.broadcast_to(pos, g.shape).copy()))
    for layer in range(cfg.num_blocks):
        g = encoder_block(g, P, layer, cfg)
    return ad.layer_norm(g[:, 0, :], P["ln_out.gamma"], P["ln_out.beta"], cfg.ln_eps)


def extract_features(model: Model, image: np.ndarray) -> Tensor:
    return ad.reshape(extract_features_batch(model, np.asarray(image)[None]), (model.config.dim,))


# -------------------------------------------------------------------- heads


def categorical_logits(model: Model, f: Tensor) -> Tensor:
    P = model.params
    slope = model.config.leaky_slope
    h = ad.leaky_relu(ad.linear(f, P["cat0.W"], P["cat0.b"]), slope)
    h = ad.leaky_relu(ad.linear(h, P["cat1.W"], P["cat1.b"]), slope)
    return ad.linear(h, P["cat2.W"], P["cat2.b"])


def categorical_head(model: Model, f: Tensor) -> Tensor:
    """Class probabilities for ``[..., D]`` features."""
    return ad.softmax(categorical_logits(model, f), axis=-1)


def differential_head(model: Model, f_d: Tensor) -> Tensor:
    """Bias-free projection of ``[..., D]`` differential features to scalars."""
    out = ad.linear(f_d, model.params["diff.W"])
    return ad.reshape(out, out.shape[:-1])


def forward_pair(model: Model, x_m: np.ndarray, x_s: np.ndarray) -> tuple[Tensor, Tensor]:
    """(class probabilities of the minuend, predicted label difference m - s)."""
    F = extract_features_batch(model, np.stack([x_m, x_s]))
    f_d = ad.sub(F[0], F[1])
    return categorical_head(model, F[0]), differential_head(model, f_d)


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Predicted labels in ``1..N_c``."""
    out = []
    for start in range(0, len(images), batch_size):
        F = extract_features_batch(model, images[start:start + batch_size])
        out.append(np.argmax(categorical_logits(model, F).data, axis=-1) + 1)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def features(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    chunks = [extract_features_batch(model, images[s:s + batch_size]).data
              for s in range(0, len(images), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, model.config.dim))


# --------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DIORCKPT"
CKPT_VERSION = 1
# image_size, channels, patch_size, dim, num_blocks, num_heads, ff_hidden x3,
# head_hidden x2, num_classes (u32 each), leaky_slope, ln_eps (f64 each)
_ARCH_STRUCT = struct.Struct("<12I2d")


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Write ``DIORCKPT`` + u16 version + arch block + float32 LE arrays in param order."""
    cfg = model.config
    arch = _ARCH_STRUCT.pack(cfg.image_size, cfg.channels, cfg.patch_size, cfg.dim,
                             cfg.num_blocks, cfg.num_heads, *cfg.ff_hidden, *cfg.head_hidden,
                             cfg.num_classes, cfg.leaky_slope, cfg.ln_eps)
    chunks = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), arch]
    for name in param_shapes(cfg):
        chunks.append(np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> Model:
    buf = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + 2 + _ARCH_STRUCT.size
    if len(buf) < head:
        raise CheckpointError(f"{path}: truncated header ({len(buf)} bytes)")
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    (version,) = struct.unpack_from("<H", buf, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    vals = _ARCH_STRUCT.unpack_from(buf, 10)
    try:
        cfg = ArchConfig(image_size=vals[0], channels=vals[1], patch_size=vals[2], dim=vals[3],
                         num_blocks=vals[4], num_heads=vals[5], ff_hidden=vals[6:9],
                         head_hidden=vals[9:11], num_classes=vals[11], leaky_slope=vals[12],
                         ln_eps=vals[13])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: invalid architecture block: {exc}") from exc
    shapes = param_shapes(cfg)
    expected = head + 4 * param_count(cfg)
    if len(buf) != expected:
        raise CheckpointError(f"{path}: size {len(buf)} does not match architecture ({expected} bytes)")
    offset = head
    params = {}
    dtype = ad.get_default_dtype()
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return Model(cfg, params)


def arch_to_dict(cfg: ArchConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["ff_hidden"] = list(cfg.ff_hidden)
    d["head_hidden"] = list(cfg.head_hidden)
    return d
