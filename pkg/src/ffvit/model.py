"""Feed-forward-only vision transformer, plus the attention baseline and the
attention-only ablation.

The network is a patch embedding (with class token and learned positional
embedding) followed by ``depth`` pre-norm residual blocks, a final layer norm
and a linear head reading the class-token row. In the ``ff_only`` variant
each block mixes tokens with a feed-forward layer applied over the patch axis
(transpose, MLP, transpose back) and then mixes features with the usual MLP.

Parameters live in a flat, ordered :class:`ParameterSet` keyed by dotted
names such as ``block.3.token_ff.w1``; forward functions are plain functions
of (input, weights, config).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, FixedSequenceLengthError, ShapeError
from .tensor import Tensor

VARIANTS = ("ff_only", "attention_baseline", "attention_only")
INIT_STD = 0.02
INIT_TRUNCATION = 3.0  # in units of INIT_STD


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    dim: int = 192
    depth: int = 12
    feature_expansion: int = 4
    token_hidden: int | None = None  # None resolves to 4 * num_tokens
    num_classes: int = 1000
    variant: str = "ff_only"
    dropout: float = 0.0
    heads: int = 3
    eps: float = 1e-6

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "dim", "depth",
                     "feature_expansion", "num_classes", "heads"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.token_hidden is None:
            object.__setattr__(self, "token_hidden", 4 * self.num_tokens)
        elif self.token_hidden < 1:
            raise ConfigError(f"token_hidden must be positive, got {self.token_hidden}")
        if self.variant != "ff_only" and self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def feature_hidden(self) -> int:
        return self.feature_expansion * self.dim

    @property
    def patch_features(self) -> int:
        return self.channels * self.patch_size**2

    def replace(self, **changes) -> ModelConfig:
        values = asdict(self)
        values.update(changes)
        if "token_hidden" not in changes and any(
            k in changes for k in ("image_size", "patch_size")
        ):
            values["token_hidden"] = None
        return ModelConfig(**values)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


_PRESETS = {
    "tiny": dict(patch_size=16, dim=192, depth=12, heads=3),
    "base": dict(patch_size=16, dim=768, depth=12, heads=12),
    "large": dict(patch_size=32, dim=1024, depth=24, heads=16),
    # desk-scale geometry used by tests, gradient checks and training sanity runs
    "reduced": dict(image_size=32, patch_size=8, dim=16, depth=2, heads=2, num_classes=10),
}

# "FF Only" parameter counts reported for the three ImageNet models
REFERENCE_PARAMS = {"tiny": 7_700_000, "base": 62_000_000, "large": 206_000_000}


def build_preset(name: str, **overrides) -> ModelConfig:
    try:
        values = dict(_PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(_PRESETS)}") from None
    values.update(overrides)
    return ModelConfig(**values)


def preset_names() -> list[str]:
    return list(_PRESETS)


# -- parameters -----------------------------------------------------------------


class ParameterSet(dict):
    """Ordered mapping from dotted parameter names to tensors."""

    def num_elements(self) -> int:
        return sum(t.size for t in self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def scope(self, prefix: str) -> dict[str, Tensor]:
        """View of the entries under ``prefix.`` with the prefix stripped."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self.items() if k.startswith(head)}

    def copy(self) -> ParameterSet:
        return ParameterSet(
            (k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self.items()
        )

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.values())).dtype


def _attention_shapes(prefix: str, width: int):
    return [
        (f"{prefix}.wqkv", (width, 3 * width)),
        (f"{prefix}.bqkv", (3 * width,)),
        (f"{prefix}.wo", (width, width)),
        (f"{prefix}.bo", (width,)),
    ]


def _mlp_shapes(prefix: str, width: int, hidden: int):
    return [
        (f"{prefix}.w1", (width, hidden)),
        (f"{prefix}.b1", (hidden,)),
        (f"{prefix}.w2", (hidden, width)),
        (f"{prefix}.b2", (width,)),
    ]


def _norm_shapes(prefix: str, width: int):
    return [(f"{prefix}.gamma", (width,)), (f"{prefix}.beta", (width,))]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical, ordered parameter names and shapes for ``config``."""
    d, n = config.dim, config.num_tokens
    shapes = [
        ("patch_embed.weight", (config.patch_features, d)),
        ("patch_embed.bias", (d,)),
        ("cls_token", (d,)),
        ("pos_embed", (n, d)),
    ]
    for i in range(config.depth):
        p = f"block.{i}"
        shapes += _norm_shapes(f"{p}.norm1", d)
        if config.variant == "ff_only":
            shapes += _mlp_shapes(f"{p}.token_ff", n, config.token_hidden)
        else:
            shapes += _attention_shapes(f"{p}.attn", d)
        shapes += _norm_shapes(f"{p}.norm2", d)
        if config.variant == "attention_only":
            shapes += _attention_shapes(f"{p}.feature_attn", n)
        else:
            shapes += _mlp_shapes(f"{p}.feature_ff", d, config.feature_hidden)
    shapes += _norm_shapes("norm", d)
    shapes += [("head.weight", (d, config.num_classes)), ("head.bias", (config.num_classes,))]
    return dict(shapes)


def param_count(config: ModelConfig) -> int:
    """Exact number of learnable scalars, in closed form."""
    d, n, t = config.dim, config.num_tokens, config.token_hidden
    h = config.feature_hidden
    embed = config.patch_features * d + d + d + n * d
    norms = 4 * d
    attn_tokens = 4 * d * d + 4 * d
    feature_ff = 2 * d * h + h + d
    if config.variant == "ff_only":
        block = (2 * n * t + t + n) + feature_ff + norms
    elif config.variant == "attention_baseline":
        block = attn_tokens + feature_ff + norms
    else:
        block = attn_tokens + (4 * n * n + 4 * n) + norms
    head = d * config.num_classes + config.num_classes
    return embed + config.depth * block + 2 * d + head


def _is_zero_init(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("bias", "beta", "b1", "b2", "bqkv", "bo")


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > INIT_TRUNCATION
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > INIT_TRUNCATION
    return out * INIT_STD


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParameterSet:
    """Deterministic initialization: truncated normal (std 0.02) weights,
    zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif _is_zero_init(name):
            data = np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return params


# -- forward pieces -------------------------------------------------------------


def _as_input(images, dtype) -> Tensor:
    if isinstance(images, Tensor):
        if images.dtype != dtype:
            return Tensor(images.data, dtype=dtype)
        return images
    return Tensor(np.asarray(images), dtype=dtype)


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """``[B, C, H, W] -> [B, (H/P)(W/P), C*P*P]``, patches in row-major grid order.

    Each patch is flattened channel-major, then row, then column.
    """
    b, c, h, w = images.shape
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch_size * patch_size)


def patch_embed(images, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Embed ``[B, C, H, W]`` images into ``[B, N, D]`` tokens (class token first)."""
    weight = params["patch_embed.weight"]
    images = _as_input(images, weight.dtype)
    expected = (config.channels, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"expected images of shape [B, {', '.join(map(str, expected))}], "
                         f"got {images.shape}")
    b = images.shape[0]
    tokens = T.add_bias(T.matmul(patchify(images, config.patch_size), weight),
                        params["patch_embed.bias"])
    cls = T.broadcast_to(T.reshape(params["cls_token"], (1, 1, config.dim)), (b, 1, config.dim))
    x = T.concat([cls, tokens], axis=1)
    return T.add(x, params["pos_embed"])


def _mlp(x: Tensor, w: Mapping[str, Tensor], dropout: float, rng) -> Tensor:
    h = T.gelu(T.add_bias(T.matmul(x, w["w1"]), w["b1"]))
    h = T.dropout(h, dropout, rng)
    out = T.add_bias(T.matmul(h, w["w2"]), w["b2"])
    return T.dropout(out, dropout, rng)


def token_ff(x: Tensor, weights: Mapping[str, Tensor], dropout: float = 0.0, rng=None) -> Tensor:
    """Feed-forward over the token axis of ``x [B, N, D]``.

    Only the token count the weights were built for is accepted.
    """
    n = weights["w1"].shape[0]
    if x.ndim != 3:
        raise ShapeError(f"token_ff expects [B, N, D], got {x.shape}")
    if x.shape[1] != n:
        raise FixedSequenceLengthError(expected=n, got=x.shape[1])
    y = _mlp(T.transpose_last_two(x), weights, dropout, rng)
    return T.transpose_last_two(y)


def feature_ff(x: Tensor, weights: Mapping[str, Tensor], dropout: float = 0.0, rng=None) -> Tensor:
    d = weights["w1"].shape[0]
    if x.shape[-1] != d:
        raise ShapeError(f"feature_ff built for D={d}, got input {x.shape}")
    return _mlp(x, weights, dropout, rng)


def self_attention(x: Tensor, weights: Mapping[str, Tensor], heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention over axis -2 of ``x [B, S, E]``."""
    b, s, e = x.shape
    if weights["wqkv"].shape[0] != e:
        raise ShapeError(f"attention built for width {weights['wqkv'].shape[0]}, got input {x.shape}")
    if e % heads:
        raise ConfigError(f"width {e} not divisible by {heads} heads")
    dh = e // heads
    qkv = T.add_bias(T.matmul(x, weights["wqkv"]), weights["bqkv"])
    qkv = qkv.reshape(b, s, 3, heads, dh).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.mul_scalar(T.matmul(q, T.transpose_last_two(k)), 1.0 / math.sqrt(dh))
    attn = T.softmax_last(scores)
    out = T.matmul(attn, v).permute(0, 2, 1, 3).reshape(b, s, e)
    return T.add_bias(T.matmul(out, weights["wo"]), weights["bo"])


def _sub(weights: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    head = prefix + "."
    return {k[len(head):]: v for k, v in weights.items() if k.startswith(head)}


def _norm(x: Tensor, weights: Mapping[str, Tensor], prefix: str, eps: float) -> Tensor:
    return T.layer_norm(x, weights[f"{prefix}.gamma"], weights[f"{prefix}.beta"], eps)


def linear_block(x: Tensor, weights: Mapping[str, Tensor], dropout: float = 0.0, rng=None,
                 eps: float = 1e-6) -> Tensor:
    """Token mixing then feature mixing, each pre-norm with a residual."""
    x = T.add(x, token_ff(_norm(x, weights, "norm1", eps), _sub(weights, "token_ff"), dropout, rng))
    return T.add(x, feature_ff(_norm(x, weights, "norm2", eps), _sub(weights, "feature_ff"),
                               dropout, rng))


def attention_block(x: Tensor, weights: Mapping[str, Tensor], heads: int, dropout: float = 0.0,
                    rng=None, eps: float = 1e-6) -> Tensor:
    x = T.add(x, self_attention(_norm(x, weights, "norm1", eps), _sub(weights, "attn"), heads))
    return T.add(x, feature_ff(_norm(x, weights, "norm2", eps), _sub(weights, "feature_ff"),
                               dropout, rng))


def attention_over_features_block(x: Tensor, weights: Mapping[str, Tensor], heads: int,
                                  eps: float = 1e-6) -> Tensor:
    """Attention over tokens, then single-head attention over the feature axis."""
    x = T.add(x, self_attention(_norm(x, weights, "norm1", eps), _sub(weights, "attn"), heads))
    y = T.transpose_last_two(_norm(x, weights, "norm2", eps))
    y = self_attention(y, _sub(weights, "feature_attn"), heads=1)
    return T.add(x, T.transpose_last_two(y))


def apply_block(x: Tensor, weights: Mapping[str, Tensor], config: ModelConfig,
                dropout: float = 0.0, rng=None) -> Tensor:
    if config.variant == "ff_only":
        return linear_block(x, weights, dropout, rng, config.eps)
    if config.variant == "attention_baseline":
        return attention_block(x, weights, config.heads, dropout, rng, config.eps)
    return attention_over_features_block(x, weights, config.heads, config.eps)


def model_forward(images, params: ParameterSet, config: ModelConfig, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> Tensor:
    """Images ``[B, C, H, W]`` to logits ``[B, num_classes]``.

    Dropout is applied only when ``mode == "train"``; that requires ``rng``
    whenever ``config.dropout > 0``.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    dropout = config.dropout if mode == "train" else 0.0
    if dropout > 0 and rng is None:
        raise ConfigError("train mode with dropout needs a random generator")
    x = patch_embed(images, params, config)
    for i in range(config.depth):
        x = apply_block(x, _sub(params, f"block.{i}"), config, dropout, rng)
    x = _norm(x, params, "norm", config.eps)
    cls = x[:, 0, :]
    return T.add_bias(T.matmul(cls, params["head.weight"]), params["head.bias"])
