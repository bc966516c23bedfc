"""Vision Transformer encoder producing a spatial grid of patch features.

The encoder turns an (H, W, C) image into an (H/P, W/P, D) feature grid:
the image is cut into non-overlapping P x P patches, each patch is
flattened and linearly projected to D dimensions, a class token and a
learnable positional encoding are added, the token sequence runs through
pre-norm transformer blocks, and the class token is dropped before the
remaining tokens are reshaped back onto the patch grid.

Tensor layout is channels-last throughout: images are (H, W, C) or
(B, H, W, C), feature grids (H', W', D) or (B, H', W', D).

Patch flattening order (fixed, relied on by tests and weight import):
pixels within a patch are row-major, channels fastest, i.e. flat index
``(row * P + col) * C + channel``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import nn

from ._bilinear import resize_bilinear_hwc
from .errors import ConfigError, DimensionError, TensorNotFoundError

LAYERNORM_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters for the ViT encoder."""

    patch_size: int
    embed_dim: int
    depth: int
    num_heads: int
    mlp_ratio: float = 4.0
    in_channels: int = 3
    preset: str = "custom"
    # Per-model preprocessing stats, applied channel-wise before patchify.
    # Left unset the encoder consumes raw [0, 1] values.
    pixel_mean: tuple[float, ...] | None = None
    pixel_std: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.num_heads < 1 or self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be a positive multiple of num_heads {self.num_heads}"
            )
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        for stats in (self.pixel_mean, self.pixel_std):
            if stats is not None and len(stats) != self.in_channels:
                raise ConfigError(f"preprocessing stats must have {self.in_channels} entries")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels


_PRESETS = {
    "tiny": dict(patch_size=4, embed_dim=32, depth=2, num_heads=2),
    "small": dict(patch_size=8, embed_dim=64, depth=4, num_heads=4),
    # Mirrors ViT-L: 24 layers, 16 heads, 1024-dim embeddings, 16px patches.
    "vitl-compat": dict(patch_size=16, embed_dim=1024, depth=24, num_heads=16),
}


def preset_config(name: str, **overrides) -> EncoderConfig:
    """Build an EncoderConfig from a named preset, with field overrides."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown encoder preset {name!r}; choose from {sorted(_PRESETS)}")
    cfg = EncoderConfig(preset=name, **_PRESETS[name])
    return replace(cfg, **overrides) if overrides else cfg


def patchify(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Cut an (H, W, C) image into flattened non-overlapping patches.

    Returns an (N, P*P*C) tensor with N = H*W/P^2. Patch k covers block
    (k // (W/P), k % (W/P)); within a patch values are row-major with
    channels fastest.
    """
    if image.ndim != 3:
        raise DimensionError(f"patchify expects an (H, W, C) image, got shape {tuple(image.shape)}")
    h, w, c = image.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        pad_h = (p - h % p) % p
        pad_w = (p - w % p) % p
        raise DimensionError(
            f"image size {h}x{w} is not divisible by patch size {p}; "
            f"pad by ({pad_h}, {pad_w}) to {h + pad_h}x{w + pad_w}"
        )
    gh, gw = h // p, w // p
    blocks = image.reshape(gh, p, gw, p, c).permute(0, 2, 1, 3, 4)
    return blocks.reshape(gh * gw, p * p * c)


def embed_tokens(
    patches: torch.Tensor,
    projection: torch.Tensor,
    pos_embed: torch.Tensor,
    cls_token: torch.Tensor,
) -> torch.Tensor:
    """Project flattened patches and prepend the class token.

    ``projection`` is (P*P*C, D); ``pos_embed`` is (N+1, D) and is added to
    the full sequence including the class token; returns (N+1, D) tokens.
    """
    if patches.ndim != 2 or projection.ndim != 2 or patches.shape[1] != projection.shape[0]:
        raise DimensionError(
            f"patches {tuple(patches.shape)} do not match projection {tuple(projection.shape)}"
        )
    n, d = patches.shape[0], projection.shape[1]
    if cls_token.shape != (d,):
        raise DimensionError(f"class token must have shape ({d},), got {tuple(cls_token.shape)}")
    if pos_embed.shape != (n + 1, d):
        raise DimensionError(
            f"positional encoding must have shape ({n + 1}, {d}), got {tuple(pos_embed.shape)}"
        )
    tokens = torch.cat([cls_token.unsqueeze(0), patches @ projection], dim=0)
    return tokens + pos_embed


class MultiHeadSelfAttention(nn.Module):
    """Global multi-head self-attention with separate Q/K/V/O projections."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q = self.q(x).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(x).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(x).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * (self.head_dim ** -0.5)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.o(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(nn.functional.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LAYERNORM_EPS)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=LAYERNORM_EPS)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """ViT encoder emitting spatial feature grids.

    ``image_size`` fixes the grid the positional encoding is stored for;
    other resolutions are handled by bilinearly resampling the positional
    grid (the class-token position is kept as is).
    """

    def __init__(self, config: EncoderConfig, image_size: int = 224):
        super().__init__()
        if image_size % config.patch_size != 0:
            raise ConfigError(
                f"image_size {image_size} must be divisible by patch_size {config.patch_size}"
            )
        self.config = config
        self.native_grid = image_size // config.patch_size
        n = self.native_grid * self.native_grid

        self.patch_embed = nn.Linear(config.patch_dim, config.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(config.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(n + 1, config.embed_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.num_heads, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim, eps=LAYERNORM_EPS)
        self._init_weights()

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=INIT_STD)
                nn.init.zeros_(module.bias)
        nn.init.trunc_normal_(self.cls_token, std=INIT_STD)
        nn.init.trunc_normal_(self.pos_embed, std=INIT_STD)

    def _pos_for_grid(self, gh: int, gw: int) -> torch.Tensor:
        """Positional encoding resampled to a (gh, gw) patch grid."""
        if gh == self.native_grid and gw == self.native_grid:
            return self.pos_embed
        grid = self.pos_embed[1:].reshape(self.native_grid, self.native_grid, -1)
        grid = resize_bilinear_hwc(grid, gh, gw).reshape(gh * gw, -1)
        return torch.cat([self.pos_embed[:1], grid], dim=0)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) or (H, W, C) images -> (B, H', W', D) or (H', W', D) grid."""
        single = images.ndim == 3
        if single:
            images = images.unsqueeze(0)
        if images.ndim != 4:
            raise DimensionError(f"expected (B, H, W, C) images, got shape {tuple(images.shape)}")
        b, h, w, c = images.shape
        cfg = self.config
        if c != cfg.in_channels:
            raise DimensionError(f"encoder expects {cfg.in_channels} channels, got {c}")
        p = cfg.patch_size
        if h % p != 0 or w % p != 0:
            raise DimensionError(
                f"image size {h}x{w} is not divisible by patch size {p}; "
                f"pad by ({(p - h % p) % p}, {(p - w % p) % p})"
            )
        if cfg.pixel_mean is not None:
            mean = images.new_tensor(cfg.pixel_mean)
            std = images.new_tensor(cfg.pixel_std if cfg.pixel_std is not None else (1.0,) * c)
            images = (images - mean) / std

        gh, gw = h // p, w // p
        patches = images.reshape(b, gh, p, gw, p, c).permute(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(b, gh * gw, cfg.patch_dim)
        tokens = self.patch_embed(patches)
        cls = self.cls_token.expand(b, 1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self._pos_for_grid(gh, gw)

        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)

        grid = tokens[:, 1:].reshape(b, gh, gw, cfg.embed_dim)
        return grid.squeeze(0) if single else grid

    @torch.no_grad()
    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Inference entry point: one (H, W, C) image -> (H', W', D) grid."""
        was_training = self.training
        self.eval()
        try:
            return self.forward(image)
        finally:
            self.train(was_training)


def base_state_tensors(model: VisionTransformer) -> dict[str, torch.Tensor]:
    """Base encoder weights under their canonical names.

    Adapter-wrapped attention projections store the frozen matrix one level
    deeper (``...attn.q.base.weight``); this strips the ``.base`` segment so
    checkpoints keep the documented ``blocks.{i}.attn.q.weight`` names, and
    drops adapter parameters (those serialize separately).
    """
    out = {}
    for name, tensor in model.state_dict().items():
        if ".adapter_" in name:
            continue
        out[name.replace(".base.", ".")] = tensor
    return out


def load_base_state(model: VisionTransformer, tensors: dict[str, torch.Tensor]) -> None:
    """Load canonical-name weights into a (possibly adapter-wrapped) model."""
    target = {}
    for name, tensor in model.state_dict().items():
        if ".adapter_" in name:
            continue
        canonical = name.replace(".base.", ".")
        if canonical not in tensors:
            raise TensorNotFoundError(f"weight set is missing tensor {canonical!r}")
        value = torch.as_tensor(tensors[canonical])
        if tuple(value.shape) != tuple(tensor.shape):
            raise DimensionError(
                f"tensor {canonical!r} has shape {tuple(value.shape)}, expected {tuple(tensor.shape)}"
            )
        target[name] = value.to(tensor.dtype)
    model.load_state_dict(target, strict=False)
