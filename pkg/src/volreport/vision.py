"""Volumetric vision encoder: 3D patch tokens, transformer blocks, spatial
pooling over the token grid, and a projector into the LM embedding width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import block_forward, gaussian, init_block, linear, ones, zeros
from .tensor import Tensor, add, gelu, layer_norm, mean, reshape, transpose

AXIS_NAMES = ("depth", "height", "width")


@dataclass
class VisionConfig:
    patch_size: tuple[int, int, int] = (4, 8, 8)
    d_vis: int = 64
    n_layers: int = 2
    n_heads: int = 4
    pool_stride: tuple[int, int, int] = (2, 2, 2)
    d_lm: int = 128
    mlp_mult: int = 4

    def __post_init__(self):
        if self.d_vis % self.n_heads:
            raise ConfigError(f"d_vis {self.d_vis} not divisible by n_heads {self.n_heads}")

    def grid_for(self, input_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        grid = []
        for name, dim, p in zip(AXIS_NAMES, input_shape, self.patch_size):
            if dim % p:
                raise ConfigError(f"{name} {dim} not divisible by patch size {p}")
            grid.append(dim // p)
        for name, g, s in zip(AXIS_NAMES, grid, self.pool_stride):
            if g % s:
                raise ConfigError(f"token grid {name} {g} not divisible by pool stride {s}")
        return tuple(grid)

    def n_tokens(self, input_shape) -> int:
        g = self.grid_for(input_shape)
        return g[0] * g[1] * g[2]

    def to_dict(self) -> dict:
        return {
            "patch_size": list(self.patch_size),
            "d_vis": self.d_vis,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "pool_stride": list(self.pool_stride),
            "d_lm": self.d_lm,
            "mlp_mult": self.mlp_mult,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VisionConfig":
        return cls(
            patch_size=tuple(d["patch_size"]),
            d_vis=d["d_vis"],
            n_layers=d["n_layers"],
            n_heads=d["n_heads"],
            pool_stride=tuple(d["pool_stride"]),
            d_lm=d["d_lm"],
            mlp_mult=d["mlp_mult"],
        )


@dataclass
class VisionFeatures:
    """Token matrix plus the spatial layout it was flattened from (row-major d,h,w)."""

    tokens: Tensor
    grid: tuple[int, int, int]

    def __post_init__(self):
        gd, gh, gw = self.grid
        if self.tokens.shape[0] != gd * gh * gw:
            raise ShapeError(f"token count {self.tokens.shape[0]} != grid {self.grid}")


@dataclass
class ImageContext:
    """Image tokens projected into the LM embedding space."""

    tokens: Tensor

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


def init_vision_params(cfg: VisionConfig, input_shape, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    grid = cfg.grid_for(input_shape)
    n = grid[0] * grid[1] * grid[2]
    pvol = cfg.patch_size[0] * cfg.patch_size[1] * cfg.patch_size[2]
    params: dict[str, Tensor] = {
        "patch_w": gaussian(rng, (cfg.d_vis, pvol), 1.0 / np.sqrt(pvol), dtype),
        "patch_b": zeros((cfg.d_vis,), dtype),
        "pos": gaussian(rng, (n, cfg.d_vis), 0.02, dtype),
    }
    for i in range(cfg.n_layers):
        for k, t in init_block(rng, cfg.d_vis, cfg.mlp_mult, dtype).items():
            params[f"blocks.{i}.{k}"] = t
    params["ln_f_g"] = ones((cfg.d_vis,), dtype)
    params["ln_f_b"] = zeros((cfg.d_vis,), dtype)
    params["proj_w1"] = gaussian(rng, (cfg.d_lm, cfg.d_vis), 1.0 / np.sqrt(cfg.d_vis), dtype)
    params["proj_b1"] = zeros((cfg.d_lm,), dtype)
    params["proj_w2"] = gaussian(rng, (cfg.d_lm, cfg.d_lm), 1.0 / np.sqrt(cfg.d_lm), dtype)
    params["proj_b2"] = zeros((cfg.d_lm,), dtype)
    return params


def extract_patches(volume: Tensor, patch_size) -> tuple[Tensor, tuple[int, int, int]]:
    """Flatten non-overlapping 3D blocks into row vectors, grid row-major in (d, h, w)."""
    if volume.ndim == 4:
        if volume.shape[0] != 1:
            raise ShapeError(f"expected a single-channel volume, got shape {volume.shape}")
        volume = reshape(volume, volume.shape[1:])
    if volume.ndim != 3:
        raise ShapeError(f"expected a 3-d volume, got shape {volume.shape}")
    d, h, w = volume.shape
    pd, ph, pw = patch_size
    for name, dim, p in zip(AXIS_NAMES, (d, h, w), (pd, ph, pw)):
        if dim % p:
            raise ConfigError(f"{name} {dim} not divisible by patch size {p}")
    grid = (d // pd, h // ph, w // pw)
    x = reshape(volume, (grid[0], pd, grid[1], ph, grid[2], pw))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    x = reshape(x, (grid[0] * grid[1] * grid[2], pd * ph * pw))
    return x, grid


def patchify(volume: Tensor, cfg: VisionConfig, params: dict[str, Tensor]) -> VisionFeatures:
    """Patch, linearly embed to d_vis, and add learned positional embeddings."""
    patches, grid = extract_patches(volume, cfg.patch_size)
    tokens = add(linear(patches, params["patch_w"], params["patch_b"]), params["pos"])
    return VisionFeatures(tokens=tokens, grid=grid)


def vit3d_forward(feats: VisionFeatures, cfg: VisionConfig, params: dict[str, Tensor]) -> VisionFeatures:
    """Bidirectional pre-norm encoder blocks; token count is unchanged."""
    x = feats.tokens
    for i in range(cfg.n_layers):
        blk = {k: params[f"blocks.{i}.{k}"] for k in
               ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")}
        x = block_forward(x, blk, cfg.n_heads, mask=None)
    x = layer_norm(x, params["ln_f_g"], params["ln_f_b"])
    return VisionFeatures(tokens=x, grid=feats.grid)


def spatial_pool(feats: VisionFeatures, stride: tuple[int, int, int]) -> VisionFeatures:
    """Mean-pool each stride block of the token grid; grid shrinks accordingly."""
    gd, gh, gw = feats.grid
    sd, sh, sw = stride
    for name, g, s in zip(AXIS_NAMES, feats.grid, stride):
        if g % s:
            raise ConfigError(f"token grid {name} {g} not divisible by pool stride {s}")
    d = feats.tokens.shape[1]
    new_grid = (gd // sd, gh // sh, gw // sw)
    x = reshape(feats.tokens, (new_grid[0], sd, new_grid[1], sh, new_grid[2], sw, d))
    x = mean(x, axis=(1, 3, 5))
    x = reshape(x, (new_grid[0] * new_grid[1] * new_grid[2], d))
    return VisionFeatures(tokens=x, grid=new_grid)


def project_to_lm(feats: VisionFeatures, params: dict[str, Tensor]) -> ImageContext:
    """Tokenwise two-layer MLP from d_vis to the LM embedding width."""
    h = gelu(linear(feats.tokens, params["proj_w1"], params["proj_b1"]))
    return ImageContext(tokens=linear(h, params["proj_w2"], params["proj_b2"]))


def encode_volume(volume: Tensor, cfg: VisionConfig, params: dict[str, Tensor]) -> ImageContext:
    """Full vision path: patchify, encode, pool, project."""
    feats = patchify(volume, cfg, params)
    feats = vit3d_forward(feats, cfg, params)
    feats = spatial_pool(feats, cfg.pool_stride)
    return project_to_lm(feats, params)
