"""Learned cross-view pathway: spatial encoder and multi-view transformer.

The spatial encoder is a shallow residual CNN shared across views that
maps RGB to geometry-oriented features at 1/8 resolution.  The transformer
alternates windowed self-attention (within a view) and cross-attention
(against the tokens of neighboring views at the same window location),
drops the output normalization of the last cross layer and finishes with a
gated-MLP adapter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .nn import Conv2d, LayerNorm, Linear, Module, SwiGluAdapter


@dataclass(frozen=True)
class SpatialEncoderConfig:
    out_channels: int = 128
    downsample_factor: int = 8
    residual_blocks: int = 3

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise ConfigError(f"downsample_factor must be a power of 2, got {f}")
        if self.out_channels <= 0:
            raise ConfigError(f"out_channels must be positive, got {self.out_channels}")
        if 2 ** self.residual_blocks < f:
            raise ConfigError(
                f"{self.residual_blocks} residual blocks cannot reach 1/{f} resolution"
            )


@dataclass(frozen=True)
class MvTransformerConfig:
    layers: int = 6
    window_size: int = 8
    heads: int = 4
    channels: int = 128
    neighbor_limit: int = 2
    shifted_windows: bool = False

    def __post_init__(self):
        if self.layers <= 0 or self.layers % 2 != 0:
            raise ConfigError(f"layers must be positive and even, got {self.layers}")
        if self.channels % self.heads != 0:
            raise ConfigError(
                f"channels ({self.channels}) must divide evenly into {self.heads} heads"
            )
        if self.neighbor_limit < 1:
            raise ConfigError(f"neighbor_limit must be >= 1, got {self.neighbor_limit}")


@dataclass
class CrossViewFeatures:
    """Per-view enhanced feature maps, one tensor of shape [V,C,H',W']."""

    maps: Tensor

    @property
    def num_views(self) -> int:
        return self.maps.shape[0]

    @property
    def channels(self) -> int:
        return self.maps.shape[1]


# -- window bookkeeping ---------------------------------------------------


def window_partition(x: Tensor, win: int, shift: int = 0):
    """Split x[C,H,W] into non-overlapping win x win token windows.

    Returns (tokens [num_windows, win*win, C], layout) where layout carries
    what window_unpartition needs to restore the original extent exactly.
    Remainders are zero-padded (and offset by `shift` for shifted variants).
    """
    c, h, w = x.shape
    hp = -(-(h + shift) // win) * win
    wp = -(-(w + shift) // win) * win
    xp = ad.pad(x, ((0, 0), (shift, hp - h - shift), (shift, wp - w - shift)))
    nh, nw = hp // win, wp // win
    t = ad.reshape(xp, (c, nh, win, nw, win))
    t = ad.transpose(t, (1, 3, 2, 4, 0))
    return ad.reshape(t, (nh * nw, win * win, c)), (h, w, hp, wp, shift)


def window_unpartition(tokens: Tensor, win: int, layout) -> Tensor:
    """Exact inverse of window_partition."""
    h, w, hp, wp, shift = layout
    nh, nw = hp // win, wp // win
    c = tokens.shape[-1]
    t = ad.reshape(tokens, (nh, nw, win, win, c))
    t = ad.transpose(t, (4, 0, 2, 1, 3))
    xp = ad.reshape(t, (c, hp, wp))
    return xp[:, shift : shift + h, shift : shift + w]


def window_valid_mask(h: int, w: int, win: int, shift: int = 0) -> np.ndarray:
    """Boolean [num_windows, win*win] marking tokens that map to real pixels."""
    valid = np.zeros((h + shift, w + shift), dtype=bool)
    valid[shift:, shift:] = True
    hp = -(-(h + shift) // win) * win
    wp = -(-(w + shift) // win) * win
    valid = np.pad(valid, ((0, hp - h - shift), (0, wp - w - shift)))
    nh, nw = hp // win, wp // win
    return (
        valid.reshape(nh, win, nw, win).transpose(0, 2, 1, 3).reshape(nh * nw, win * win)
    )


def _relative_position_index(win: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(win), np.arange(win), indexing="ij"), -1)
    coords = coords.reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :] + (win - 1)
    return rel[..., 0] * (2 * win - 1) + rel[..., 1]


# -- attention ------------------------------------------------------------


class WindowAttention(Module):
    """Multi-head attention within aligned windows, with relative position bias."""

    def __init__(self, rng, channels: int, heads: int, win: int):
        self.to_q = Linear(rng, channels, channels)
        self.to_k = Linear(rng, channels, channels)
        self.to_v = Linear(rng, channels, channels)
        self.proj = Linear(rng, channels, channels)
        self.pos_bias = Tensor(
            np.zeros(((2 * win - 1) ** 2, heads)), requires_grad=True
        )
        self.heads = heads
        self.win = win
        self._bias_index = _relative_position_index(win).ravel()

    def __call__(self, queries: Tensor, keyvalues: list[Tensor],
                 key_mask: np.ndarray | None = None, attn_sink: list | None = None) -> Tensor:
        nw, t, c = queries.shape
        h = self.heads
        dh = c // h
        kv = keyvalues[0] if len(keyvalues) == 1 else ad.concat(keyvalues, axis=1)
        tk = kv.shape[1]

        def split_heads(z, length):
            z = ad.reshape(z, (nw, length, h, dh))
            return ad.transpose(z, (0, 2, 1, 3))

        q = split_heads(self.to_q(queries), t)
        k = split_heads(self.to_k(kv), tk)
        v = split_heads(self.to_v(kv), tk)

        logits = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        bias = self.pos_bias[self._bias_index]  # [t*t, heads]
        bias = ad.transpose(ad.reshape(bias, (t, t, h)), (2, 0, 1))
        if tk != t:
            bias = ad.concat([bias] * (tk // t), axis=2)
        logits = logits + bias
        if key_mask is not None and not key_mask.all():
            logits = logits + np.where(key_mask, 0.0, -1e30)[:, None, None, :]
        attn = ad.softmax(logits, axis=-1)
        if attn_sink is not None:
            attn_sink.append(attn.data)
        out = ad.matmul(attn, v)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (nw, t, c))
        return self.proj(out)


# -- spatial encoder ------------------------------------------------------


class _ResidualBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int, stride: int):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, stride=1, padding=1)
        self.skip = (
            Conv2d(rng, c_in, c_out, 1, stride=stride, bias=False)
            if (stride != 1 or c_in != c_out)
            else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv2(ad.silu(self.conv1(x)))
        s = self.skip(x) if self.skip is not None else x
        return ad.silu(y + s)


class SpatialEncoder(Module):
    """Residual CNN mapping [V,3,H,W] to [V,C,H/f,W/f], weights shared across views."""

    def __init__(self, rng, cfg: SpatialEncoderConfig):
        self.cfg = cfg
        n_down = int(np.log2(cfg.downsample_factor))
        channels = [max(8, cfg.out_channels >> (cfg.residual_blocks - 1 - i))
                    for i in range(cfg.residual_blocks)]
        channels[-1] = cfg.out_channels
        blocks = []
        c_in = 3
        for i, c_out in enumerate(channels):
            stride = 2 if i < n_down else 1
            blocks.append(_ResidualBlock(rng, c_in, c_out, stride))
            c_in = c_out
        self.blocks = blocks

    def __call__(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ContractError(f"expected [V,3,H,W] images, got {images.shape}")
        f = self.cfg.downsample_factor
        _, _, h, w = images.shape
        if h % f or w % f:
            images = ad.pad(images, ((0, 0), (0, 0), (0, -h % f), (0, -w % f)))
        x = images
        for block in self.blocks:
            x = block(x)
        return x


# -- multi-view transformer ------------------------------------------------


def neighbor_indices(num_views: int, camera_positions, limit: int) -> list[list[int]]:
    """Per view, the views it cross-attends to (nearest by camera distance).

    Ties break toward the lower view index.  A single view attends to its
    own copy.  When more neighbors exist than the limit, camera positions
    are required to rank them.
    """
    if num_views == 1:
        return [[0]]
    if num_views - 1 <= limit:
        return [[j for j in range(num_views) if j != i] for i in range(num_views)]
    if camera_positions is None:
        raise ContractError(
            f"{num_views} views exceed the neighbor limit {limit}; camera positions required"
        )
    pos = np.asarray(camera_positions, dtype=np.float64).reshape(num_views, -1)
    out = []
    for i in range(num_views):
        others = [j for j in range(num_views) if j != i]
        dists = [(float(np.linalg.norm(pos[i] - pos[j])), j) for j in others]
        dists.sort()
        out.append([j for _, j in dists[:limit]])
    return out


class MultiViewTransformer(Module):
    """Stack of alternating self/cross window-attention layers plus adapter."""

    def __init__(self, rng, cfg: MvTransformerConfig):
        self.cfg = cfg
        self.attn_layers = [
            WindowAttention(rng, cfg.channels, cfg.heads, cfg.window_size)
            for _ in range(cfg.layers)
        ]
        # final cross layer keeps no output normalization
        self.norms = [LayerNorm(cfg.channels) for _ in range(cfg.layers - 1)]
        self.adapter = SwiGluAdapter(rng, cfg.channels)

    def __call__(self, feats: Tensor, camera_positions=None,
                 attn_sink: list | None = None) -> CrossViewFeatures:
        if feats.ndim != 4:
            raise ContractError(f"expected [V,C,H',W'] features, got {feats.shape}")
        v, c, h, w = feats.shape
        if c != self.cfg.channels:
            raise ContractError(f"feature channels {c} != configured {self.cfg.channels}")
        cfg = self.cfg
        neighbors = neighbor_indices(v, camera_positions, cfg.neighbor_limit)

        for idx, attn in enumerate(self.attn_layers):
            is_cross = idx % 2 == 1
            shift = cfg.window_size // 2 if (cfg.shifted_windows and idx % 2 == 1) else 0
            tokens, layouts, masks = [], [], []
            for i in range(v):
                tok, layout = window_partition(feats[i], cfg.window_size, shift)
                tokens.append(tok)
                layouts.append(layout)
                masks.append(window_valid_mask(h, w, cfg.window_size, shift))
            new_views = []
            for i in range(v):
                if is_cross:
                    kv = [tokens[j] for j in neighbors[i]]
                    key_mask = np.concatenate([masks[j] for j in neighbors[i]], axis=1)
                else:
                    kv = [tokens[i]]
                    key_mask = masks[i]
                y = tokens[i] + attn(tokens[i], kv, key_mask, attn_sink)
                if idx < cfg.layers - 1:
                    y = self.norms[idx](y)
                new_views.append(window_unpartition(y, cfg.window_size, layouts[i]))
            feats = ad.stack(new_views, axis=0)

        tokens = ad.transpose(ad.reshape(feats, (v, c, h * w)), (0, 2, 1))
        tokens = self.adapter(tokens)
        feats = ad.reshape(ad.transpose(tokens, (0, 2, 1)), (v, c, h, w))
        return CrossViewFeatures(maps=feats)


class CrossViewEncoder(Module):
    """Spatial encoder followed by the multi-view transformer: F = m(s(I))."""

    def __init__(self, rng, enc_cfg: SpatialEncoderConfig, tr_cfg: MvTransformerConfig):
        if enc_cfg.out_channels != tr_cfg.channels:
            raise ConfigError(
                f"encoder channels {enc_cfg.out_channels} != transformer channels {tr_cfg.channels}"
            )
        self.spatial = SpatialEncoder(rng, enc_cfg)
        self.transformer = MultiViewTransformer(rng, tr_cfg)

    def __call__(self, images: Tensor, camera_positions=None,
                 attn_sink: list | None = None) -> CrossViewFeatures:
        return self.transformer(self.spatial(images), camera_positions, attn_sink)
