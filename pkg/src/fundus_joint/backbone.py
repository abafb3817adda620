"""Hierarchical shifted-window transformer blocks and a U-shaped encoder/decoder.

Feature maps are channel-last tensors ``(B, H, W, D)``; the token grid is the
``H x W`` part and ``D`` the token dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class BackboneConfig:
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 2, 2)
    decoder_depths: tuple[int, ...] = (2, 2, 2)
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 7
    input_size: tuple[int, int] = (224, 224)
    patch_size: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.decoder_depths = tuple(self.decoder_depths)
        self.num_heads = tuple(self.num_heads)
        self.input_size = tuple(self.input_size)
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValueError(f"input size {self.input_size} must be divisible by 32")
        if len(self.depths) != 4 or len(self.num_heads) != 4 or len(self.decoder_depths) != 3:
            raise ValueError("expected 4 encoder stages, 4 head counts and 3 decoder stages")
        for i, heads in enumerate(self.num_heads):
            if (self.embed_dim * 2**i) % heads:
                raise ValueError(f"stage {i} dim {self.embed_dim * 2**i} not divisible by {heads} heads")

    @property
    def stage_dims(self) -> list[int]:
        return [self.embed_dim * 2**i for i in range(4)]

    @property
    def stage_grids(self) -> list[tuple[int, int]]:
        h, w = self.input_size
        p = self.patch_size
        return [(h // p // 2**i, w // p // 2**i) for i in range(4)]

    def metadata(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "depths": list(self.depths),
            "decoder_depths": list(self.decoder_depths),
            "num_heads": list(self.num_heads),
            "window_size": self.window_size,
            "input_size": list(self.input_size),
            "patch_size": self.patch_size,
            "mlp_ratio": self.mlp_ratio,
        }


def desk_config(**overrides) -> BackboneConfig:
    """Small preset used for CPU verification: 64x64 input, C=24, window 4."""
    kw = dict(embed_dim=24, window_size=4, input_size=(64, 64))
    kw.update(overrides)
    return BackboneConfig(**kw)


def effective_window(grid: tuple[int, int], window: int) -> tuple[int, int]:
    """Window and shift for a stage; grids not larger than the window use one unshifted window."""
    h, w = grid
    if h <= window and w <= window:
        if h != w:
            raise ValueError(f"non-square grid {grid} smaller than window {window}")
        return h, 0
    if h % window or w % window:
        raise ValueError(f"window {window} does not divide token grid {grid}")
    return window, window // 2


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    b, h, w, d = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, d)


def window_merge(win: torch.Tensor, ws: int, b: int, h: int, w: int) -> torch.Tensor:
    d = win.shape[-1]
    x = win.view(b, h // ws, w // ws, ws, ws, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, d)


def shifted_window_mask(h: int, w: int, ws: int, shift: int) -> torch.Tensor:
    """Additive mask ``(nW, ws*ws, ws*ws)`` blocking attention across cyclic-shift seams."""
    region = torch.zeros(1, h, w, 1)
    cuts = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for wsl in cuts:
            region[:, hs, wsl, :] = label
            label += 1
    ids = window_partition(region, ws).squeeze(-1)
    diff = ids.unsqueeze(1) - ids.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, -100.0)


class WindowAttention(nn.Module):
    """Multi-head self-attention within a window, with a learned relative position bias."""

    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        self.dim, self.window, self.heads = dim, window, heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
        coords = coords.flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
        index = rel[..., 0] * (2 * window - 1) + rel[..., 1]
        self.register_buffer("rel_index", index, persistent=False)
        self.record = False
        self.last_attn: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bw, n, d = x.shape
        qkv = self.qkv(x).view(bw, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.reshape(-1)].view(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        if self.record:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(bw, n, d)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, shift: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.window, self.shift = window, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self._mask_cache: dict = {}

    def _mask(self, h: int, w: int, device) -> torch.Tensor | None:
        if self.shift == 0:
            return None
        key = (h, w, str(device))
        if key not in self._mask_cache:
            self._mask_cache[key] = shifted_window_mask(h, w, self.window, self.shift).to(device)
        return self._mask_cache[key]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, d = x.shape
        y = self.norm1(x)
        if self.shift:
            y = torch.roll(y, shifts=(-self.shift, -self.shift), dims=(1, 2))
        win = window_partition(y, self.window)
        win = self.attn(win, self._mask(h, w, x.device))
        y = window_merge(win, self.window, b, h, w)
        if self.shift:
            y = torch.roll(y, shifts=(self.shift, self.shift), dims=(1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


class SwinStage(nn.Module):
    """``depth`` blocks alternating regular and shifted windows; shape-preserving."""

    def __init__(self, dim: int, depth: int, heads: int, window: int, grid: tuple[int, int],
                 mlp_ratio: float = 4.0):
        super().__init__()
        if depth % 2:
            raise ValueError(f"stage depth must be even, got {depth}")
        ws, shift = effective_window(grid, window)
        self.grid = tuple(grid)
        self.blocks = nn.ModuleList(
            SwinBlock(dim, heads, ws, 0 if i % 2 == 0 else shift, mlp_ratio) for i in range(depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:3]) != self.grid:
            raise ValueError(f"stage built for grid {self.grid}, got {tuple(x.shape[1:3])}")
        for blk in self.blocks:
            x = blk(x)
        return x


class PatchEmbed(nn.Module):
    def __init__(self, in_ch: int, dim: int, patch: int = 4):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(in_ch, dim, kernel_size=patch, stride=patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        h, w = img.shape[-2:]
        if h % self.patch or w % self.patch:
            raise ValueError(f"image size {(h, w)} not divisible by patch size {self.patch}")
        return self.norm(self.proj(img).permute(0, 2, 3, 1))


class PatchMerge(nn.Module):
    """2x2 neighbourhood concatenation (4D) and a linear map to 2D."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[1:3]
        if h % 2 or w % 2:
            raise ValueError(f"patch merging needs an even grid, got {(h, w)}")
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


def _pixel_shuffle_last(x: torch.Tensor, r: int) -> torch.Tensor:
    b, h, w, d = x.shape
    c = d // (r * r)
    x = x.view(b, h, w, r, r, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h * r, w * r, c)


class PatchExpand(nn.Module):
    """Linear D -> 2D, then each token becomes a 2x2 block of dim D/2."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError(f"patch expanding needs an even dim, got {dim}")
        self.expand = nn.Linear(dim, 2 * dim, bias=False)
        self.norm = nn.LayerNorm(dim // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(_pixel_shuffle_last(self.expand(x), 2))


class FinalExpand(nn.Module):
    """Patch-size upsampling back to pixel resolution, keeping dim ``D``."""

    def __init__(self, dim: int, factor: int = 4):
        super().__init__()
        self.factor = factor
        self.expand = nn.Linear(dim, factor * factor * dim, bias=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(_pixel_shuffle_last(self.expand(x), self.factor))


class SkipFuse(nn.Module):
    """Concatenate decoder and encoder features (2D) and project back to D."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(2 * dim, dim)

    def forward(self, up: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if up.shape != skip.shape:
            raise ValueError(f"skip fusion shape mismatch: {tuple(up.shape)} vs {tuple(skip.shape)}")
        return self.proj(torch.cat([up, skip], dim=-1))


class Encoder(nn.Module):
    def __init__(self, cfg: BackboneConfig, in_ch: int = 3):
        super().__init__()
        self.cfg = cfg
        dims, grids = cfg.stage_dims, cfg.stage_grids
        self.patch_embed = PatchEmbed(in_ch, cfg.embed_dim, cfg.patch_size)
        self.stages = nn.ModuleList(
            SwinStage(dims[i], cfg.depths[i], cfg.num_heads[i], cfg.window_size, grids[i], cfg.mlp_ratio)
            for i in range(4)
        )
        self.merges = nn.ModuleList(PatchMerge(dims[i]) for i in range(3))
        self.norm = nn.LayerNorm(dims[3])

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        if tuple(img.shape[-2:]) != self.cfg.input_size:
            raise ValueError(f"model expects input {self.cfg.input_size}, got {tuple(img.shape[-2:])}")
        x = self.patch_embed(img)
        feats = []
        for i in range(4):
            x = self.stages[i](x)
            if i < 3:
                feats.append(x)
                x = self.merges[i](x)
        feats.append(self.norm(x))
        return feats


class Decoder(nn.Module):
    """Patch-expanding decoder with skip fusion and a per-pixel linear head."""

    def __init__(self, cfg: BackboneConfig, out_ch: int):
        super().__init__()
        dims, grids = cfg.stage_dims, cfg.stage_grids
        self.expands = nn.ModuleList(PatchExpand(dims[3 - i]) for i in range(3))
        self.fuses = nn.ModuleList(SkipFuse(dims[2 - i]) for i in range(3))
        self.stages = nn.ModuleList(
            SwinStage(dims[2 - i], cfg.decoder_depths[i], cfg.num_heads[2 - i], cfg.window_size,
                      grids[2 - i], cfg.mlp_ratio)
            for i in range(3)
        )
        self.final = FinalExpand(cfg.embed_dim, cfg.patch_size)
        self.head = nn.Linear(cfg.embed_dim, out_ch)

    def trace(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        x = feats[3]
        out = [x]
        for i in range(3):
            x = self.expands[i](x)
            x = self.fuses[i](x, feats[2 - i])
            x = self.stages[i](x)
            out.append(x)
        return out

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        x = self.trace(feats)[-1]
        logits = self.head(self.final(x))
        return logits.permute(0, 3, 1, 2)


class SwinUNet(nn.Module):
    """Single-decoder variant (vessel pretraining, fine segmentation)."""

    def __init__(self, cfg: BackboneConfig, in_ch: int = 3, out_ch: int = 1):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg, in_ch)
        self.decoder = Decoder(cfg, out_ch)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(img))


def set_attention_recording(model: nn.Module, on: bool = True) -> list[WindowAttention]:
    mods = [m for m in model.modules() if isinstance(m, WindowAttention)]
    for m in mods:
        m.record = on
        if not on:
            m.last_attn = None
    return mods


def count_parameters(model: nn.Module, exclude_position_tables: bool = False) -> int:
    total = 0
    for name, p in model.named_parameters():
        if exclude_position_tables and name.endswith("rel_bias"):
            continue
        total += p.numel()
    return total
