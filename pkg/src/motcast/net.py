"""Context-modulated encoder, windowed-attention predictor and temporal-skip decoder."""

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._validation import ConfigError, ShapeError

DAYS_PER_YEAR = 365.25


@dataclass
class NetConfig:
    """Network hyper-parameters.

    The grid must be divisible by ``patch`` and the latent grid by ``window``.
    ``skip_dim`` is the width of the skip-fusion projection (defaults to
    ``latent_dim``).
    """

    latent_dim: int = 96
    patch: int = 4
    depth: int = 4
    window: int = 8
    mlp_ratio: int = 4
    heads: int = 4
    skip_dim: int = None
    n_inputs: int = 4
    n_freqs: int = 4
    rel_pos_bias: bool = False

    def __post_init__(self):
        if self.skip_dim is None:
            self.skip_dim = self.latent_dim
        if self.latent_dim % self.heads:
            raise ConfigError("latent_dim must be divisible by heads")
        if self.n_inputs < 1:
            raise ConfigError("n_inputs must be positive")
        for name in ("latent_dim", "patch", "window", "mlp_ratio", "heads", "skip_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def latent_shape(self, grid_shape):
        H, W = grid_shape
        p = self.patch
        if H % p or W % p:
            raise ShapeError(f"grid {grid_shape} is not divisible by patch {p}")
        Hl, Wl = H // p, W // p
        if Hl % self.window or Wl % self.window:
            raise ShapeError(f"latent grid {(Hl, Wl)} is not divisible by window {self.window}")
        return Hl, Wl

    def to_dict(self):
        return asdict(self)


@dataclass
class ContextFeatures:
    spatial: torch.Tensor  # (B, C', H', W')
    modulation: torch.Tensor  # (B, C')
    pooled: torch.Tensor  # (B, C')


def temporal_encoding(phase, day_of_year, n_freqs=4):
    """Fixed sinusoids of the 6-hour bin (period 4) and day of year (period 365.25 d)."""
    phase = torch.as_tensor(phase, dtype=torch.float64).reshape(-1, 1)
    doy = torch.as_tensor(day_of_year, dtype=torch.float64).reshape(-1, 1)
    k = torch.arange(1, n_freqs + 1, dtype=torch.float64)[None]
    a = 2 * math.pi * k * phase / 4
    b = 2 * math.pi * k * doy / DAYS_PER_YEAR
    return torch.cat([a.sin(), a.cos(), b.sin(), b.cos()], dim=1)


def _init_linear(m):
    nn.init.trunc_normal_(m.weight, std=0.02)
    if m.bias is not None:
        nn.init.zeros_(m.bias)


class ChannelNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of a (B, C, H, W) tensor."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class PriorNet(nn.Module):
    def __init__(self, cfg, latent_shape, land):
        super().__init__()
        d = cfg.latent_dim
        self.n_freqs = cfg.n_freqs
        self.embed = nn.Parameter(torch.zeros(d, *latent_shape))
        nn.init.trunc_normal_(self.embed, std=0.02)
        pooled_land = F.avg_pool2d(land[None, None].float(), cfg.patch)[0]
        self.register_buffer("land", pooled_land, persistent=False)
        n_in = d + 1 + 4 * cfg.n_freqs
        self.mix1 = nn.Conv2d(n_in, d, 1)
        self.mix2 = nn.Conv2d(d, d, 1)
        self.to_modulation = nn.Linear(d, d)

    def forward(self, phase, day_of_year):
        temporal = temporal_encoding(phase, day_of_year, self.n_freqs).to(self.embed.dtype)
        B = temporal.shape[0]
        Hl, Wl = self.embed.shape[1:]
        x = torch.cat([
            self.embed[None].expand(B, -1, -1, -1),
            self.land[None].to(self.embed.dtype).expand(B, -1, -1, -1),
            temporal[:, :, None, None].expand(-1, -1, Hl, Wl),
        ], dim=1)
        spatial = self.mix2(F.gelu(self.mix1(x)))
        pooled = spatial.mean(dim=(2, 3))
        return ContextFeatures(spatial, self.to_modulation(pooled), pooled)


class ModulatedEncoder(nn.Module):
    """Patch embedding whose kernel is scaled per output channel by (1 + modulation)."""

    def __init__(self, in_channels, cfg):
        super().__init__()
        self.patch = cfg.patch
        self.weight = nn.Parameter(torch.empty(cfg.latent_dim, in_channels, cfg.patch, cfg.patch))
        self.bias = nn.Parameter(torch.zeros(cfg.latent_dim))
        nn.init.trunc_normal_(self.weight, std=0.02)
        self.norm = ChannelNorm(cfg.latent_dim)

    def pre_norm(self, x, modulation):
        # scaling the conv output before the bias == convolving with W * (1 + m) per output channel
        y = F.conv2d(x, self.weight, stride=self.patch)
        y = y * (1 + modulation)[:, :, None, None]
        return y + self.bias[None, :, None, None]

    def forward(self, x, modulation):
        return self.norm(self.pre_norm(x, modulation))


class AdaLN(nn.Module):
    def __init__(self, dim, cond_dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.to_scale_shift = nn.Linear(cond_dim, 2 * dim)
        nn.init.zeros_(self.to_scale_shift.weight)
        nn.init.zeros_(self.to_scale_shift.bias)

    def forward(self, x, cond):
        # x: (B, H, W, C); cond: (B, C_cond)
        scale, shift = self.to_scale_shift(F.silu(cond)).chunk(2, dim=-1)
        return self.norm(x) * (1 + scale[:, None, None]) + shift[:, None, None]


def window_partition(x, ws):
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, C)


def window_reverse(windows, ws, B, H, W):
    C = windows.shape[-1]
    x = windows.view(B, H // ws, W // ws, ws, ws, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, C)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping windows, optionally cyclically shifted.

    Longitude is periodic, so a shifted window wrapping around in longitude
    is a physical neighbourhood; wrapping across the latitude edges is
    masked out.
    """

    def __init__(self, dim, heads, window, shift=0, rel_pos_bias=False):
        super().__init__()
        self.heads = heads
        self.window = window
        self.shift = shift
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_pos_bias = None
        if rel_pos_bias:
            self.rel_pos_bias = nn.Parameter(torch.zeros(heads, window * window, window * window))
        self.last_attn = None
        self.record = False

    def _shift_mask(self, H, W, device):
        ws, s = self.window, self.shift
        region = torch.zeros(1, H, W, 1, device=device)
        bounds = ((0, H - ws), (H - ws, H - s), (H - s, H))
        for label, (a, b) in enumerate(bounds):
            region[:, a:b] = label
        labels = window_partition(region, ws).squeeze(-1)  # (nW, ws*ws)
        diff = labels[:, None, :] - labels[:, :, None]
        return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))

    def forward(self, x):
        B, H, W, C = x.shape
        ws = self.window
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        win = window_partition(x, ws)
        n = win.shape[0]
        qkv = self.qkv(win).reshape(n, ws * ws, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(-2, -1)
        if self.rel_pos_bias is not None:
            logits = logits + self.rel_pos_bias[None]
        if self.shift:
            mask = self._shift_mask(H, W, x.device).to(logits.dtype)
            nW = mask.shape[0]
            logits = logits.view(B, nW, self.heads, ws * ws, ws * ws) + mask[None, :, None]
            logits = logits.view(n, self.heads, ws * ws, ws * ws)
        attn = logits.softmax(dim=-1)
        if self.record:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(n, ws * ws, C)
        out = window_reverse(self.proj(out), ws, B, H, W)
        if self.shift:
            out = torch.roll(out, shifts=(self.shift, self.shift), dims=(1, 2))
        return out


class AttentionBlock(nn.Module):
    def __init__(self, cfg, shift):
        super().__init__()
        d = cfg.latent_dim
        self.norm1 = AdaLN(d, d)
        self.attn = WindowAttention(d, cfg.heads, cfg.window, shift, cfg.rel_pos_bias)
        self.norm2 = AdaLN(d, d)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(), nn.Linear(cfg.mlp_ratio * d, d))

    def forward(self, x, cond):
        x = x + self.attn(self.norm1(x, cond))
        return x + self.ffn(self.norm2(x, cond))


class SkipDecoder(nn.Module):
    """Shared decoder: concat(predicted, encoder latent) -> 1x1 projection -> norm -> transposed conv."""

    def __init__(self, out_channels, cfg):
        super().__init__()
        d = cfg.latent_dim
        self.proj = nn.Conv2d(2 * d, cfg.skip_dim, 1)
        self.norm = ChannelNorm(cfg.skip_dim)
        self.up = nn.ConvTranspose2d(cfg.skip_dim, out_channels, cfg.patch, stride=cfg.patch)

    def forward(self, predicted, skip):
        z = self.norm(self.proj(torch.cat([predicted, skip], dim=1)))
        return self.up(F.gelu(z))


class ForecastNet(nn.Module):
    """Maps N normalised input states (oldest first) to N forecast candidates.

    Candidate i is decoded with the skip connection from the encoding of the
    state i steps before the newest one.
    """

    def __init__(self, cfg, n_channels, grid_shape, ocean):
        super().__init__()
        self.cfg = cfg
        self.n_channels = n_channels
        self.grid_shape = tuple(grid_shape)
        self.latent_shape = cfg.latent_shape(grid_shape)
        ocean = torch.as_tensor(np.array(ocean, dtype=bool))
        if tuple(ocean.shape) != self.grid_shape:
            raise ShapeError(f"ocean mask {tuple(ocean.shape)} does not match grid {self.grid_shape}")
        self.register_buffer("ocean", ocean, persistent=False)
        self.prior = PriorNet(cfg, self.latent_shape, ~ocean)
        self.encoder = ModulatedEncoder(n_channels, cfg)
        self.fuse = nn.Conv2d(cfg.n_inputs * cfg.latent_dim, cfg.latent_dim, 1)
        self.fuse_norm = ChannelNorm(cfg.latent_dim)
        shift = cfg.window // 2 if min(self.latent_shape) > cfg.window else 0
        self.blocks = nn.ModuleList(
            AttentionBlock(cfg, shift if b % 2 else 0) for b in range(cfg.depth)
        )
        self.decoder = SkipDecoder(n_channels, cfg)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
                _init_linear(m)
        for blk in self.blocks:
            nn.init.zeros_(blk.attn.proj.weight)
            nn.init.zeros_(blk.ffn[-1].weight)
            for ada in (blk.norm1, blk.norm2):
                nn.init.zeros_(ada.to_scale_shift.weight)

    # -- stages -----------------------------------------------------------

    def encode_prior(self, phase, day_of_year):
        return self.prior(phase, day_of_year)

    def encode_state(self, x, ctx):
        if tuple(x.shape[-2:]) != self.grid_shape:
            raise ShapeError(f"state grid {tuple(x.shape[-2:])} does not match {self.grid_shape}")
        return self.encoder(x, ctx.modulation)

    def fuse_temporal(self, latents):
        if len(latents) != self.cfg.n_inputs:
            raise ShapeError(f"expected {self.cfg.n_inputs} latents, got {len(latents)}")
        if len({tuple(z.shape) for z in latents}) != 1:
            raise ShapeError("latents have mismatched shapes")
        return self.fuse_norm(self.fuse(torch.cat(list(latents), dim=1)))

    def predict_latent(self, fused, ctx):
        if tuple(fused.shape[-2:]) != self.latent_shape:
            raise ShapeError(f"latent grid {tuple(fused.shape[-2:])} does not match {self.latent_shape}")
        x = fused.permute(0, 2, 3, 1)
        for blk in self.blocks:
            x = blk(x, ctx.pooled)
        return x.permute(0, 3, 1, 2)

    def decode_candidates(self, predicted, latents):
        """``latents[i]`` is the encoding of the state i steps before the newest one."""
        n = len(latents)
        if any(z.shape != predicted.shape for z in latents):
            raise ShapeError("temporal latents and predicted latent have mismatched shapes")
        B = predicted.shape[0]
        skips = torch.stack(list(latents), dim=1).flatten(0, 1)
        pred = predicted[:, None].expand(-1, n, -1, -1, -1).flatten(0, 1)
        out = self.decoder(pred, skips).view(B, n, self.n_channels, *self.grid_shape)
        return torch.where(self.ocean, out, torch.zeros((), dtype=out.dtype))

    def forward(self, inputs, phase, day_of_year):
        """inputs: (B, N, C, H, W) oldest first -> candidates (B, N, C, H, W)."""
        if inputs.ndim != 5 or inputs.shape[1] != self.cfg.n_inputs:
            raise ShapeError(f"inputs must be (B, {self.cfg.n_inputs}, C, H, W), got {tuple(inputs.shape)}")
        ctx = self.encode_prior(phase, day_of_year)
        N = inputs.shape[1]
        latents = [self.encode_state(inputs[:, N - 1 - i], ctx) for i in range(N)]
        fused = self.fuse_temporal(latents)
        predicted = self.predict_latent(fused, ctx)
        return self.decode_candidates(predicted, latents)


def encode_prior(signals, net):
    """Context features for a single :class:`~motcast.data.ContextSignals`."""
    lat = np.asarray(signals.lat)
    if lat.shape != net.grid_shape or np.asarray(signals.land).shape != net.grid_shape:
        raise ShapeError(f"context grid {lat.shape} does not match {net.grid_shape}")
    return net.encode_prior([signals.phase], [signals.day_of_year])
