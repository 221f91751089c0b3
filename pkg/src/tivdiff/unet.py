"""Conditional U-Net denoiser and the ConvGRU temporal context module.

Down path: one residual block per resolution whose first normalisation is
modulated by ``(gamma, beta)`` from the fused condition; the modulated output is
concatenated with the temporal feature map of the same resolution and merged by
a 1x1 conv.  Bottleneck: residual block, self-attention, cross-attention onto the
condition tokens plus the speed token, residual block.  Up path: one residual
block per resolution followed by Gumbel slot injection.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .conditioning import SlotInjection, spade_modulate
from .errors import RejectedInput
from .text_image import CrossAttention


@dataclass
class DenoiserConfig:
    image_size: int = 64
    base_width: int = 64
    channel_mult: tuple = (1, 2, 4, 8)
    temporal_channels: int = 32
    spade_hidden: int = 64
    cond_dim: int = 512
    slot_key_dim: int = 64
    groups: int = 8
    hard_slots: bool = True
    tau: float = 1.0

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        deepest = self.image_size // 2 ** (len(self.channel_mult) - 1)
        if deepest < 4:
            raise RejectedInput(f"deepest resolution {deepest} < 4; use fewer scales")

    @property
    def channels(self):
        return [self.base_width * m for m in self.channel_mult]

    @property
    def resolutions(self):
        return [self.image_size // 2 ** i for i in range(len(self.channel_mult))]

    def to_dict(self):
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = torch.as_tensor(t, dtype=torch.float64).reshape(-1, 1) * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(c, groups, affine=True):
    return nn.GroupNorm(math.gcd(groups, c), c, affine=affine)


class ResBlock(nn.Module):
    def __init__(self, in_c, out_c, time_dim, groups, modulated=False):
        super().__init__()
        self.modulated = modulated
        self.norm1 = _norm(in_c, groups, affine=not modulated)
        self.conv1 = nn.Conv2d(in_c, out_c, 3, padding=1)
        self.time = nn.Linear(time_dim, out_c)
        self.norm2 = _norm(out_c, groups)
        self.conv2 = nn.Conv2d(out_c, out_c, 3, padding=1)
        self.skip = nn.Conv2d(in_c, out_c, 1) if in_c != out_c else nn.Identity()

    def forward(self, x, temb, modulation=None, scale=None):
        h = self.norm1(x)
        if self.modulated:
            if modulation is None:
                raise RejectedInput(f"modulated block at scale {scale} needs (gamma, beta)")
            gamma, beta = modulation
            h = spade_modulate(h, gamma.expand_as(h), beta.expand_as(h), scale)
        h = self.conv1(F.silu(h))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention2d(nn.Module):
    def __init__(self, c, groups, heads=4):
        super().__init__()
        self.norm = _norm(c, groups)
        self.attn = nn.MultiheadAttention(c, heads, batch_first=True)

    def forward(self, x):
        b, c, h, w = x.shape
        s = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(s, s, s, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ContextAttention2d(nn.Module):
    """Feature map queries attending to a token context (condition tokens and speed)."""

    def __init__(self, c, context_dim, groups):
        super().__init__()
        self.norm = _norm(c, groups)
        self.attn = CrossAttention(c, context_dim, c, c)
        self.out = nn.Linear(c, c)

    def forward(self, x, context):
        b, c, h, w = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)
        out = self.out(self.attn(q, context))
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ConvGRUCell(nn.Module):
    def __init__(self, in_c, hidden_c, kernel=3):
        super().__init__()
        self.hidden_c = hidden_c
        self.gates = nn.Conv2d(in_c + hidden_c, 2 * hidden_c, kernel, padding=kernel // 2)
        self.cand = nn.Conv2d(in_c + hidden_c, hidden_c, kernel, padding=kernel // 2)

    def forward(self, x, h):
        z, r = torch.sigmoid(self.gates(torch.cat([x, h], dim=1))).chunk(2, dim=1)
        cand = torch.tanh(self.cand(torch.cat([x, r * h], dim=1)))
        return (1 - z) * h + z * cand


@dataclass
class TemporalState:
    """ConvGRU hidden map after ``frames_seen`` frames; the reset state is all zeros."""
    hidden: torch.Tensor
    frames_seen: int = 0
    history: list = field(default_factory=list, repr=False)


class TemporalModule(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        tc = cfg.temporal_channels
        self.cfg = cfg
        self.stem = nn.Sequential(nn.Conv2d(1, tc, 3, padding=1), nn.SiLU(), nn.Conv2d(tc, tc, 3, padding=1))
        self.cell = ConvGRUCell(tc, tc)
        self.down = nn.ModuleList(nn.Conv2d(tc, tc, 3, stride=2, padding=1) for _ in cfg.channel_mult[1:])

    def reset(self, batch, like=None):
        ref = like if like is not None else self.cell.cand.weight
        s = self.cfg.image_size
        return TemporalState(torch.zeros(batch, self.cfg.temporal_channels, s, s, dtype=ref.dtype, device=ref.device))

    def update(self, state, frame):
        """Advance the recurrence by one frame ((B, 1, H, W) in [0, 1])."""
        if frame.shape[-2:] != state.hidden.shape[-2:]:
            raise RejectedInput(f"frame {tuple(frame.shape)} does not match temporal state resolution")
        h = self.cell(self.stem(frame), state.hidden)
        return TemporalState(h, state.frames_seen + 1)

    def features(self, state):
        feats = [state.hidden]
        for conv in self.down:
            feats.append(F.silu(conv(feats[-1])))
        return feats


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels
        g = cfg.groups
        tc = cfg.temporal_channels
        time_dim = cfg.base_width * 4
        self.time_mlp = nn.Sequential(nn.Linear(cfg.base_width, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.in_conv = nn.Conv2d(1, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.merge = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chans[0]
        for i, c in enumerate(chans):
            self.down_blocks.append(ResBlock(prev, c, time_dim, g, modulated=True))
            self.merge.append(nn.Conv2d(c + tc, c, 1))
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            prev = c

        mid = chans[-1]
        self.mid1 = ResBlock(mid, mid, time_dim, g)
        self.mid_attn = SelfAttention2d(mid, g)
        self.mid_ctx = ContextAttention2d(mid, cfg.cond_dim, g)
        self.mid2 = ResBlock(mid, mid, time_dim, g)

        self.up_blocks = nn.ModuleList()
        self.inject = nn.ModuleList()
        self.upsample = nn.ModuleList()
        prev = mid
        for i in reversed(range(len(chans))):
            c = chans[i]
            self.up_blocks.append(ResBlock(prev + c, c, time_dim, g))
            self.inject.append(SlotInjection(c, c, cfg.slot_key_dim))
            if i > 0:
                self.upsample.append(nn.Conv2d(c, chans[i - 1], 3, padding=1))
                prev = chans[i - 1]
        self.out_norm = _norm(chans[0], g)
        self.out_conv = nn.Conv2d(chans[0], 1, 3, padding=1)

    def modulation_shapes(self):
        """(channels, resolution) expected by each down-path modulation site."""
        chans, res = self.cfg.channels, self.cfg.resolutions
        return [(chans[max(i - 1, 0)], r) for i, r in enumerate(res)]

    def forward(self, x, t, modulation, context, slots, temporal, generator=None):
        """Predict the clean frame.

        ``modulation``: per-scale ``(gamma, beta)``; ``context``: (B, tokens, d) tokens for
        the bottleneck cross-attention; ``slots``: per-scale (B, K+1, C_m) slot values, listed
        from the highest resolution down; ``temporal``: per-scale temporal feature maps.
        """
        n = len(self.cfg.channels)
        if temporal is None or len(temporal) != n:
            raise RejectedInput("denoiser needs a temporal feature map for every scale")
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base_width).to(x.dtype).expand(x.shape[0], -1))
        h = self.in_conv(x)
        skips = []
        for i in range(n):
            h = self.down_blocks[i](h, temb, modulation[i], scale=i)
            h = self.merge[i](torch.cat([h, temporal[i]], dim=1))
            skips.append(h)
            if i < n - 1:
                h = self.downsample[i](h)
        h = self.mid1(h, temb)
        h = self.mid_attn(h)
        h = self.mid_ctx(h, context)
        h = self.mid2(h, temb)
        for j, i in enumerate(reversed(range(n))):
            h = self.up_blocks[j](torch.cat([h, skips[i]], dim=1), temb)
            h = self.inject[j](h, slots[i], generator, self.cfg.hard_slots, self.cfg.tau)
            if i > 0:
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out_conv(F.silu(self.out_norm(h)))
