"""Conditioning pathways into the denoiser.

* SPADE-style scale/offset modulation computed from the fused condition ``c``
* slot enhancement with caption cross-attention and projection to U-Net widths
* Gumbel-Softmax slot selection with a straight-through one-hot forward
* residual injection of the selected slot values
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import NumericalError, RejectedInput
from .text_image import CrossAttention, fuse_grid, resize_grid


def spade_modulate(feat, gamma, beta, scale=None):
    if gamma.shape != feat.shape or beta.shape != feat.shape:
        where = f" at scale {scale}" if scale is not None else ""
        raise RuntimeError(f"modulation shape mismatch{where}: feature {tuple(feat.shape)}, "
                           f"gamma {tuple(gamma.shape)}, beta {tuple(beta.shape)}")
    return (1 + gamma) * feat + beta


class SpadeHead(nn.Module):
    """Maps the fused condition to per-scale ``(gamma, beta)``.

    The token grid is projected to ``hidden`` channels with a 1x1 conv at its native
    4x4 size, resized bilinearly to the target resolution, then passed through two
    3x3 convs before the parallel gamma/beta heads.
    """

    def __init__(self, cond_dim, channels, hidden=64, grid=4):
        super().__init__()
        self.grid = grid
        self.reduce = nn.Conv2d(cond_dim, hidden, 1)
        self.shared = nn.Sequential(
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
        )
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, c, size):
        h = resize_grid(self.reduce(fuse_grid(c, self.grid)), size)
        h = self.shared(h)
        return self.gamma(h), self.beta(h)


class ODFM(nn.Module):
    """Residual caption cross-attention on the slots: ``M = slots + CA(Q(slots), K(e_S), V(e_S))``."""

    def __init__(self, slot_dim, text_dim, attn_dim=None):
        super().__init__()
        self.attn = CrossAttention(slot_dim, text_dim, attn_dim or slot_dim, slot_dim)

    def forward(self, slots, text, text_mask=None, return_weights=False):
        out, w = self.attn(slots, text, text_mask, return_weights=True)
        m = slots + out
        return (m, w) if return_weights else m


def odfm_enhance(odfm, slots, text, text_mask=None):
    return odfm(slots, text, text_mask)


class SlotProjection(nn.Module):
    """Shared projection to the U-Net width, then one channel-matching map per scale."""

    def __init__(self, slot_dim, unet_dim, scale_channels):
        super().__init__()
        self.shared = nn.Linear(slot_dim, unet_dim)
        self.per_scale = nn.ModuleList(nn.Linear(unet_dim, c) for c in scale_channels)

    def forward(self, m):
        mt = self.shared(m)
        return mt, [p(mt) for p in self.per_scale]


def sample_gumbel(shape, generator=None, dtype=torch.float32, device=None):
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    u = u.clamp(1e-12, 1 - 1e-12)
    return (-torch.log(-torch.log(u))).to(dtype=dtype, device=device)


def straight_through(soft):
    """Forward value one-hot at the row argmax (lowest index on ties); gradient of ``soft``."""
    index = soft.argmax(dim=-1, keepdim=True)
    hard = torch.zeros_like(soft).scatter_(-1, index, 1.0)
    # soft - sg(soft) is exactly zero, so the forward value is exactly one-hot
    return hard + (soft - soft.detach())


def gumbel_softmax(logits, generator=None, hard=True, tau=1.0, noise=True):
    if tau <= 0:
        raise RejectedInput(f"temperature must be positive, got {tau}")
    if noise:
        logits = logits + sample_gumbel(logits.shape, generator, logits.dtype, logits.device)
    soft = (logits / tau).softmax(dim=-1)
    return straight_through(soft) if hard else soft


def slot_logits(feat_flat, slots_m, w_q, w_k):
    """``W_q F_i . W_k M_j`` for every location i and slot j; no 1/sqrt(d) scaling."""
    return torch.einsum("bnd,bkd->bnk", w_q(feat_flat), w_k(slots_m))


def gumbel_slot_attention(feat_flat, slots_m, w_q, w_k, generator=None, hard=True, tau=1.0, noise=True):
    return gumbel_softmax(slot_logits(feat_flat, slots_m, w_q, w_k), generator, hard, tau, noise)


def inject_slots(feat, weights, values):
    """``F + sum_j A_ij V_j / sum_j A_ij`` with ``feat`` (B, C, H, W), ``weights`` (B, HW, K+1)."""
    b, c, h, w = feat.shape
    den = weights.sum(dim=-1, keepdim=True)
    if bool((den.abs() < 1e-12).any()):
        raise NumericalError("slot injection weights sum to zero at some location")
    added = torch.einsum("bnk,bkc->bnc", weights, values) / den
    return feat + added.transpose(1, 2).reshape(b, c, h, w)


class SlotInjection(nn.Module):
    def __init__(self, channels, slot_channels, key_dim=64):
        super().__init__()
        self.w_q = nn.Linear(channels, key_dim, bias=False)
        self.w_k = nn.Linear(slot_channels, key_dim, bias=False)
        self.w_v = nn.Linear(slot_channels, channels, bias=False)

    def forward(self, feat, slots_m, generator=None, hard=True, tau=1.0, return_weights=False):
        flat = feat.flatten(2).transpose(1, 2)
        weights = gumbel_slot_attention(flat, slots_m, self.w_q, self.w_k, generator, hard, tau,
                                        noise=self.training)
        out = inject_slots(feat, weights, self.w_v(slots_m))
        return (out, weights) if return_weights else out


def interp_scale(gamma1, gamma2, omega):
    if not 0.0 <= float(omega) <= 1.0:
        raise RejectedInput(f"omega must lie in [0, 1], got {omega}")
    if float(omega) == 0.0:
        return gamma1
    if float(omega) == 1.0:
        return gamma2
    return gamma1 + omega * (gamma2 - gamma1)
