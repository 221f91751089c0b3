"""Slot Attention autoencoder used to extract object-centric slots from the first frame."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import DivergenceError, NumericalError, RejectedInput


@dataclass
class SlotConfig:
    num_slots: int = 3
    slot_dim: int = 512
    attn_dim: int | None = None
    iters: int = 3
    mlp_hidden: int = 1024
    cnn_channels: int = 64
    cnn_layers: int = 4
    cnn_kernel: int = 5
    feature_stride: int = 1
    dec_channels: int = 64
    dec_init: int = 8
    image_size: int = 64
    eps: float = 1e-8
    init_seed: int = 0

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self):
        return asdict(self)


def position_grid(h, w, device=None, dtype=None):
    """(h, w, 4) grid of [y, x, 1-y, 1-x] in [0, 1]."""
    ys = torch.linspace(0.0, 1.0, h, device=device, dtype=dtype)
    xs = torch.linspace(0.0, 1.0, w, device=device, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gy, gx, 1 - gy, 1 - gx], dim=-1)


class PositionEmbed(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.proj = nn.Linear(4, channels)

    def forward(self, x):
        # x: (B, C, H, W)
        grid = position_grid(x.shape[-2], x.shape[-1], x.device, x.dtype)
        return x + self.proj(grid).permute(2, 0, 1)[None]


class SlotAttention(nn.Module):
    def __init__(self, num_slots, slot_dim, input_dim, attn_dim=None, iters=3, mlp_hidden=None, eps=1e-8,
                 init_seed=0):
        super().__init__()
        attn_dim = attn_dim or slot_dim
        self.num_slots = num_slots
        self.iters = iters
        self.eps = eps
        self.init_seed = init_seed
        self.scale = 1.0 / math.sqrt(attn_dim)

        self.mu = nn.Parameter(torch.randn(slot_dim) * slot_dim ** -0.5)
        self.log_sigma = nn.Parameter(torch.full((slot_dim,), math.log(slot_dim ** -0.5)))

        self.norm_inputs = nn.LayerNorm(input_dim)
        self.norm_slots = nn.LayerNorm(slot_dim)
        self.norm_mlp = nn.LayerNorm(slot_dim)
        self.k = nn.Linear(input_dim, attn_dim, bias=False)
        self.q = nn.Linear(slot_dim, attn_dim, bias=False)
        self.v = nn.Linear(input_dim, slot_dim, bias=False)
        self.gru = nn.GRUCell(slot_dim, slot_dim)
        hidden = mlp_hidden or 2 * slot_dim
        self.mlp = nn.Sequential(nn.Linear(slot_dim, hidden), nn.ReLU(), nn.Linear(hidden, slot_dim))

    def init_slots(self, batch, generator=None, deterministic=False):
        """Gaussian slot initialisation.

        ``deterministic`` draws the noise from a generator seeded with ``init_seed``, so the
        same slots come out every call while the rows stay distinct.  Starting every row at
        ``mu`` would make them identical and they could never separate.
        """
        shape = (batch, self.num_slots, self.mu.shape[0])
        if deterministic:
            generator = torch.Generator().manual_seed(self.init_seed)
        noise = torch.randn(shape, generator=generator, dtype=torch.float32).to(self.mu)
        return self.mu + self.log_sigma.exp() * noise

    def attention(self, slots, k):
        """Attention (B, N_inputs, K+1), normalised over the slot axis."""
        q = self.q(self.norm_slots(slots))
        logits = torch.einsum("bnd,bkd->bnk", k, q) * self.scale
        return logits.softmax(dim=-1)

    def step(self, slots, inputs, iteration=0):
        inputs = self.norm_inputs(inputs)
        return self._step(slots, self.k(inputs), self.v(inputs), iteration)[0]

    def _step(self, slots, k, v, iteration):
        attn = self.attention(slots, k)
        w = attn + self.eps
        w = w / w.sum(dim=1, keepdim=True)
        updates = torch.einsum("bnk,bnd->bkd", w, v)
        b, n_slots, d = slots.shape
        slots = self.gru(updates.reshape(-1, d), slots.reshape(-1, d)).reshape(b, n_slots, d)
        slots = slots + self.mlp(self.norm_mlp(slots))
        if not torch.isfinite(slots).all():
            raise NumericalError(f"non-finite slots at iteration {iteration}")
        return slots, attn

    def forward(self, inputs, slots=None, generator=None, deterministic=False):
        if slots is None:
            slots = self.init_slots(inputs.shape[0], generator, deterministic)
        inputs = self.norm_inputs(inputs)
        k, v = self.k(inputs), self.v(inputs)
        attn = None
        for i in range(self.iters):
            slots, attn = self._step(slots, k, v, i)
        return slots, attn


class SlotEncoder(nn.Module):
    """CNN feature extractor followed by Slot Attention."""

    def __init__(self, cfg: SlotConfig):
        super().__init__()
        self.cfg = cfg
        c, k = cfg.cnn_channels, cfg.cnn_kernel
        layers = []
        for i in range(cfg.cnn_layers):
            stride = cfg.feature_stride if i == 0 else 1
            layers += [nn.Conv2d(1 if i == 0 else c, c, k, stride=stride, padding=k // 2), nn.ReLU()]
        self.cnn = nn.Sequential(*layers)
        self.pos = PositionEmbed(c)
        self.norm = nn.LayerNorm(c)
        self.mlp = nn.Sequential(nn.Linear(c, c), nn.ReLU(), nn.Linear(c, c))
        self.slot_attention = SlotAttention(cfg.num_slots, cfg.slot_dim, c, cfg.attn_dim, cfg.iters,
                                            cfg.mlp_hidden, cfg.eps, cfg.init_seed)

    def features(self, x):
        if x.dim() != 4 or x.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise RejectedInput(f"expected (B, 1, {self.cfg.image_size}, {self.cfg.image_size}) frames, "
                                f"got {tuple(x.shape)}")
        h = self.pos(self.cnn(x))
        h = h.flatten(2).transpose(1, 2)
        return self.mlp(self.norm(h))

    def forward(self, x, generator=None, deterministic=True):
        slots, _ = self.slot_attention(self.features(x), generator=generator, deterministic=deterministic)
        return slots


class SpatialBroadcastDecoder(nn.Module):
    def __init__(self, cfg: SlotConfig):
        super().__init__()
        self.init = cfg.dec_init
        c = cfg.dec_channels
        n_up = int(round(math.log2(cfg.image_size // cfg.dec_init)))
        if cfg.dec_init * 2 ** n_up != cfg.image_size:
            raise RejectedInput("image size must be dec_init times a power of two")
        self.pos = PositionEmbed(cfg.slot_dim)
        layers = []
        in_c = cfg.slot_dim
        for _ in range(n_up):
            layers += [nn.ConvTranspose2d(in_c, c, 4, stride=2, padding=1), nn.ReLU()]
            in_c = c
        layers += [nn.ConvTranspose2d(c, 2, 3, stride=1, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, slots):
        """Return ``(recon, masks, contents)``; masks are (B, K+1, 1, H, W) and sum to one per pixel.

        Contents are linear.  The composite is clipped to [0, 1] in the forward pass with an
        identity gradient; a sigmoid on the contents saturates early on these mostly black
        frames and stops learning.
        """
        b, k, d = slots.shape
        x = slots.reshape(b * k, d, 1, 1).expand(-1, -1, self.init, self.init)
        out = self.net(self.pos(x))
        out = out.reshape(b, k, 2, *out.shape[-2:])
        contents = out[:, :, :1]
        masks = out[:, :, 1:].softmax(dim=1)
        raw = (masks * contents).sum(dim=1)
        recon = raw + (raw.clamp(0.0, 1.0) - raw).detach()
        return recon, masks, contents


class SlotAutoencoder(nn.Module):
    def __init__(self, cfg: SlotConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SlotEncoder(cfg)
        self.decoder = SpatialBroadcastDecoder(cfg)

    def forward(self, x, generator=None, deterministic=False):
        slots = self.encoder(x, generator=generator, deterministic=deterministic)
        recon, masks, _ = self.decoder(slots)
        return recon, masks, slots

    def freeze_encoder(self):
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.encoder.eval()
        return self.encoder


def extract_slots(encoder, x0, generator=None, deterministic=True):
    with torch.no_grad():
        return encoder(x0, generator=generator, deterministic=deterministic)


def decode_slots(decoder, slots):
    return decoder(slots)


def parameter_hash(module):
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def pretrain_slot_autoencoder(frames, steps, lr=4e-4, cfg=None, batch_size=16, seed=0, warmup=None,
                              log=None, log_every=50, model=None):
    """Fit the autoencoder on ``frames`` ((N, 1, H, W) in [0, 1]) by pixel MSE.

    Returns ``(model, losses)``.  Batches are drawn with a generator seeded by ``seed``.
    """
    cfg = cfg or SlotConfig()
    torch.manual_seed(seed)
    model = model or SlotAutoencoder(cfg)
    model.train()
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    warmup = max(1, steps // 20) if warmup is None else max(1, warmup)

    def lr_at(step):
        w = min(1.0, (step + 1) / warmup)
        return w * 0.5 * (1 + math.cos(math.pi * step / max(1, steps)))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    losses = []
    n = frames.shape[0]
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        x = frames[idx]
        recon, _, _ = model(x, generator=gen)
        loss = F.mse_loss(recon, x)
        if not torch.isfinite(loss):
            raise DivergenceError(f"slot pretraining diverged at step {step}: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        losses.append(loss.item())
        if log is not None and (step % log_every == 0 or step == steps - 1):
            log({"event": "train_slots", "step": step, "loss": losses[-1], "lr": sched.get_last_lr()[0]})
    model.eval()
    return model, losses


def reconstruction_mse(model, frames, batch_size=64, deterministic=True):
    total = 0.0
    with torch.no_grad():
        for i in range(0, frames.shape[0], batch_size):
            x = frames[i:i + batch_size]
            recon, _, _ = model(x, deterministic=deterministic)
            total += F.mse_loss(recon, x, reduction="sum").item()
    return total / frames.numel()
