"""The autoregressive text-image-to-video diffusion model."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .conditioning import ODFM, SlotProjection, SpadeHead
from .diffusion import diffuse, make_schedule, respace, reverse_step
from .errors import DivergenceError, RejectedInput
from .slots import SlotConfig, SlotEncoder
from .text_image import ConditionEncoder, FusedCondition, Vocabulary
from .unet import Denoiser, DenoiserConfig, TemporalModule

CONDITIONING_SCHEMES = ("spade", "cross_attention")


@dataclass
class ModelConfig:
    d: int = 512
    text_depth: int = 2
    heads: int = 4
    ff: int = 1024
    max_len: int = 32
    patch: int = 16
    unet_slot_dim: int = 256
    T: int = 1600
    schedule: str = "linear"
    conditioning: str = "spade"
    unet: DenoiserConfig = field(default_factory=DenoiserConfig)
    slots: SlotConfig = field(default_factory=SlotConfig)

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_SCHEMES:
            raise RejectedInput(f"unknown conditioning scheme {self.conditioning!r}")
        if self.conditioning == "cross_attention":
            raise RejectedInput("the cross-attention conditioning variant is not implemented; use 'spade'")
        if isinstance(self.unet, dict):
            self.unet = DenoiserConfig.from_dict(self.unet)
        if isinstance(self.slots, dict):
            self.slots = SlotConfig.from_dict(self.slots)
        self.unet.cond_dim = self.d

    def to_dict(self):
        d = asdict(self)
        d["unet"] = self.unet.to_dict()
        d["slots"] = self.slots.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Conditioning:
    """Everything derived once per video from the first frame, caption and speed."""
    fused: FusedCondition
    slots: torch.Tensor
    enhanced: torch.Tensor
    slot_scales: list
    modulation: list
    context: torch.Tensor

    def repeat(self, n):
        def rep(x):
            return x.repeat_interleave(n, dim=0)
        return Conditioning(
            fused=FusedCondition(rep(self.fused.c), rep(self.fused.v), rep(self.fused.text), rep(self.fused.text_mask)),
            slots=rep(self.slots),
            enhanced=rep(self.enhanced),
            slot_scales=[rep(s) for s in self.slot_scales],
            modulation=[(rep(g), rep(b)) for g, b in self.modulation],
            context=rep(self.context),
        )


def to_signal(frames):
    return frames * 2.0 - 1.0


def to_frames(x):
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


class TIVDiffusion(nn.Module):
    def __init__(self, cfg: ModelConfig, slot_encoder: SlotEncoder | None = None):
        super().__init__()
        self.cfg = cfg
        self.vocab = Vocabulary.default()
        u = cfg.unet
        self.cond_encoder = ConditionEncoder(len(self.vocab), cfg.d, cfg.text_depth, cfg.heads, cfg.ff,
                                             u.image_size, cfg.patch, cfg.max_len)
        self.slot_encoder = slot_encoder if slot_encoder is not None else SlotEncoder(cfg.slots)
        self.slot_encoder.requires_grad_(False)
        self.odfm = ODFM(cfg.slots.slot_dim, cfg.d)
        self.slot_proj = SlotProjection(cfg.slots.slot_dim, cfg.unet_slot_dim, u.channels)
        self.denoiser = Denoiser(u)
        grid = u.image_size // cfg.patch
        self.spade = nn.ModuleList(SpadeHead(cfg.d, c, u.spade_hidden, grid)
                                   for c, _ in self.denoiser.modulation_shapes())
        self.temporal = TemporalModule(u)
        self.schedule = make_schedule(cfg.T, cfg.schedule)

    def train(self, mode=True):
        super().train(mode)
        self.slot_encoder.eval()
        return self

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def modulation(self, c):
        return [head(c, res) for head, (_, res) in zip(self.spade, self.denoiser.modulation_shapes())]

    def condition(self, frame0, captions, eta):
        if isinstance(captions, str):
            captions = [captions]
        dev = frame0.device
        ids, mask = self.vocab.batch(captions, dev)
        fused = self.cond_encoder(frame0, ids, mask, eta)
        with torch.no_grad():
            slots = self.slot_encoder(frame0.to(next(self.slot_encoder.parameters()).dtype), deterministic=True)
        slots = slots.to(fused.c.dtype)
        enhanced = self.odfm(slots, fused.text, mask)
        _, scales = self.slot_proj(enhanced)
        context = torch.cat([fused.c, fused.v], dim=1)
        return Conditioning(fused, slots, enhanced, scales, self.modulation(fused.c), context)

    def predict_x0(self, x_t, t, cond, temporal_feats, generator=None):
        return self.denoiser(x_t, t, cond.modulation, cond.context, cond.slot_scales, temporal_feats, generator)

    def teacher_forced_features(self, frames):
        """Temporal features for targets 1..N-1 from ground-truth frames ``(B, N, 1, H, W)``.

        Returned per scale as ``(B * (N-1), C, h, w)``, video-major.
        """
        b, n = frames.shape[:2]
        state = self.temporal.reset(b, like=frames)
        per_step = []
        for k in range(n - 1):
            state = self.temporal.update(state, frames[:, k])
            per_step.append(self.temporal.features(state))
        n_scales = len(per_step[0])
        return [torch.stack([s[i] for s in per_step], dim=1).flatten(0, 1) for i in range(n_scales)]

    def loss(self, frames, captions, eta, generator=None, t=None, predictor=None):
        """Sum over target frames of the per-frame mean squared x0 error, averaged over videos.

        ``frames`` is (B, N, 1, H, W) in [0, 1] with frame 0 the conditioning image.  A single
        timestep is shared by all frames of a video; noise is drawn per frame.
        """
        b, n = frames.shape[:2]
        sched = self.schedule
        if t is None:
            t = torch.randint(1, sched.T + 1, (b,), generator=generator)
        t = torch.as_tensor(t).reshape(-1).expand(b)
        targets = to_signal(frames[:, 1:]).flatten(0, 1)
        t_rep = t.repeat_interleave(n - 1)
        eps = torch.randn(targets.shape, generator=generator, dtype=torch.float32).to(targets)
        x_t = diffuse(targets, t_rep.numpy(), eps, sched)
        if predictor is None:
            cond = self.condition(frames[:, 0], captions, eta).repeat(n - 1)
            feats = self.teacher_forced_features(frames)
            pred = self.predict_x0(x_t, t_rep, cond, feats, generator)
        else:
            pred = predictor(x_t, t_rep)
        per_frame = ((pred - targets) ** 2).flatten(1).mean(dim=1).reshape(b, n - 1)
        return per_frame.sum(dim=1).mean()


def batch_from_samples(samples, device=None):
    frames = torch.from_numpy(np.stack([s.frames for s in samples])).permute(0, 1, 4, 2, 3).contiguous()
    return frames.to(device), [s.caption for s in samples], torch.tensor([s.speed for s in samples])


def make_optimizer(model, lr, steps, warmup=0):
    opt = torch.optim.Adam(model.trainable_parameters(), lr=lr)

    def factor(step):
        w = min(1.0, (step + 1) / warmup) if warmup else 1.0
        return w * 0.5 * (1 + math.cos(math.pi * min(step, steps) / max(1, steps)))

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, factor)


def train_step(model, opt, batch, generator=None, clip=1.0):
    frames, captions, eta = batch
    model.train()
    loss = model.loss(frames, captions, eta, generator)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite diffusion loss {loss.item()}")
    opt.zero_grad()
    loss.backward()
    if clip:
        nn.utils.clip_grad_norm_(model.trainable_parameters(), clip)
    opt.step()
    return loss.item()


def train_diffusion(model, samples, steps, lr=5e-5, batch_size=4, seed=0, warmup=0, log=None, log_every=25):
    gen = torch.Generator().manual_seed(seed)
    opt, sched = make_optimizer(model, lr, steps, warmup)
    losses = []
    n = len(samples)
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen).tolist()
        batch = batch_from_samples([samples[i] for i in idx])
        losses.append(train_step(model, opt, batch, gen))
        sched.step()
        if log is not None and (step % log_every == 0 or step == steps - 1):
            log({"event": "train", "step": step, "loss": losses[-1], "lr": sched.get_last_lr()[0]})
    model.eval()
    return losses


@torch.no_grad()
def sample_frame(model, cond, temporal_feats, n_steps, generator=None, shape=None):
    sched = respace(model.schedule, n_steps)
    x = torch.randn(shape, generator=generator, dtype=torch.float32).to(cond.context)
    for i in reversed(range(sched.T)):
        t_model = torch.full((shape[0],), int(sched.timesteps[i]))
        x0_hat = model.predict_x0(x, t_model, cond, temporal_feats).clamp(-1.0, 1.0)
        noise = None
        if i > 0:
            noise = torch.randn(shape, generator=generator, dtype=torch.float32).to(x)
        x = reverse_step(x, x0_hat, i + 1, sched, noise)
    return to_frames(x)


@torch.no_grad()
def sample_video(model, frame0, captions, eta, n_steps=250, generator=None, n_frames=9, cond=None,
                 teacher_frames=None, trace=None):
    """Generate ``n_frames`` frames after ``frame0`` ((B, 1, H, W) in [0, 1]).

    Each frame is denoised from fresh Gaussian noise, then fed to the temporal
    module before the next one.  ``teacher_frames`` (B, n_frames, 1, H, W) replaces the
    generated frames in that feedback; ``trace`` (a list) collects the temporal features.
    """
    if frame0.dim() != 4 or frame0.shape[1] != 1:
        raise RejectedInput(f"expected (B, 1, H, W) first frames, got {tuple(frame0.shape)}")
    if getattr(model, "trained_steps", None) == 0:
        warnings.warn("sampling from an untrained checkpoint", RuntimeWarning, stacklevel=2)
    model.eval()
    if cond is None:
        cond = model.condition(frame0, captions, eta)
    b = frame0.shape[0]
    state = model.temporal.reset(b, like=frame0)
    prev = frame0
    out = []
    for n in range(n_frames):
        state = model.temporal.update(state, prev)
        feats = model.temporal.features(state)
        if trace is not None:
            trace.append(feats)
        frame = sample_frame(model, cond, feats, n_steps, generator, tuple(frame0.shape))
        out.append(frame)
        prev = teacher_frames[:, n] if teacher_frames is not None else frame
    return torch.stack(out, dim=1)


@torch.no_grad()
def interpolated_condition(model, frame0, caption_a, caption_b, eta, omega):
    """Condition from ``caption_a`` with its modulation scale blended toward ``caption_b``'s.

    Only the scale is interpolated; the offset and every other pathway come from ``caption_a``.
    """
    from .conditioning import interp_scale

    cond_a = model.condition(frame0, [caption_a] * frame0.shape[0], eta)
    cond_b = model.condition(frame0, [caption_b] * frame0.shape[0], eta)
    cond_a.modulation = [(interp_scale(ga, gb, omega), ba)
                         for (ga, ba), (gb, _) in zip(cond_a.modulation, cond_b.modulation)]
    return cond_a
