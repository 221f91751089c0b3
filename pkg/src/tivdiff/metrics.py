"""Full-reference frame metrics and the video evaluation harness.

Scores are computed on the nine generated frames only; the conditioning frame
(index 0 of every ground-truth video) never enters a mean.  Each video's score
is the mean of its per-frame values and dataset scores are means over videos.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import correlate2d

from .errors import RejectedInput

PSNR_CAP = 100.0
REPORT_VERSION = 1


def psnr(a, b, max_val=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise RejectedInput(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(max_val ** 2 / mse)))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _as_plane(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and 1 in (x.shape[0], x.shape[-1]):
        x = x.reshape(x.shape[1:] if x.shape[0] == 1 else x.shape[:-1])
    if x.ndim != 2:
        raise RejectedInput(f"ssim expects a single-channel frame, got shape {x.shape}")
    return x


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, max_val=1.0):
    """Mean SSIM over all fully-contained Gaussian windows (no padding)."""
    a, b = _as_plane(a), _as_plane(b)
    if a.shape != b.shape:
        raise RejectedInput(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise RejectedInput(f"frame {a.shape} is smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2

    def filt(x):
        return correlate2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a ** 2
    s_bb = filt(b * b) - mu_b ** 2
    s_ab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


@dataclass
class VideoScore:
    id: str
    psnr: float
    ssim: float
    frame_psnr: list
    frame_ssim: list


@dataclass
class MetricReport:
    videos: list
    mean_psnr: float
    mean_ssim: float
    count: int
    config_hash: str | None = None
    sampler: dict = field(default_factory=dict)
    report_version: int = REPORT_VERSION

    def to_json(self):
        d = asdict(self)
        return json.dumps(d, indent=1, sort_keys=True)


def score_video(generated, ground_truth, vid=""):
    """Score generated frames (N-1, H, W[, 1]) against ground truth frames 1..N-1.

    ``ground_truth`` holds all N frames including the conditioning frame, which is dropped here.
    """
    generated = np.asarray(generated)
    ground_truth = np.asarray(ground_truth)
    if ground_truth.shape[0] < 2:
        raise RejectedInput("ground truth needs the conditioning frame and at least one target")
    targets = ground_truth[1:]
    if generated.shape != targets.shape:
        raise RejectedInput(f"generated frames {generated.shape} do not match targets {targets.shape}")
    fp = [psnr(g, r) for g, r in zip(generated, targets)]
    fs = [ssim(g, r) for g, r in zip(generated, targets)]
    return VideoScore(vid, float(np.mean(fp)), float(np.mean(fs)), fp, fs)


def aggregate(scores, config_hash=None, sampler=None):
    scores = list(scores)
    if not scores:
        raise RejectedInput("no videos to aggregate")
    return MetricReport(
        videos=[asdict(s) for s in scores],
        mean_psnr=float(np.mean([s.psnr for s in scores])),
        mean_ssim=float(np.mean([s.ssim for s in scores])),
        count=len(scores),
        config_hash=config_hash,
        sampler=dict(sampler or {}),
    )


def evaluate_predictions(generated, samples, config_hash=None, sampler=None):
    """``generated`` maps each sample (by position) to its (N-1, H, W, 1) frames."""
    if len(generated) != len(samples):
        raise RejectedInput(f"{len(generated)} generated videos for {len(samples)} samples")
    scores = []
    for i, (g, s) in enumerate(zip(generated, samples)):
        if s.frames is None:
            raise RejectedInput(f"sample {i} has no ground-truth frames")
        scores.append(score_video(g, s.frames, f"{i:06d}"))
    return aggregate(scores, config_hash, sampler)


def evaluate(model, samples, n_steps=250, seed=0, config_hash=None, batch_size=1):
    """Generate nine frames per sample from (first frame, caption, speed) and score them."""
    import torch

    from .model import batch_from_samples, sample_video

    if not samples:
        raise RejectedInput("empty test set")
    gen = torch.Generator().manual_seed(seed)
    generated = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        frames, captions, eta = batch_from_samples(chunk)
        out = sample_video(model, frames[:, 0], captions, eta, n_steps, gen, n_frames=frames.shape[1] - 1)
        generated.extend(out.permute(0, 1, 3, 4, 2).numpy())
    return evaluate_predictions(generated, samples, config_hash, {"steps": n_steps, "seed": seed})
