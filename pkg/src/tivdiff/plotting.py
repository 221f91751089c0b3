"""Figures written next to CLI outputs.  Everything renders off-screen to PNG."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 100,
}

# PNG metadata would otherwise embed the matplotlib version
_META = {"Software": None}


def _plane(f):
    f = np.asarray(f)
    return f.reshape(f.shape[-2:]) if f.shape[0] == 1 else f.reshape(f.shape[:2])


def save(fig, path):
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def frame_strip(frames, path, title=None, first=None):
    """One row of grayscale frames; ``first`` (the conditioning frame) is drawn leftmost."""
    frames = [_plane(f) for f in frames]
    if first is not None:
        frames = [_plane(first)] + frames
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(frames), figsize=(1.1 * len(frames), 1.4), squeeze=False)
        for i, (ax, f) in enumerate(zip(axes[0], frames)):
            ax.imshow(f, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            ax.set_axis_off()
            ax.set_title(str(i if first is not None else i + 1))
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        save(fig, path)


def slot_panels(image, recon, masks, contents, path):
    """Input, reconstruction, then one masked decode per slot."""
    k = masks.shape[0]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, k + 2, figsize=(1.3 * (k + 2), 2.8), squeeze=False)
        axes[0, 0].imshow(_plane(image), cmap="gray", vmin=0, vmax=1)
        axes[0, 0].set_title("input")
        axes[0, 1].imshow(_plane(recon), cmap="gray", vmin=0, vmax=1)
        axes[0, 1].set_title("recon")
        for j in range(k):
            axes[0, j + 2].imshow(_plane(masks[j]) * _plane(contents[j]), cmap="gray", vmin=0, vmax=1)
            axes[0, j + 2].set_title(f"slot {j}")
            axes[1, j + 2].imshow(_plane(masks[j]), cmap="viridis", vmin=0, vmax=1)
            axes[1, j + 2].set_title(f"alpha {j}")
        for ax in axes.flat:
            ax.set_axis_off()
        fig.tight_layout()
        save(fig, path)


def loss_curve(losses, path, title="training loss"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.6))
        ax.plot(np.arange(len(losses)), losses, lw=0.8)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        fig.tight_layout()
        save(fig, path)


def per_frame_metrics(report, path):
    """Mean PSNR and SSIM by generated-frame index, averaged over videos."""
    fp = np.array([v["frame_psnr"] for v in report.videos])
    fs = np.array([v["frame_ssim"] for v in report.videos])
    idx = np.arange(1, fp.shape[1] + 1)
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(6, 2.4))
        a.plot(idx, fp.mean(axis=0), marker="o", ms=3)
        a.set_xlabel("frame")
        a.set_ylabel("PSNR (dB)")
        b.plot(idx, fs.mean(axis=0), marker="o", ms=3, color="C1")
        b.set_xlabel("frame")
        b.set_ylabel("SSIM")
        fig.tight_layout()
        save(fig, path)


def interp_grid(videos, first, path):
    """Rows of sampled frames, one per interpolation weight. ``videos`` maps omega -> frames."""
    omegas = sorted(videos)
    n = len(videos[omegas[0]]) + 1
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(omegas), n, figsize=(1.0 * n, 1.1 * len(omegas)), squeeze=False)
        for r, w in enumerate(omegas):
            for c, f in enumerate([first] + list(videos[w])):
                axes[r, c].imshow(_plane(f), cmap="gray", vmin=0, vmax=1)
                axes[r, c].set_axis_off()
            axes[r, 0].set_title(f"w={w:g}", loc="left")
        fig.tight_layout()
        save(fig, path)
