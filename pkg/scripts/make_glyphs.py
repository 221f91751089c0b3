"""Regenerate src/tivdiff/assets/glyphs.npy from the DejaVu font bundled with matplotlib.

Each glyph is rendered large, cropped to its ink, fitted into a 20x20 box and
centred by centre of mass inside a 28x28 canvas (the usual MNIST layout).
"""
from pathlib import Path

import numpy as np
from matplotlib import font_manager
from PIL import Image, ImageDraw, ImageFilter, ImageFont

OUT = Path(__file__).resolve().parents[1] / "src" / "tivdiff" / "assets" / "glyphs.npy"


def render(digit, font):
    canvas = Image.new("L", (160, 160), 0)
    ImageDraw.Draw(canvas).text((20, 0), str(digit), fill=255, font=font)
    canvas = canvas.crop(canvas.getbbox())
    w, h = canvas.size
    s = 20.0 / max(w, h)
    canvas = canvas.resize((max(1, round(w * s)), max(1, round(h * s))), Image.LANCZOS)
    canvas = canvas.filter(ImageFilter.GaussianBlur(0.4))
    a = np.asarray(canvas, dtype=np.float64)
    ys, xs = np.indices(a.shape)
    cy, cx = (ys * a).sum() / a.sum(), (xs * a).sum() / a.sum()
    out = np.zeros((28, 28))
    oy, ox = int(round(14 - cy)), int(round(14 - cx))
    out[oy:oy + a.shape[0], ox:ox + a.shape[1]] = a
    return np.clip(out, 0, 255).astype(np.uint8)


def main():
    path = font_manager.findfont(font_manager.FontProperties(family="DejaVu Sans", weight="bold"))
    font = ImageFont.truetype(path, 140)
    glyphs = np.stack([render(d, font) for d in range(10)])
    np.save(OUT, glyphs)
    print(f"wrote {OUT} {glyphs.shape}")


if __name__ == "__main__":
    main()
