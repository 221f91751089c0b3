"""Synthetic Moving-MNIST variants with uniform per-frame motion.

Three variants are produced:

* ``single``   -- one digit bouncing around the canvas
* ``double``   -- two digits, independent directions, bouncing
* ``modified`` -- two digits that each stop or bounce exactly once at a
  boundary, plus one static distractor digit

Motion is axis-aligned and integer-pixel.  A speed ``eta`` in (0, 1) maps to a
per-frame displacement of ``1 + round(eta * (V_MAX - 1))`` pixels.

On disk a dataset is a directory with ``manifest.json`` and, per sample,
``samples/{id}.f32`` (8-byte header of four little-endian uint16 dims followed
by raw little-endian float32 frames) and ``samples/{id}.json``.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION
from .errors import ChecksumError, DatasetError, MissingFileError, RejectedInput, VersionMismatchError

CANVAS = 64
GLYPH = 28
POS_MAX = CANVAS - GLYPH
N_FRAMES = 10
V_MAX = 6

VARIANTS = ("single", "double", "modified")
DIRECTIONS = ("left_to_right", "right_to_left", "top_to_bottom", "bottom_to_top")
BOUNDARY_RULES = ("wrap_none", "bounce_repeat", "bounce_once", "stop")

# (axis, sign); axis 0 is x (columns), axis 1 is y (rows)
_DIR_VECTORS = {
    "left_to_right": (0, 1),
    "right_to_left": (0, -1),
    "top_to_bottom": (1, 1),
    "bottom_to_top": (1, -1),
}

GRAMMAR_VERSION = 1
_DIRECTION_PHRASE = {d: d.replace("_", " ") for d in DIRECTIONS}
_RULE_SUFFIX = {"wrap_none": "", "bounce_repeat": "", "bounce_once": " then bounces", "stop": " then stops"}


@lru_cache(maxsize=1)
def load_glyphs():
    """The ten embedded 28x28 digit bitmaps as float32 in [0, 1]."""
    with resources.files("tivdiff.assets").joinpath("glyphs.npy").open("rb") as f:
        raw = np.load(f)
    return (raw.astype(np.float32) / np.float32(255.0))


@dataclass(frozen=True)
class MotionSpec:
    direction: str
    boundary_rule: str
    speed: float

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise RejectedInput(f"unknown direction {self.direction!r}")
        if self.boundary_rule not in BOUNDARY_RULES:
            raise RejectedInput(f"unknown boundary rule {self.boundary_rule!r}")
        if not 0.0 < self.speed < 1.0:
            raise RejectedInput(f"speed must lie in (0, 1), got {self.speed}")

    @property
    def step(self):
        return speed_to_pixels(self.speed)


@dataclass
class DigitSprite:
    glyph_id: int
    bitmap: np.ndarray
    position: tuple


@dataclass
class VideoSample:
    frames: np.ndarray
    caption: str
    speed: float
    variant: str
    seed: int
    digits: list = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (
            self.frames.dtype == other.frames.dtype
            and np.array_equal(self.frames, other.frames)
            and self.caption == other.caption
            and self.speed == other.speed
            and self.variant == other.variant
            and self.seed == other.seed
            and self.digits == other.digits
        )

    def moving_digits(self):
        return [d for d in self.digits if d["moving"]]


def speed_to_pixels(eta):
    return 1 + int(round(eta * (V_MAX - 1)))


def render_caption(digits, motions):
    """Caption for the moving digits, e.g. ``"digit 3 is moving left to right."``.

    Grammar (version ``GRAMMAR_VERSION``)::

        caption := clause ( " and " clause )? "."
        clause  := "digit " D " is moving " DIR SUFFIX
        DIR     := "left to right" | "right to left" | "top to bottom" | "bottom to top"
        SUFFIX  := "" | " then bounces" | " then stops"
    """
    digits = list(digits)
    motions = list(motions)
    if len(digits) != len(motions):
        raise RejectedInput(f"{len(digits)} digits but {len(motions)} motions")
    if not digits:
        raise RejectedInput("caption needs at least one moving digit")
    clauses = []
    for d, m in zip(digits, motions):
        if not 0 <= int(d) <= 9:
            raise RejectedInput(f"glyph id {d} out of range")
        clauses.append(f"digit {int(d)} is moving {_DIRECTION_PHRASE[m.direction]}{_RULE_SUFFIX[m.boundary_rule]}")
    return " and ".join(clauses) + "."


def simulate_track(start, motion, n_frames=N_FRAMES):
    """Integer positions along the motion axis and the frame indices of boundary events.

    ``start`` is the coordinate along the motion axis.  Reflection is specular on
    the sprite bounding box, so ``bounce_*`` rules preserve step magnitude and
    negate its sign; ``stop`` freezes the sprite on the edge.
    """
    _, sign = _DIR_VECTORS[motion.direction]
    v = sign * motion.step
    x = int(start)
    xs = [x]
    events = []
    stopped = False
    bounced = False
    for n in range(1, n_frames):
        if stopped:
            xs.append(x)
            continue
        nx = x + v
        if motion.boundary_rule == "stop":
            if nx <= 0 or nx >= POS_MAX:
                nx = min(max(nx, 0), POS_MAX)
                stopped = True
                events.append(n)
        elif motion.boundary_rule == "wrap_none":
            if nx < 0 or nx > POS_MAX:
                nx = min(max(nx, 0), POS_MAX)
                events.append(n)
        elif nx < 0 or nx > POS_MAX:
            if motion.boundary_rule == "bounce_once" and bounced:
                # second contact is a violation; the sampler rejects the track
                events.append(n)
            nx = -nx if nx < 0 else 2 * POS_MAX - nx
            v = -v
            bounced = True
            events.append(n)
        x = nx
        xs.append(x)
    return xs, events


def _track_ok(xs, events, motion, n_frames):
    # the first displacement must be a full step in the captioned direction
    if xs[1] - xs[0] != _DIR_VECTORS[motion.direction][1] * motion.step:
        return False
    if motion.boundary_rule in ("bounce_once", "stop"):
        # exactly one event, with at least one displacement observed after it
        return len(events) == 1 and events[0] <= n_frames - 2
    if motion.boundary_rule == "wrap_none":
        return not events
    return True


def _sample_track(rng, motion, n_frames):
    for _ in range(10_000):
        start = int(rng.integers(0, POS_MAX + 1))
        xs, events = simulate_track(start, motion, n_frames)
        if _track_ok(xs, events, motion, n_frames):
            return xs, events
    raise RuntimeError(f"no admissible start position for {motion}")


def _positions(track, motion, cross):
    axis, _ = _DIR_VECTORS[motion.direction]
    return [(x, cross) if axis == 0 else (cross, x) for x in track]


def compose_frame(sprites, canvas=CANVAS):
    """Composite sprites with a per-pixel maximum."""
    frame = np.zeros((canvas, canvas), dtype=np.float32)
    for s in sprites:
        x, y = (int(round(p)) for p in s.position)
        if not (0 <= x <= canvas - GLYPH and 0 <= y <= canvas - GLYPH):
            raise RejectedInput(f"sprite at {s.position} leaves the canvas")
        region = frame[y:y + GLYPH, x:x + GLYPH]
        np.maximum(region, s.bitmap, out=region)
    return frame


def synth_sample(variant, rng_seed, n_frames=N_FRAMES):
    if variant not in VARIANTS:
        raise RejectedInput(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if int(rng_seed) < 0:
        raise RejectedInput("rng_seed must be nonnegative")
    rng = np.random.default_rng(int(rng_seed))
    glyphs = load_glyphs()

    eta = float(rng.uniform(0.0, 1.0))
    while eta <= 0.0:
        eta = float(rng.uniform(0.0, 1.0))

    n_moving = 1 if variant == "single" else 2
    n_total = n_moving + (1 if variant == "modified" else 0)
    ids = [int(g) for g in rng.choice(10, size=n_total, replace=False)]

    digits = []
    motions = []
    for i in range(n_moving):
        direction = DIRECTIONS[int(rng.integers(len(DIRECTIONS)))]
        if variant == "modified":
            rule = ("bounce_once", "stop")[int(rng.integers(2))]
        else:
            rule = "bounce_repeat"
        motion = MotionSpec(direction, rule, eta)
        track, events = _sample_track(rng, motion, n_frames)
        cross = int(rng.integers(0, POS_MAX + 1))
        motions.append(motion)
        digits.append({
            "glyph": ids[i],
            "moving": True,
            "direction": direction,
            "boundary_rule": rule,
            "step": motion.step,
            "events": events,
            "positions": [list(p) for p in _positions(track, motion, cross)],
        })
    if variant == "modified":
        p = [int(rng.integers(0, POS_MAX + 1)), int(rng.integers(0, POS_MAX + 1))]
        digits.append({
            "glyph": ids[-1],
            "moving": False,
            "direction": None,
            "boundary_rule": None,
            "step": 0,
            "events": [],
            "positions": [list(p) for _ in range(n_frames)],
        })

    frames = np.empty((n_frames, CANVAS, CANVAS, 1), dtype=np.float32)
    for n in range(n_frames):
        sprites = [DigitSprite(d["glyph"], glyphs[d["glyph"]], tuple(d["positions"][n])) for d in digits]
        frames[n, :, :, 0] = compose_frame(sprites)

    caption = render_caption([d["glyph"] for d in digits[:n_moving]], motions)
    return VideoSample(frames, caption, eta, variant, int(rng_seed), digits)


def derive_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _synth_indexed(args):
    variant, seed, i = args
    return synth_sample(variant, derive_seed(seed, i))


def synth_dataset(variant, count, seed, workers=1):
    jobs = [(variant, seed, i) for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(_synth_indexed, jobs, chunksize=8))
    return [_synth_indexed(j) for j in jobs]


# -- on-disk format --------------------------------------------------------

def write_frames(path, frames):
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 4:
        raise RejectedInput(f"frames must be 4-D, got shape {frames.shape}")
    header = np.asarray(frames.shape, dtype="<u2").tobytes()
    Path(path).write_bytes(header + frames.tobytes())


def read_frames(path):
    buf = Path(path).read_bytes()
    shape = tuple(int(s) for s in np.frombuffer(buf[:8], dtype="<u2"))
    data = np.frombuffer(buf[8:], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ChecksumError(f"{path}: payload size does not match header {shape}")
    return data.reshape(shape).astype(np.float32)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class DatasetManifest:
    variant: str
    count: int
    split: dict
    seed: int | None
    format_version: int
    samples: list
    config_hash: str | None = None
    grammar_version: int = GRAMMAR_VERSION

    def to_json(self):
        return {
            "format_version": self.format_version,
            "grammar_version": self.grammar_version,
            "config_hash": self.config_hash,
            "variant": self.variant,
            "count": self.count,
            "split": self.split,
            "seed": self.seed,
            "samples": self.samples,
        }


def write_dataset(samples, root_path, split=0.8, seed=None, config_hash=None):
    root = Path(root_path)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    n_train = int(round(len(samples) * split))
    entries = []
    for i, s in enumerate(samples):
        sid = f"{i:06d}"
        fpath = root / "samples" / f"{sid}.f32"
        mpath = root / "samples" / f"{sid}.json"
        write_frames(fpath, s.frames)
        meta = {
            "caption": s.caption,
            "speed": s.speed,
            "variant": s.variant,
            "seed": s.seed,
            "digits": s.digits,
        }
        mpath.write_text(json.dumps(meta, indent=1, sort_keys=True))
        entries.append({
            "id": sid,
            "split": "train" if i < n_train else "test",
            "frames": f"samples/{sid}.f32",
            "meta": f"samples/{sid}.json",
            "frames_sha256": _sha256(fpath),
            "meta_sha256": _sha256(mpath),
        })
    variants = sorted({s.variant for s in samples})
    manifest = DatasetManifest(
        variant=variants[0] if len(variants) == 1 else "mixed",
        count=len(samples),
        split={"train": split, "test": round(1.0 - split, 10)},
        seed=seed,
        format_version=FORMAT_VERSION,
        samples=entries,
        config_hash=config_hash,
    )
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True))
    return manifest


def read_manifest(root_path):
    root = Path(root_path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise MissingFileError(f"{mpath}: manifest not found")
    raw = json.loads(mpath.read_text())
    if raw.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{mpath}: format version {raw.get('format_version')} != supported {FORMAT_VERSION}")
    if raw["count"] != len(raw["samples"]):
        raise DatasetError(f"{mpath}: count {raw['count']} != {len(raw['samples'])} entries")
    return DatasetManifest(
        variant=raw["variant"], count=raw["count"], split=raw["split"], seed=raw["seed"],
        format_version=raw["format_version"], samples=raw["samples"],
        config_hash=raw.get("config_hash"), grammar_version=raw.get("grammar_version", GRAMMAR_VERSION),
    )


def read_dataset(root_path, split=None):
    root = Path(root_path)
    manifest = read_manifest(root)
    out = []
    for e in manifest.samples:
        if split is not None and e["split"] != split:
            continue
        fpath, mpath = root / e["frames"], root / e["meta"]
        for p, key in ((fpath, "frames_sha256"), (mpath, "meta_sha256")):
            if not p.is_file():
                raise MissingFileError(f"{p}: referenced by manifest but missing")
            if _sha256(p) != e[key]:
                raise ChecksumError(f"{p}: checksum mismatch")
        meta = json.loads(mpath.read_text())
        out.append(VideoSample(read_frames(fpath), meta["caption"], meta["speed"],
                               meta["variant"], meta["seed"], meta["digits"]))
    return out

