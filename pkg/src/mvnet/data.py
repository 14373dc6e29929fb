"""Synthetic gesture clips, clip preprocessing, and on-disk dataset formats."""

import csv
import dataclasses
import math
import os

import numpy as np
from scipy import ndimage

from .spline import resample_clip, spline_weights
from .tensor import read_tensor, write_tensor


@dataclasses.dataclass
class Clip:
    frames: np.ndarray          # [T, C, H, W]
    label: int = None
    id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim == 3:
            self.frames = self.frames[:, None]
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"clip frames must be [T, C, H, W], got {self.frames.shape}")

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclasses.dataclass(frozen=True)
class GestureClass:
    id: int
    name: str
    motion: str


GESTURES = (
    GestureClass(0, "translate-left", "translate"),
    GestureClass(1, "translate-right", "translate"),
    GestureClass(2, "translate-up", "translate"),
    GestureClass(3, "translate-down", "translate"),
    GestureClass(4, "expand", "scale"),
    GestureClass(5, "contract", "scale"),
    GestureClass(6, "rotate", "rotate"),
)

_DIRECTIONS = {0: (0.0, -1.0), 1: (0.0, 1.0), 2: (-1.0, 0.0), 3: (1.0, 0.0)}
SPEED = 0.45            # pixels per frame at velocity scale 1
GROWTH = 0.035          # relative size change per frame
SPIN = 2 * math.pi / 48  # radians per frame
SATELLITE_RADIUS = 6.0


def gesture_class(class_id, n_classes=len(GESTURES)):
    if not 0 <= int(class_id) < min(n_classes, len(GESTURES)):
        raise ValueError(f"invalid class id {class_id}")
    return GESTURES[int(class_id)]


def _blob(yy, xx, cy, cx, sigma, amp):
    return amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))


def generate_synthetic_clip(gesture, velocity_scale=1.0, noise=0.0, seed=0,
                            dims=(25, 33, 33), channels=1):
    """Render a two-blob pattern executing ``gesture``'s motion over ``dims[0]`` frames.

    ``velocity_scale`` multiplies the time parameterization, so the pattern
    at frame ``f`` sits where a scale-1 clip has it at ``velocity_scale * f``.
    Additive noise is uniform in ``[-noise, noise]``; values are clipped to
    ``[0, 1]``. Output depends only on the arguments.
    """
    if not isinstance(gesture, GestureClass):
        gesture = gesture_class(gesture)
    if velocity_scale < 0:
        raise ValueError("velocity_scale must be non-negative")
    T, H, W = dims
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-2.0, 2.0, size=2)
    sigma = rng.uniform(2.2, 2.8)
    theta0 = rng.uniform(0.0, 2 * math.pi)
    cy0, cx0 = (H - 1) / 2.0 + jitter[0], (W - 1) / 2.0 + jitter[1]

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    frames = np.empty((T, channels, H, W))
    for f in range(T):
        tau = velocity_scale * f
        cy, cx, size, theta = cy0, cx0, 1.0, theta0
        if gesture.motion == "translate":
            dy, dx = _DIRECTIONS[gesture.id]
            start = 5.5
            cy = cy0 + dy * (SPEED * tau - start)
            cx = cx0 + dx * (SPEED * tau - start)
        elif gesture.name == "expand":
            size = 0.6 + GROWTH * tau
        elif gesture.name == "contract":
            size = max(1.4 - GROWTH * tau, 0.3)
        else:
            theta = theta0 + SPIN * tau
        r = SATELLITE_RADIUS * size
        img = _blob(yy, xx, cy, cx, sigma * size, 0.8)
        img += _blob(yy, xx, cy + r * math.sin(theta), cx + r * math.cos(theta),
                     0.6 * sigma * size, 0.6)
        frames[f] = img
    if noise:
        frames += rng.uniform(-noise, noise, size=frames.shape)
    np.clip(frames, 0.0, 1.0, out=frames)
    return Clip(frames, label=gesture.id, id=f"{gesture.name}-{seed}")


def extract_velocity_sets(clip):
    """Three 9-frame clips: every third frame, every second frame, first nine."""
    if clip.n_frames < 25:
        raise ValueError(f"need at least 25 frames, got {clip.n_frames}")
    picks = (range(0, 25, 3), range(0, 17, 2), range(0, 9))
    return tuple(Clip(clip.frames[list(idx)].copy(), clip.label, f"{clip.id}/set{k + 1}")
                 for k, idx in enumerate(picks))


def model_input(clip, n_frames=9):
    """The fixed-length input the networks see: evenly strided frames."""
    if clip.n_frames == n_frames:
        return clip
    step = (clip.n_frames - 1) // (n_frames - 1)
    if step < 1:
        raise ValueError(f"clip has {clip.n_frames} frames, need {n_frames}")
    idx = list(range(0, step * (n_frames - 1) + 1, step))
    return Clip(clip.frames[idx].copy(), clip.label, clip.id)


def retime(clip, factor, n_frames=9):
    """Resample a long clip so it covers only the first ``factor`` of the span
    that :func:`model_input` would cover, i.e. a ``1/factor`` slower gesture."""
    step = (clip.n_frames - 1) // (n_frames - 1)
    knots = np.arange(clip.n_frames, dtype=np.float64)
    queries = np.array([step * factor * j for j in range(n_frames)], dtype=np.float64)
    return resample_clip(clip, spline_weights(knots, queries))


@dataclasses.dataclass
class DatasetSplit:
    train: list
    test: list
    val: list

    def partition_of(self):
        out = {}
        for name in ("train", "test", "val"):
            for i in getattr(self, name):
                out[i] = name
        return out


def split_dataset(ids, seed=0, fractions=(0.5, 0.3)):
    """Seeded shuffle, then floor(50%) train, floor(30%) test, the rest validation."""
    ids = list(ids)
    if len(ids) < 10:
        raise ValueError(f"need at least 10 ids to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = math.floor(fractions[0] * len(ids))
    n_test = math.floor(fractions[1] * len(ids))
    return DatasetSplit(shuffled[:n_train], shuffled[n_train:n_train + n_test],
                        shuffled[n_train + n_test:])


def shift_frames(frames, dy, dx):
    out = np.zeros_like(frames)
    H, W = frames.shape[-2:]
    src_y = slice(max(0, -dy), min(H, H - dy))
    dst_y = slice(max(0, dy), min(H, H + dy))
    src_x = slice(max(0, -dx), min(W, W - dx))
    dst_x = slice(max(0, dx), min(W, W + dx))
    out[..., dst_y, dst_x] = frames[..., src_y, src_x]
    return out


def rotate_frames(frames, degrees):
    if degrees == 0:
        return frames.copy()
    out = ndimage.rotate(frames, degrees, axes=(-1, -2), reshape=False, order=1,
                         mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def mirror_frames(frames):
    return frames[..., ::-1].copy()


def augment(clip, rng, max_shift=2, max_degrees=10.0, mirror=True):
    """Shifted, rotated and (optionally) mirrored copies of ``clip``.

    The same transform is applied to every frame; labels and dims are kept.
    """
    shifts = [s for s in range(-max_shift, max_shift + 1) if s != 0]
    dy, dx = (int(rng.choice(shifts)) for _ in range(2))
    angle = float(rng.uniform(-max_degrees, max_degrees))
    out = [Clip(shift_frames(clip.frames, dy, dx), clip.label, f"{clip.id}/shift"),
           Clip(rotate_frames(clip.frames, angle), clip.label, f"{clip.id}/rot")]
    if mirror:
        out.append(Clip(mirror_frames(clip.frames), clip.label, f"{clip.id}/mirror"))
    return out


MOTION_LOW = 1e-3
MOTION_HIGH = 5e-2


def motion_energy(clip, blur_radius=1.0):
    """Mean absolute difference between consecutive spatially blurred frames."""
    if clip.n_frames < 2:
        raise ValueError("motion needs at least 2 frames")
    blurred = ndimage.gaussian_filter(clip.frames, sigma=(0, 0, blur_radius, blur_radius))
    return float(np.mean(np.abs(np.diff(blurred, axis=0))))


def motion_filter(clip, blur_radius=1.0, threshold=(MOTION_LOW, MOTION_HIGH)):
    """Keep clips that move, but not erratically: energy within ``threshold``."""
    low, high = threshold
    return low <= motion_energy(clip, blur_radius) <= high


# image strips ------------------------------------------------------------

def strip_bytes(clip):
    frames = clip.frames if isinstance(clip, Clip) else np.asarray(clip)
    if frames.ndim == 4:
        if frames.shape[1] != 1:
            raise ValueError("image strips need single-channel clips")
        frames = frames[:, 0]
    T, H, W = frames.shape
    image = np.concatenate(list(frames), axis=1)
    pixels = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return f"P5\n{T * W} {H}\n255\n".encode("ascii") + pixels.tobytes()


def write_strip(clip, path):
    with open(path, "wb") as fh:
        fh.write(strip_bytes(clip))


def parse_strip(buf, frame_width):
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("malformed PGM header")
        fields.append(buf[start:pos])
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValueError("not an 8-bit binary PGM")
    try:
        width, height = int(fields[1]), int(fields[2])
    except ValueError:
        raise ValueError("malformed PGM header") from None
    pos += 1
    data = np.frombuffer(buf, dtype=np.uint8, offset=pos)
    if data.size != width * height:
        raise ValueError("PGM payload size does not match header")
    if width % frame_width:
        raise ValueError(f"strip width {width} is not a multiple of {frame_width}")
    image = data.reshape(height, width).astype(np.float64) / 255.0
    T = width // frame_width
    frames = image.reshape(height, T, frame_width).transpose(1, 0, 2)
    return frames[:, None].copy()


def read_strip(path, frame_width):
    with open(path, "rb") as fh:
        return Clip(parse_strip(fh.read(), frame_width))


# dataset directories -----------------------------------------------------

def write_dataset(directory, clips, split, meta):
    os.makedirs(os.path.join(directory, "clips"), exist_ok=True)
    for clip in clips:
        write_tensor(os.path.join(directory, "clips", f"{clip.id}.mvt"), clip.frames)
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "class"])
        for clip in clips:
            w.writerow([clip.id, clip.label])
    parts = split.partition_of()
    with open(os.path.join(directory, "split.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "partition"])
        for clip in clips:
            w.writerow([clip.id, parts[clip.id]])
    with open(os.path.join(directory, "meta.txt"), "w") as fh:
        for key, value in meta.items():
            fh.write(f"{key}={value}\n")


def read_key_values(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: expected key = value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def load_dataset(directory):
    """Return ``(clips_by_id, DatasetSplit, meta)`` for a dataset directory."""
    labels = {}
    with open(os.path.join(directory, "labels.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            labels[row["id"]] = int(row["class"]) if row["class"] not in ("", "None") else None
    split = DatasetSplit([], [], [])
    with open(os.path.join(directory, "split.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            if row["partition"] not in ("train", "test", "val"):
                raise ValueError(f"unknown partition {row['partition']!r}")
            getattr(split, row["partition"]).append(row["id"])
    clips = {}
    for cid, label in labels.items():
        frames = read_tensor(os.path.join(directory, "clips", f"{cid}.mvt"))
        clips[cid] = Clip(frames, label, cid)
    meta = read_key_values(os.path.join(directory, "meta.txt"))
    return clips, split, meta


def generate_dataset(n_classes=7, per_class=60, dims=(25, 33, 33), seed=1, noise=0.05,
                     velocity_range=(0.5, 1.5)):
    """Balanced synthetic corpus; clips rejected by the motion filter are redrawn."""
    rng = np.random.default_rng(seed)
    clips = []
    for c in range(n_classes):
        for k in range(per_class):
            while True:
                scale = float(rng.uniform(*velocity_range))
                clip_seed = int(rng.integers(0, 2 ** 31))
                clip = generate_synthetic_clip(c, scale, noise, clip_seed, dims)
                if motion_filter(clip):
                    break
            clip.id = f"c{c}_{k:04d}"
            clips.append(clip)
    split = split_dataset([c.id for c in clips], seed)
    return clips, split
