"""Synthetic moving-shapes clips with exact masks and analytic optical flow.

Foreground shapes move rigidly (translation plus rotation about their own
centre). Distractors are static copies with the same colour and outline,
so appearance alone cannot tell them apart from the target.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SHAPE_KINDS = ("circle", "rectangle", "triangle")
BACKGROUNDS = ("flat", "gradient", "noise")
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class SynthConfig:
    height: int = 96
    width: int = 160
    length: int = 8
    n_foreground: int = 1
    n_distractors: int = 2
    background: str = "noise"
    speed_range: tuple = (1.0, 3.0)  # px / frame
    rotation_range: tuple = (0.0, 6.0)  # degrees / frame, random sign
    size_range: tuple = (7.0, 12.0)  # circumradius in px
    u_max: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_foreground <= 3:
            raise ValueError(f"n_foreground must be in 1..3, got {self.n_foreground}")
        if self.n_distractors < 0 or self.length < 1:
            raise ValueError("n_distractors must be >= 0 and length >= 1")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")
        if 2 * self.size_range[1] >= min(self.height, self.width):
            raise ValueError(
                f"shape radius up to {self.size_range[1]} does not fit a "
                f"{self.height}x{self.width} frame"
            )


@dataclass
class Shape:
    kind: str
    radius: float
    color: tuple
    centers: list  # per frame (x, y)
    angles: list  # per frame, radians
    moving: bool


@dataclass
class VideoClip:
    name: str
    frames: list  # (3, H, W) float32 in [0, 1]
    flows: list  # encoded flow images, (3, H, W) float32 in [0, 1]
    masks: list  # (H, W) uint8 in {0, 1}
    flow_uv: list = field(default_factory=list)  # raw (2, H, W) float64 (u, v), synthetic clips only
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.frames) == len(self.flows) == len(self.masks)):
            raise ValueError(
                f"clip {self.name}: frames/flows/masks lengths differ "
                f"({len(self.frames)}, {len(self.flows)}, {len(self.masks)})"
            )
        shapes = {f.shape[1:] for f in self.frames} | {f.shape[1:] for f in self.flows}
        shapes |= {m.shape for m in self.masks}
        if len(shapes) > 1:
            raise ValueError(f"clip {self.name}: inconsistent resolutions {shapes}")

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# flow encoding
# ---------------------------------------------------------------------------

def flow_encode(u, v, u_max: float = 20.0) -> np.ndarray:
    """Map a flow field to a 3-channel image: (u, v) around 0.5, then magnitude."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    img = np.stack(
        [
            0.5 + u / (2 * u_max),
            0.5 + v / (2 * u_max),
            np.hypot(u, v) / u_max,
        ]
    )
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def flow_decode(img, u_max: float = 20.0):
    img = np.asarray(img, dtype=np.float64)
    return (img[0] - 0.5) * 2 * u_max, (img[1] - 0.5) * 2 * u_max


def quantize(img) -> np.ndarray:
    return (np.round(np.asarray(img) * 255) / 255).astype(np.float32)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _inside(kind, radius, center, angle, xs, ys):
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = xs - center[0], ys - center[1]
    qx = c * dx + s * dy
    qy = -s * dx + c * dy
    if kind == "circle":
        return qx * qx + qy * qy <= radius * radius
    if kind == "rectangle":
        return (np.abs(qx) <= radius * 0.8) & (np.abs(qy) <= radius * 0.55)
    # equilateral triangle with the given circumradius, apex up
    inside = np.ones(xs.shape, dtype=bool)
    for k in range(3):
        a = -math.pi / 2 + 2 * math.pi * k / 3 + math.pi / 3
        nx, ny = math.cos(a), math.sin(a)
        inside &= qx * nx + qy * ny <= radius / 2
    return inside


def _reflect(x, lo, hi):
    """Triangle-wave fold of ``x`` into [lo, hi]."""
    span = hi - lo
    if span <= 0:
        return lo
    t = (x - lo) % (2 * span)
    return lo + (t if t <= span else 2 * span - t)


def _background(cfg: SynthConfig, rng) -> np.ndarray:
    h, w = cfg.height, cfg.width
    base = rng.uniform(0.15, 0.85, size=3)
    if cfg.background == "flat":
        img = np.broadcast_to(base[:, None, None], (3, h, w)).copy()
    elif cfg.background == "gradient":
        other = rng.uniform(0.15, 0.85, size=3)
        t = np.linspace(0, 1, w)[None, None, :]
        img = np.broadcast_to(base[:, None, None] * (1 - t) + other[:, None, None] * t, (3, h, w)).copy()
    else:
        img = base[:, None, None] + 0.12 * rng.standard_normal((3, h, w))
        img = ndimage.gaussian_filter(img, sigma=(0, 1.5, 1.5))
    return img


def _object_color(bg_mean, rng):
    for _ in range(100):
        col = rng.uniform(0.0, 1.0, size=3)
        if np.abs(col - bg_mean).sum() > 0.6:
            return col
    return 1.0 - bg_mean


def render_shapes(shapes: list[Shape], background: np.ndarray, length: int):
    """Draw ``length`` frames; returns ``(frames, masks, flow_uv)``.

    Every shape needs ``length + 1`` centres and angles: flow at frame t is
    the rigid motion from t to t + 1, so the last flow follows the trajectory
    one step past the final frame.
    """
    _, h, w = background.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # distractors first so moving targets are drawn on top
    order = [s for s in shapes if not s.moving] + [s for s in shapes if s.moving]
    frames, masks, flow_uv = [], [], []
    for t in range(length):
        img = background.copy()
        mask = np.zeros((h, w), dtype=bool)
        u = np.zeros((h, w))
        v = np.zeros((h, w))
        for s in order:
            sup = _inside(s.kind, s.radius, s.centers[t], s.angles[t], xs, ys)
            img[:, sup] = np.asarray(s.color)[:, None]
            if s.moving:
                mask |= sup
                # rigid motion t -> t+1: p -> R(dw)(p - c_t) + c_{t+1}
                dw = s.angles[t + 1] - s.angles[t]
                cw, sw = math.cos(dw), math.sin(dw)
                (cx, cy), (nx, ny) = s.centers[t], s.centers[t + 1]
                px, py = xs[sup] - cx, ys[sup] - cy
                u[sup] = cw * px - sw * py + nx - xs[sup]
                v[sup] = sw * px + cw * py + ny - ys[sup]
            else:
                u[sup] = 0.0
                v[sup] = 0.0
        frames.append(np.clip(img, 0, 1).astype(np.float32))
        masks.append(mask.astype(np.uint8))
        flow_uv.append(np.stack([u, v]))
    return frames, masks, flow_uv


def generate_clip(cfg: SynthConfig, name: str | None = None) -> VideoClip:
    """Render one clip. Deterministic in ``cfg`` (including ``cfg.seed``)."""
    rng = np.random.default_rng(cfg.seed)
    h, w, t_len = cfg.height, cfg.width, cfg.length

    bg = _background(cfg, rng)
    kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
    color = _object_color(bg.mean(axis=(1, 2)), rng)

    shapes = []
    for i in range(cfg.n_foreground + cfg.n_distractors):
        moving = i < cfg.n_foreground
        radius = rng.uniform(*cfg.size_range)
        lo_x, hi_x = radius, w - 1 - radius
        lo_y, hi_y = radius, h - 1 - radius
        x0, y0 = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
        a0 = rng.uniform(0, 2 * math.pi)
        if moving:
            speed = rng.uniform(*cfg.speed_range)
            heading = rng.uniform(0, 2 * math.pi)
            vx, vy = speed * math.cos(heading), speed * math.sin(heading)
            omega = math.radians(rng.uniform(*cfg.rotation_range)) * rng.choice((-1.0, 1.0))
        else:
            vx = vy = omega = 0.0
        centers = [(_reflect(x0 + t * vx, lo_x, hi_x), _reflect(y0 + t * vy, lo_y, hi_y)) for t in range(t_len + 1)]
        angles = [a0 + t * omega for t in range(t_len + 1)]
        shapes.append(Shape(kind, radius, tuple(color), centers, angles, moving))

    frames, masks, flow_uv = render_shapes(shapes, bg, t_len)
    flows = [flow_encode(uv[0], uv[1], cfg.u_max) for uv in flow_uv]

    meta = dict(
        config=asdict(cfg),
        shapes=[
            dict(kind=s.kind, radius=s.radius, moving=s.moving, centers=s.centers[:t_len], angles=s.angles[:t_len])
            for s in shapes
        ],
        u_max=cfg.u_max,
    )
    return VideoClip(name or f"clip_{cfg.seed:05d}", frames, flows, masks, flow_uv, meta)


def generate_dataset(cfg: SynthConfig, n_clips: int, prefix: str = "clip") -> list[VideoClip]:
    """``n_clips`` clips with seeds ``cfg.seed, cfg.seed + 1, ...``."""
    return [generate_clip(replace(cfg, seed=cfg.seed + i), f"{prefix}_{cfg.seed + i:05d}") for i in range(n_clips)]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(
    frame,
    flow,
    mask,
    rng,
    out_size=None,
    flip_prob: float = 0.5,
    max_angle: float = 10.0,
    scale_range=(1.0, 1.15),
    u_max: float = 20.0,
    flip: bool | None = None,
    angle: float | None = None,
    scale: float | None = None,
):
    """Random flip, rotation and crop/scale applied identically to all three.

    Flow vectors are transformed with the geometry: a horizontal flip negates
    u, rotation and scaling act on (u, v) like on image displacements.
    ``flip``, ``angle`` (degrees) and ``scale`` override the random draws.
    """
    h, w = mask.shape
    ho, wo = out_size or (h, w)
    if flip is None:
        flip = rng.random() < flip_prob
    if angle is None:
        angle = rng.uniform(-max_angle, max_angle)
    if scale is None:
        scale = rng.uniform(*scale_range)

    frame = np.asarray(frame, dtype=np.float32)
    mask = np.asarray(mask)
    u, v = flow_decode(flow, u_max)
    if flip:
        frame = frame[:, :, ::-1]
        mask = mask[:, ::-1]
        u, v = -u[:, ::-1], v[:, ::-1]

    sx, sy = scale * wo / w, scale * ho / h
    if angle == 0 and sx == 1 and sy == 1:
        return np.ascontiguousarray(frame), flow_encode(u, v, u_max), np.ascontiguousarray(mask)

    th = math.radians(angle)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    fwd_xy = np.diag([sx, sy]) @ rot  # input displacement -> output displacement
    fwd_yx = fwd_xy[::-1, ::-1]
    inv_yx = np.linalg.inv(fwd_yx)
    c_in = np.array([(h - 1) / 2, (w - 1) / 2])
    c_out = np.array([(ho - 1) / 2, (wo - 1) / 2])
    # random crop offset inside the zoomed-in margin
    slack = np.array([h, w]) * (1 - 1 / scale) / 2
    shift = np.array([rng.uniform(-slack[0], slack[0]), rng.uniform(-slack[1], slack[1])]) if scale > 1 else 0.0
    offset = c_in + shift - inv_yx @ c_out

    def warp(a, order):
        return ndimage.affine_transform(a, inv_yx, offset=offset, output_shape=(ho, wo), order=order, mode="constant", cval=0.0)

    frame_out = np.stack([warp(ch, 1) for ch in frame]).astype(np.float32)
    mask_out = warp(mask.astype(np.float64), 0).round().astype(mask.dtype)
    uw, vw = warp(u, 1), warp(v, 1)
    u2 = fwd_xy[0, 0] * uw + fwd_xy[0, 1] * vw
    v2 = fwd_xy[1, 0] * uw + fwd_xy[1, 1] * vw
    return frame_out, flow_encode(u2, v2, u_max), mask_out


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

def _to_uint8(img):
    return np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8)


def save_clip(clip: VideoClip, root) -> Path:
    """Write ``root/<name>/{frames,flows,masks}/NNNNN.*`` plus ``clip.json``."""
    d = Path(root) / clip.name
    for sub in ("frames", "flows", "masks"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    for t, (f, fl, m) in enumerate(zip(clip.frames, clip.flows, clip.masks)):
        Image.fromarray(_to_uint8(f.transpose(1, 2, 0))).save(d / "frames" / f"{t:05d}.png")
        Image.fromarray(_to_uint8(fl.transpose(1, 2, 0))).save(d / "flows" / f"{t:05d}.png")
        Image.fromarray((np.asarray(m) > 0).astype(np.uint8) * 255).save(d / "masks" / f"{t:05d}.pgm")
    meta = dict(clip.metadata)
    meta.update(name=clip.name, length=len(clip), height=clip.masks[0].shape[0], width=clip.masks[0].shape[1])
    (d / "clip.json").write_text(json.dumps(meta, indent=2, default=float))
    return d


def _list_images(d: Path) -> list[Path]:
    if not d.is_dir():
        raise FileNotFoundError(f"missing directory {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images in {d}")
    return files


def load_clip(path) -> VideoClip:
    """Load a clip directory written by :func:`save_clip` or laid out the same way.

    External data works too: frames are RGB images, flows are 3-channel
    encoded flow images, masks are grayscale (> 127 is foreground).
    """
    d = Path(path)
    meta_path = d / "clip.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    frame_files = _list_images(d / "frames")
    flow_files = _list_images(d / "flows")
    mask_files = _list_images(d / "masks")
    if not (len(frame_files) == len(flow_files) == len(mask_files)):
        raise ValueError(
            f"{d}: frames/flows/masks counts differ "
            f"({len(frame_files)}, {len(flow_files)}, {len(mask_files)})"
        )

    def rgb(p):
        return (np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255).transpose(2, 0, 1)

    frames = [rgb(p) for p in frame_files]
    flows = [rgb(p) for p in flow_files]
    masks = [(np.asarray(Image.open(p).convert("L")) > 127).astype(np.uint8) for p in mask_files]
    return VideoClip(meta.get("name", d.name), frames, flows, masks, [], meta)


def save_dataset(clips, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        save_clip(clip, root)
    return root


def load_dataset(root) -> list[VideoClip]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    clip_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not clip_dirs:
        raise FileNotFoundError(f"dataset directory {root} contains no clip directories")
    return [load_clip(p) for p in clip_dirs]
