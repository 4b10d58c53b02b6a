"""Dual-stream segmentation network with explicit forward/backward passes.

Layout
------
* Two weight-independent encoders (appearance on RGB, motion on the encoded
  flow image). Each is a stride-2 stem followed by four stages of
  ``conv3x3/s2 + ReLU + conv3x3 + ReLU``; stage i sits at stride 2**(i+1).
* Stages 2-4 of the appearance stream are enhanced in-line by the motion
  stream (motion guidance, element-wise product, or nothing); the enhanced
  map is both the stage output and the input of the next appearance stage.
* The decoder sees ``U_i = concat(U_a_i, V_m_i)`` from every stage and
  produces one-channel logits at input resolution, either by progressive
  pairwise fusion with two residual blocks per merge or by a plain
  U-Net-style top-down pass.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .attention import (
    MotionGuidanceConfig,
    motion_guidance_cascade_backward,
    motion_guidance_cascade_forward,
)

ENHANCEMENT_MODES = ("motion_guidance", "elementwise_mul", "none")
FUSION_MODES = ("progressive", "unet_baseline")
BCE_EPS = 1e-7
CHECKPOINT_FORMAT = "mgvos-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    widths: tuple = (8, 16, 32, 64)
    input_size: tuple = (96, 160)
    enhancement_mode: str = "motion_guidance"
    fusion_mode: str = "progressive"
    k: int = 3
    d: int = 2
    cascade: int = 1
    score_mode: str = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.widths) != 4:
            raise ValueError(f"expected 4 stage widths, got {self.widths}")
        if self.enhancement_mode not in ENHANCEMENT_MODES:
            raise ValueError(f"enhancement_mode must be one of {ENHANCEMENT_MODES}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.enhancement_mode == "motion_guidance":
            for w in self.widths[1:]:
                if w % self.d:
                    raise ValueError(f"stage width {w} is not divisible by d={self.d}")
            # validates k / cascade / score_mode
            MotionGuidanceConfig(k=self.k, d=self.d, cascade=self.cascade, score_mode=self.score_mode)
        check_resolution(*self.input_size)

    @property
    def strides(self) -> tuple:
        return tuple(2 ** (i + 2) for i in range(len(self.widths)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        return cls(**data)


def check_resolution(h: int, w: int) -> None:
    if h % 32 or w % 32 or h <= 0 or w <= 0:
        raise ValueError(f"input resolution {h}x{w} must be positive and divisible by 32")


@dataclass
class StageFeatures:
    v_a: np.ndarray
    v_m: np.ndarray
    u_a: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def u(self) -> np.ndarray:
        return tc.concat_channels(self.u_a, self.v_m)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _init_array(name: str, shape: tuple, seed: int, gain: float, dtype) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    fan_in = int(np.prod(shape[1:]))
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _ParamBuilder:
    def __init__(self, seed, dtype):
        self.seed, self.dtype, self.params = seed, dtype, {}

    def conv(self, name, cout, cin, k, bias=True, gain=np.sqrt(6.0)):
        self.params[f"{name}.w"] = _init_array(f"{name}.w", (cout, cin, k, k), self.seed, gain, self.dtype)
        if bias:
            self.params[f"{name}.b"] = np.zeros(cout, dtype=self.dtype)

    def res_block(self, name, cin, cout):
        self.conv(f"{name}.conv1", cout, cin, 3)
        self.conv(f"{name}.conv2", cout, cout, 3)
        if cin != cout:
            self.conv(f"{name}.proj", cout, cin, 1, bias=False, gain=1.0)


def fusion_param_specs(channels, mode: str, seed: int = 0, dtype=tc.DEFAULT_DTYPE) -> dict:
    """Decoder parameters for a pyramid with the given per-branch channel counts."""
    pb = _ParamBuilder(seed, dtype)
    n = len(channels)
    if mode == "progressive":
        for j in range(1, n):
            for i in range(n - j):
                cin = channels[i] + channels[i + 1]
                pb.res_block(f"fuse.j{j}.b{i}.res0", cin, channels[i])
                pb.res_block(f"fuse.j{j}.b{i}.res1", channels[i], channels[i])
    elif mode == "unet_baseline":
        for i in range(n - 2, -1, -1):
            pb.conv(f"unet.b{i}.conv", channels[i], channels[i] + channels[i + 1], 3)
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    pb.conv("head", 1, channels[0], 1, gain=1.0)
    return pb.params


def init_params(cfg: NetworkConfig, seed: int = 0, dtype=tc.DEFAULT_DTYPE) -> dict:
    """Seeded parameters. Each array is drawn from its own name-keyed stream,
    so shared layers are identical across ablation variants."""
    pb = _ParamBuilder(seed, dtype)
    for stream in ("app", "mot"):
        pb.conv(f"{stream}.stem", cfg.widths[0], 3, 3)
        cin = cfg.widths[0]
        for i, w in enumerate(cfg.widths, start=1):
            pb.conv(f"{stream}.stage{i}.conv1", w, cin, 3)
            pb.conv(f"{stream}.stage{i}.conv2", w, w, 3)
            cin = w
    if cfg.enhancement_mode == "motion_guidance":
        for i, w in enumerate(cfg.widths[1:], start=2):
            for t in range(cfg.cascade):
                pb.conv(f"mg{i}.{t}", w // cfg.d, w, 1, bias=False, gain=1.0)
    pb.params.update(fusion_param_specs([2 * w for w in cfg.widths], cfg.fusion_mode, seed, dtype))
    return pb.params


def param_group(name: str) -> str:
    """``"encoder"`` (both streams and motion guidance) or ``"fusion"`` (decoder and head)."""
    return "encoder" if name.split(".")[0] in ("app", "mot") or name.startswith("mg") else "fusion"


def mg_config(cfg: NetworkConfig, params: dict, stage: int) -> MotionGuidanceConfig:
    weights = tuple(params[f"mg{stage}.{t}.w"] for t in range(cfg.cascade))
    return MotionGuidanceConfig(k=cfg.k, d=cfg.d, cascade=cfg.cascade, compress_weights=weights, score_mode=cfg.score_mode)


# ---------------------------------------------------------------------------
# layer helpers
# ---------------------------------------------------------------------------

def _conv(params, name, x, stride=1):
    w = params[f"{name}.w"]
    return tc.conv2d(x, w, stride=stride, padding=w.shape[2] // 2, bias=params.get(f"{name}.b"))


def _conv_backward(params, name, x, g, grads, stride=1):
    w = params[f"{name}.w"]
    gx, gw = tc.conv2d_backward(x, w, g, stride=stride, padding=w.shape[2] // 2)
    grads[f"{name}.w"] = grads.get(f"{name}.w", 0) + gw
    if f"{name}.b" in params:
        grads[f"{name}.b"] = grads.get(f"{name}.b", 0) + g.sum(axis=(0, 2, 3))
    return gx


def _conv_relu_pair(params, prefix, x, stride):
    z1 = _conv(params, f"{prefix}.conv1", x, stride)
    a1 = tc.relu(z1)
    z2 = _conv(params, f"{prefix}.conv2", a1)
    return tc.relu(z2), dict(x=x, z1=z1, a1=a1, z2=z2)


def _conv_relu_pair_backward(params, prefix, cache, g, grads, stride):
    g = tc.relu_backward(cache["z2"], g)
    g = _conv_backward(params, f"{prefix}.conv2", cache["a1"], g, grads)
    g = tc.relu_backward(cache["z1"], g)
    return _conv_backward(params, f"{prefix}.conv1", cache["x"], g, grads, stride)


def _res_block(params, name, x):
    z1 = _conv(params, f"{name}.conv1", x)
    a1 = tc.relu(z1)
    z2 = _conv(params, f"{name}.conv2", a1)
    skip = tc.conv2d(x, params[f"{name}.proj.w"]) if f"{name}.proj.w" in params else x
    pre = z2 + skip
    return tc.relu(pre), dict(x=x, z1=z1, a1=a1, pre=pre)


def _res_block_backward(params, name, cache, g, grads):
    g = tc.relu_backward(cache["pre"], g)
    gx = _conv_backward(params, f"{name}.conv2", cache["a1"], g, grads)
    gx = tc.relu_backward(cache["z1"], gx)
    gx = _conv_backward(params, f"{name}.conv1", cache["x"], gx, grads)
    if f"{name}.proj.w" in params:
        gs, gw = tc.conv2d_backward(cache["x"], params[f"{name}.proj.w"], g)
        grads[f"{name}.proj.w"] = grads.get(f"{name}.proj.w", 0) + gw
        return gx + gs
    return gx + g


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def _enhance(cfg, params, stage, v_a, v_m):
    if stage == 1 or cfg.enhancement_mode == "none":
        return v_a, None
    if cfg.enhancement_mode == "elementwise_mul":
        return tc.elementwise_mul(v_a, v_m), None
    return motion_guidance_cascade_forward(v_a, v_m, mg_config(cfg, params, stage))


def _enhance_backward(cfg, stage, feat: StageFeatures, g):
    """Return (grad_v_a, grad_v_m or None, {param: grad})."""
    if stage == 1 or cfg.enhancement_mode == "none":
        return g, None, {}
    if cfg.enhancement_mode == "elementwise_mul":
        ga, gm = tc.elementwise_mul_backward(feat.v_a, feat.v_m, g)
        return ga, gm, {}
    ga, gm, gws = motion_guidance_cascade_backward(feat.cache["mg"], g)
    return ga, gm, {f"mg{stage}.{t}.w": gw for t, gw in enumerate(gws)}


def dual_stream_forward(i_a, i_m, params: dict, cfg: NetworkConfig) -> list[StageFeatures]:
    """Encode an RGB frame and its flow image into four :class:`StageFeatures`."""
    if i_a.shape != i_m.shape or i_a.ndim != 4 or i_a.shape[1] != 3:
        raise tc.ShapeError(f"expected two (N, 3, H, W) inputs, got {i_a.shape} and {i_m.shape}")
    check_resolution(*i_a.shape[2:])

    m_stem_z = _conv(params, "mot.stem", i_m, stride=2)
    x_m = tc.relu(m_stem_z)
    motion, m_caches = [], []
    for i in range(1, 5):
        x_m, c = _conv_relu_pair(params, f"mot.stage{i}", x_m, 2)
        motion.append(x_m)
        m_caches.append(c)

    a_stem_z = _conv(params, "app.stem", i_a, stride=2)
    x_a = tc.relu(a_stem_z)
    feats = []
    for i in range(1, 5):
        v_a, a_cache = _conv_relu_pair(params, f"app.stage{i}", x_a, 2)
        u_a, mg_caches = _enhance(cfg, params, i, v_a, motion[i - 1])
        feats.append(StageFeatures(v_a, motion[i - 1], u_a, dict(app=a_cache, mot=m_caches[i - 1], mg=mg_caches)))
        x_a = u_a
    feats[0].cache.update(app_stem=dict(x=i_a, z=a_stem_z), mot_stem=dict(x=i_m, z=m_stem_z))
    return feats


def dual_stream_backward(feats: list[StageFeatures], grad_u_a, grad_v_m, params, cfg, grads):
    """Backward through both encoders given per-stage gradients of U_a,i and V_m,i."""
    g_next = None
    g_mot = [g.copy() for g in grad_v_m]
    for i in range(4, 0, -1):
        f = feats[i - 1]
        g = grad_u_a[i - 1] if g_next is None else grad_u_a[i - 1] + g_next
        g, gm, gparams = _enhance_backward(cfg, i, f, g)
        if gm is not None:
            g_mot[i - 1] = g_mot[i - 1] + gm
        for k, v in gparams.items():
            grads[k] = grads.get(k, 0) + v
        g_next = _conv_relu_pair_backward(params, f"app.stage{i}", f.cache["app"], g, grads, 2)
    stem = feats[0].cache["app_stem"]
    _conv_backward(params, "app.stem", stem["x"], tc.relu_backward(stem["z"], g_next), grads, stride=2)

    g = None
    for i in range(4, 0, -1):
        g = g_mot[i - 1] if g is None else g_mot[i - 1] + g
        g = _conv_relu_pair_backward(params, f"mot.stage{i}", feats[i - 1].cache["mot"], g, grads, 2)
    stem = feats[0].cache["mot_stem"]
    _conv_backward(params, "mot.stem", stem["x"], tc.relu_backward(stem["z"], g), grads, stride=2)


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------

def _upsample_count(h_top: int, h_out: int) -> int:
    n = 0
    while h_top < h_out:
        h_top *= 2
        n += 1
    if h_top != h_out:
        raise tc.ShapeError(f"cannot reach height {h_out} from {h_top // 2 ** n} by 2x upsampling")
    return n


def _check_pyramid(feats):
    for a, b in zip(feats, feats[1:]):
        if a.shape[0] != b.shape[0] or a.shape[2] != 2 * b.shape[2] or a.shape[3] != 2 * b.shape[3]:
            raise tc.ShapeError(f"pyramid mismatch between {a.shape} and {b.shape}")


def _head(params, x, out_hw):
    n_up = _upsample_count(x.shape[2], out_hw[0])
    y = _conv(params, "head", x)
    for _ in range(n_up):
        y = tc.upsample2x(y)
    if y.shape[2:] != tuple(out_hw):
        raise tc.ShapeError(f"decoder output {y.shape[2:]} does not match {tuple(out_hw)}")
    return y, dict(x=x, n_up=n_up)


def _head_backward(params, cache, g, grads):
    for _ in range(cache["n_up"]):
        g = tc.upsample2x_backward(g)
    return _conv_backward(params, "head", cache["x"], g, grads)


def progressive_fusion(feats, params, out_hw, return_cache=False):
    """Merge a feature pyramid (finest first) into full-resolution logits.

    At every round each branch i takes ``concat(branch_i, up(branch_{i+1}))``
    through two residual blocks; the deepest branch drops out, so after
    len(feats) - 1 rounds a single finest-resolution map remains.
    """
    _check_pyramid(feats)
    level = list(feats)
    caches = []
    for j in range(1, len(feats)):
        new, round_caches = [], []
        for i in range(len(level) - 1):
            up = tc.upsample2x(level[i + 1])
            cat = tc.concat_channels(level[i], up)
            h0, c0 = _res_block(params, f"fuse.j{j}.b{i}.res0", cat)
            h1, c1 = _res_block(params, f"fuse.j{j}.b{i}.res1", h0)
            new.append(h1)
            round_caches.append((level[i].shape[1], c0, c1))
        caches.append(round_caches)
        level = new
    logits, head_cache = _head(params, level[0], out_hw)
    if return_cache:
        return logits, dict(rounds=caches, head=head_cache, n=len(feats))
    return logits


def progressive_fusion_backward(cache, grad_logits, params, grads):
    g_level = [_head_backward(params, cache["head"], grad_logits, grads)]
    for j in range(len(cache["rounds"]), 0, -1):
        round_caches = cache["rounds"][j - 1]
        prev = [None] * (len(round_caches) + 1)
        for i, (c_left, c0, c1) in enumerate(round_caches):
            g = _res_block_backward(params, f"fuse.j{j}.b{i}.res1", c1, g_level[i], grads)
            g = _res_block_backward(params, f"fuse.j{j}.b{i}.res0", c0, g, grads)
            g_left, g_up = tc.concat_channels_backward([c_left, g.shape[1] - c_left], g)
            g_right = tc.upsample2x_backward(g_up)
            prev[i] = g_left if prev[i] is None else prev[i] + g_left
            prev[i + 1] = g_right if prev[i + 1] is None else prev[i + 1] + g_right
        g_level = prev
    return g_level


def unet_baseline_fusion(feats, params, out_hw, return_cache=False):
    """Top-down decoder: upsample, concatenate with the next finer stage, conv + ReLU."""
    _check_pyramid(feats)
    x = feats[-1]
    caches = []
    for i in range(len(feats) - 2, -1, -1):
        cat = tc.concat_channels(feats[i], tc.upsample2x(x))
        z = _conv(params, f"unet.b{i}.conv", cat)
        x = tc.relu(z)
        caches.append(dict(i=i, c_left=feats[i].shape[1], cat=cat, z=z))
    logits, head_cache = _head(params, x, out_hw)
    if return_cache:
        return logits, dict(steps=caches, head=head_cache, n=len(feats))
    return logits


def unet_baseline_fusion_backward(cache, grad_logits, params, grads):
    g_feats = [None] * cache["n"]
    g = _head_backward(params, cache["head"], grad_logits, grads)
    for step in reversed(cache["steps"]):
        g = tc.relu_backward(step["z"], g)
        g = _conv_backward(params, f"unet.b{step['i']}.conv", step["cat"], g, grads)
        g_left, g_up = tc.concat_channels_backward([step["c_left"], g.shape[1] - step["c_left"]], g)
        g_feats[step["i"]] = g_left
        g = tc.upsample2x_backward(g_up)
    g_feats[-1] = g
    return g_feats


# ---------------------------------------------------------------------------
# head, loss
# ---------------------------------------------------------------------------

def predict_mask(logits):
    return tc.sigmoid(logits)


def binarize(prob, threshold: float = 0.5):
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def _check_gt(prob, gt):
    if prob.shape != gt.shape:
        raise tc.ShapeError(f"bce: prob shape {prob.shape} vs gt shape {gt.shape}")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("bce: ground truth values must be 0 or 1")


def bce_loss(prob, gt, eps: float = BCE_EPS) -> float:
    _check_gt(prob, gt)
    p = np.clip(prob, eps, 1 - eps)
    return float(np.mean(-(gt * np.log(p) + (1 - gt) * np.log1p(-p))))


def bce_loss_backward(prob, gt, eps: float = BCE_EPS):
    _check_gt(prob, gt)
    p = np.clip(prob, eps, 1 - eps)
    g = (-gt / p + (1 - gt) / (1 - p)) / prob.size
    return g * ((prob > eps) & (prob < 1 - eps))


def bce_logits_backward(prob, gt):
    """Gradient of the BCE w.r.t. the logits, ``(sigmoid(z) - gt) / size``.

    Equal to chaining :func:`bce_loss_backward` through the sigmoid wherever
    the clamp is inactive. Where the clamp is active that chain is exactly 0,
    so a saturated wrong pixel would never be corrected; this form keeps the
    unclamped signal, which is what training uses.
    """
    _check_gt(prob, gt)
    return (prob - gt) / prob.size


# ---------------------------------------------------------------------------
# whole model
# ---------------------------------------------------------------------------

def forward(params, cfg: NetworkConfig, i_a, i_m, return_cache=False):
    """Logits (N, 1, H, W) for a batch of frames and flow images."""
    feats = dual_stream_forward(i_a, i_m, params, cfg)
    us = [f.u for f in feats]
    fuse = progressive_fusion if cfg.fusion_mode == "progressive" else unet_baseline_fusion
    logits, dcache = fuse(us, params, i_a.shape[2:], return_cache=True)
    if return_cache:
        return logits, dict(feats=feats, decoder=dcache)
    return logits


def backward(params, cfg: NetworkConfig, cache, grad_logits) -> dict:
    grads: dict = {}
    if cfg.fusion_mode == "progressive":
        g_us = progressive_fusion_backward(cache["decoder"], grad_logits, params, grads)
    else:
        g_us = unet_baseline_fusion_backward(cache["decoder"], grad_logits, params, grads)
    g_ua, g_vm = [], []
    for f, g in zip(cache["feats"], g_us):
        ga, gm = tc.concat_channels_backward([f.u_a.shape[1], f.v_m.shape[1]], g)
        g_ua.append(ga)
        g_vm.append(gm)
    dual_stream_backward(cache["feats"], g_ua, g_vm, params, cfg, grads)
    for name, p in params.items():
        g = grads.get(name)
        grads[name] = np.zeros_like(p) if g is None or np.isscalar(g) else g.astype(p.dtype, copy=False)
    return grads


def relu_preactivations(cache) -> list:
    """Every ReLU pre-activation recorded in a :func:`forward` cache."""
    found = []

    def walk(node):
        if isinstance(node, StageFeatures):
            walk(node.cache)
        elif isinstance(node, dict):
            for key, val in node.items():
                if key in ("z", "z1", "z2", "pre") and isinstance(val, np.ndarray):
                    found.append(val)
                else:
                    walk(val)
        elif isinstance(node, (list, tuple)):
            for val in node:
                walk(val)

    walk(cache)
    return found


def loss_and_grads(params, cfg, i_a, i_m, gt):
    """BCE of the predicted mask against ``gt`` and its parameter gradients."""
    logits, cache = forward(params, cfg, i_a, i_m, return_cache=True)
    prob = predict_mask(logits)
    loss = bce_loss(prob, gt)
    return loss, backward(params, cfg, cache, bce_logits_backward(prob, gt))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict, cfg: NetworkConfig, extra: dict | None = None) -> Path:
    """Write an ``.npz`` holding ``param/<name>`` arrays plus a JSON ``__meta__`` record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(
        format=CHECKPOINT_FORMAT,
        version=CHECKPOINT_VERSION,
        network=cfg.to_dict(),
        params={k: dict(shape=list(v.shape), dtype=str(v.dtype)) for k, v in params.items()},
        extra=extra or {},
    )
    arrays = {f"param/{k}": v for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path):
    """Return ``(params, NetworkConfig, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params = {k: data[f"param/{k}"] for k in meta["params"]}
    for k, spec in meta["params"].items():
        if list(params[k].shape) != spec["shape"]:
            raise ValueError(f"{path}: parameter {k} has shape {params[k].shape}, header says {spec['shape']}")
    return params, NetworkConfig.from_dict(meta["network"]), meta
