"""Training, evaluation, ablation and latency benchmarking."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import network as net
from .metrics import MetricsReport, frame_metrics
from .synth import SynthConfig, VideoClip, augment, flow_decode, flow_encode, generate_dataset, load_dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings.

    Desk-scale defaults keep the 10:1 fusion/encoder learning-rate ratio,
    0.9 per-epoch decay, 5e-4 weight decay and 0.9 momentum, but use larger
    rates so a few hundred CPU steps make progress. :meth:`full_scale` gives the
    full-scale values.
    """

    lr_encoder: float = 0.005
    lr_fusion: float = 0.05
    lr_decay: float = 0.9
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 8
    steps: int | None = None  # overrides epochs when set
    decay_steps: int | None = None  # lr decay period in steps; None = once per pass over the data
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lr_encoder < 0 or self.lr_fusion < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1 or self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ValueError("batch_size must be >= 1, epochs and steps >= 0")
        if self.decay_steps is not None and self.decay_steps < 1:
            raise ValueError(f"decay_steps must be >= 1, got {self.decay_steps}")

    @classmethod
    def full_scale(cls, **kw):
        base = dict(lr_encoder=1e-4, lr_fusion=1e-3, batch_size=10, epochs=25)
        base.update(kw)
        return cls(**base)


def desk_synth_config(**kw) -> SynthConfig:
    """64x64 clips with static look-alike distractors."""
    base = dict(height=64, width=64, length=8, n_distractors=2, size_range=(6.0, 10.0))
    base.update(kw)
    return SynthConfig(**base)


def desk_network_config(**kw) -> net.NetworkConfig:
    base = dict(input_size=(64, 64), k=3, d=2, cascade=3)
    base.update(kw)
    return net.NetworkConfig(**base)


class SGD:
    """Momentum SGD with L2 weight decay and per-group learning rates."""

    def __init__(self, params: dict, group_lrs: dict, momentum=0.9, weight_decay=5e-4):
        self.params = params
        self.group_lrs = dict(group_lrs)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr_scale: float = 1.0) -> None:
        for name, p in self.params.items():
            lr = self.group_lrs[net.param_group(name)] * lr_scale
            if lr == 0:
                continue
            g = grads[name] + self.weight_decay * p
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            p -= (lr * buf).astype(p.dtype, copy=False)
            if not np.isfinite(p).all():
                raise FloatingPointError(f"parameter {name} became non-finite")


@dataclass
class RunRecord:
    train_config: dict
    network_config: dict
    data: dict
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    initial_loss: float | None = None
    final_loss: float | None = None
    metrics: dict | None = None
    timings: dict = field(default_factory=dict)
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def resolve_clips(source) -> list[VideoClip]:
    """Accept clips, a dataset directory, or ``(SynthConfig, n_clips)``."""
    if isinstance(source, (str, Path)):
        return load_dataset(source)
    if isinstance(source, tuple) and isinstance(source[0], SynthConfig):
        return generate_dataset(*source)
    if isinstance(source, SynthConfig):
        return generate_dataset(source, 1)
    return list(source)


def _resize_chw(img, size, order=1):
    h, w = img.shape[-2:]
    if (h, w) == tuple(size):
        return img
    factors = (1,) * (img.ndim - 2) + (size[0] / h, size[1] / w)
    return ndimage.zoom(img, factors, order=order, grid_mode=True, mode="grid-constant" if order == 0 else "nearest")


def _resize_flow(flow, size, u_max):
    h, w = flow.shape[-2:]
    if (h, w) == tuple(size):
        return flow
    u, v = flow_decode(flow, u_max)
    u = _resize_chw(u, size) * size[1] / w
    v = _resize_chw(v, size) * size[0] / h
    return flow_encode(u, v, u_max)


def _u_max(clip: VideoClip) -> float:
    return float(clip.metadata.get("u_max", 20.0))


def prepare_sample(clip: VideoClip, t: int, size, rng=None, do_augment=False):
    frame, flow, mask = clip.frames[t], clip.flows[t], clip.masks[t]
    if do_augment:
        frame, flow, mask = augment(frame, flow, mask, rng, out_size=tuple(size), u_max=_u_max(clip))
    else:
        frame = _resize_chw(frame, size)
        flow = _resize_flow(flow, size, _u_max(clip))
        mask = (_resize_chw(mask.astype(np.float32), size, order=0) > 0.5).astype(np.uint8)
    return frame.astype(np.float32), flow.astype(np.float32), mask


def _batch(samples):
    fr, fl, mk = zip(*samples)
    return np.stack(fr), np.stack(fl), np.stack(mk)[:, None].astype(np.float32)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def dataset_loss(params, net_cfg, clips) -> float:
    """Mean BCE over every frame (no augmentation)."""
    total, count = 0.0, 0
    for clip in clips:
        for t0 in range(0, len(clip), 8):
            idx = range(t0, min(t0 + 8, len(clip)))
            i_a, i_m, gt = _batch([prepare_sample(clip, t, net_cfg.input_size) for t in idx])
            prob = net.predict_mask(net.forward(params, net_cfg, i_a, i_m))
            total += net.bce_loss(prob, gt) * len(idx)
            count += len(idx)
    return total / count


def train(train_cfg: TrainConfig, net_cfg: net.NetworkConfig, data, out_dir=None, params=None, record_initial=True):
    """Train from a seeded initialization. Returns ``(params, RunRecord)``.

    ``data`` is anything :func:`resolve_clips` accepts. With ``out_dir`` the
    checkpoint and ``run.json`` are written there.
    """
    t_start = time.perf_counter()
    clips = resolve_clips(data)
    if not clips:
        raise ValueError("training data is empty")
    params = params if params is not None else net.init_params(net_cfg, seed=train_cfg.seed)
    opt = SGD(
        params,
        {"encoder": train_cfg.lr_encoder, "fusion": train_cfg.lr_fusion},
        momentum=train_cfg.momentum,
        weight_decay=train_cfg.weight_decay,
    )
    rng = np.random.default_rng(train_cfg.seed)
    index = [(c, t) for c, clip in enumerate(clips) for t in range(len(clip))]
    steps_per_epoch = max(1, int(np.ceil(len(index) / train_cfg.batch_size)))
    total_steps = train_cfg.steps if train_cfg.steps is not None else train_cfg.epochs * steps_per_epoch

    record = RunRecord(
        train_config=asdict(train_cfg),
        network_config=net_cfg.to_dict(),
        data=dict(clips=[c.name for c in clips], frames=len(index)),
    )
    if record_initial:
        record.initial_loss = dataset_loss(params, net_cfg, clips)

    step, epoch = 0, 0
    while step < total_steps:
        order = rng.permutation(len(index))
        losses = []
        for b0 in range(0, len(order), train_cfg.batch_size):
            if step >= total_steps:
                break
            samples = [
                prepare_sample(clips[c], t, net_cfg.input_size, rng, train_cfg.augment)
                for c, t in (index[i] for i in order[b0 : b0 + train_cfg.batch_size])
            ]
            i_a, i_m, gt = _batch(samples)
            loss, grads = net.loss_and_grads(params, net_cfg, i_a, i_m, gt)
            if not np.isfinite(loss):
                raise FloatingPointError(f"loss became non-finite at step {step}")
            decays = epoch if train_cfg.decay_steps is None else step // train_cfg.decay_steps
            opt.step(grads, train_cfg.lr_decay**decays)
            losses.append(loss)
            step += 1
        record.epoch_losses.append(float(np.mean(losses)))
        record.step_losses.extend(float(x) for x in losses)
        log.info("epoch %d: loss %.4f (%d steps)", epoch, record.epoch_losses[-1], step)
        epoch += 1

    record.final_loss = dataset_loss(params, net_cfg, clips) if record_initial else None
    record.timings["train_seconds"] = time.perf_counter() - t_start
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = net.save_checkpoint(out / "model.npz", params, net_cfg, extra=dict(train=asdict(train_cfg)))
        record.checkpoint = str(ckpt)
        (out / "run.json").write_text(json.dumps(record.to_dict(), indent=2))
    return params, record


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_clip(params, net_cfg, clip: VideoClip, flip_average=False, batch=8) -> list[np.ndarray]:
    """Per-frame foreground probabilities at the clip's own resolution."""
    h, w = clip.masks[0].shape
    probs = []
    for t0 in range(0, len(clip), batch):
        idx = range(t0, min(t0 + batch, len(clip)))
        i_a, i_m, _ = _batch([prepare_sample(clip, t, net_cfg.input_size) for t in idx])
        p = net.predict_mask(net.forward(params, net_cfg, i_a, i_m))
        if flip_average:
            # mirrored flow also negates u (channel 0 around 0.5)
            m_flip = i_m[..., ::-1].copy()
            m_flip[:, 0] = 1.0 - m_flip[:, 0]
            pf = net.predict_mask(net.forward(params, net_cfg, np.ascontiguousarray(i_a[..., ::-1]), m_flip))
            p = 0.5 * (p + pf[..., ::-1])
        for k in range(p.shape[0]):
            probs.append(np.clip(_resize_chw(p[k, 0].astype(np.float64), (h, w)), 0, 1))
    return probs


def evaluate(params, net_cfg, data, out_dir=None, flip_average=False, tolerance_px=None) -> MetricsReport:
    """Per-clip R, F, R&F, MAE and F-beta; optionally writes predicted masks as PNG."""
    clips = resolve_clips(data)
    report = MetricsReport()
    for clip in clips:
        probs = predict_clip(params, net_cfg, clip, flip_average)
        frames = [frame_metrics(p, m, tolerance_px=tolerance_px) for p, m in zip(probs, clip.masks)]
        report.add_sequence(clip.name, frames)
        if out_dir is not None:
            d = Path(out_dir) / "masks" / clip.name
            d.mkdir(parents=True, exist_ok=True)
            for t, p in enumerate(probs):
                Image.fromarray(net.binarize(p) * 255).save(d / f"{t:05d}.png")
    if out_dir is not None:
        (Path(out_dir) / "metrics.json").write_text(report.to_json(indent=2))
    return report


def evaluate_checkpoint(ckpt_path, data, **kw) -> MetricsReport:
    params, cfg, _ = net.load_checkpoint(ckpt_path)
    return evaluate(params, cfg, data, **kw)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

# Named variants of the component ablation: full model, without motion
# guidance (element-wise product instead), and additionally without
# progressive fusion (U-Net-style decoder).
ABLATION_VARIANTS = {
    "full": dict(enhancement_mode="motion_guidance", fusion_mode="progressive"),
    "-FG": dict(enhancement_mode="elementwise_mul", fusion_mode="progressive"),
    "-FG-U": dict(enhancement_mode="elementwise_mul", fusion_mode="unet_baseline"),
}


@dataclass(frozen=True)
class AblationRow:
    variant: str
    enhancement_mode: str
    fusion_mode: str
    k: int
    cascade: int
    seed: int


def ablation_grid(variants=("full", "-FG", "-FG-U"), ks=(3,), cascades=(1,), seeds=(0,)) -> list[AblationRow]:
    rows = []
    for name in variants:
        spec = ABLATION_VARIANTS[name]
        mg = spec["enhancement_mode"] == "motion_guidance"
        for k in ks if mg else (ks[0],):
            for c in cascades if mg else (cascades[0],):
                for s in seeds:
                    rows.append(AblationRow(name, spec["enhancement_mode"], spec["fusion_mode"], k, c, s))
    return rows


def run_ablation_row(row: AblationRow, base_net: net.NetworkConfig, train_cfg: TrainConfig, train_data, eval_data) -> dict:
    """Train and evaluate one grid row from scratch; independent of every other row."""
    cfg = replace(base_net, enhancement_mode=row.enhancement_mode, fusion_mode=row.fusion_mode, k=row.k, cascade=row.cascade)
    tcfg = replace(train_cfg, seed=row.seed)
    t0 = time.perf_counter()
    params, rec = train(tcfg, cfg, train_data, record_initial=False)
    metrics = evaluate(params, cfg, eval_data).mean()
    return dict(asdict(row), **metrics, final_train_loss=rec.epoch_losses[-1] if rec.epoch_losses else None,
                seconds=time.perf_counter() - t0)


def ablate(rows, base_net, train_cfg, train_data, eval_data, out_dir=None) -> list[dict]:
    train_clips = resolve_clips(train_data)
    eval_clips = resolve_clips(eval_data)
    results = []
    for row in rows:
        res = run_ablation_row(row, base_net, train_cfg, train_clips, eval_clips)
        log.info("ablation %s: R=%.4f F=%.4f", row, res["R"], res["F"])
        results.append(res)
    if out_dir is not None:
        write_table(results, Path(out_dir), "ablation")
    return results


def summarize_ablation(results) -> list[dict]:
    """Mean metrics per (variant, K, cascade) over seeds."""
    groups: dict = {}
    for r in results:
        groups.setdefault((r["variant"], r["k"], r["cascade"]), []).append(r)
    out = []
    for (variant, k, c), rs in groups.items():
        entry = dict(variant=variant, k=k, cascade=c, seeds=len(rs))
        for key in ("R", "F", "RF", "MAE", "Fbeta"):
            entry[key] = float(np.mean([r[key] for r in rs]))
        out.append(entry)
    return out


def write_table(rows: list[dict], out_dir: Path, stem: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps(rows, indent=2))
    if rows:
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------

@dataclass
class BenchStats:
    warmup: int
    rounds: int
    trimmed: int
    trimmed_mean_ms: float
    median_ms: float
    min_ms: float
    max_ms: float


def trimmed_mean(samples, drop: int) -> float:
    """Mean after removing the ``drop`` lowest and ``drop`` highest samples."""
    s = sorted(samples)
    if 2 * drop >= len(s):
        raise ValueError(f"cannot drop {drop} from each end of {len(s)} samples")
    kept = s[drop : len(s) - drop]
    return float(sum(kept) / len(kept))


def bench(fn, warmup: int = 10, rounds: int = 60, drop: int = 20, clock=time.perf_counter) -> BenchStats:
    """Time ``fn()``: discard ``warmup`` calls, then trimmed mean over ``rounds``."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(rounds):
        t0 = clock()
        fn()
        times.append((clock() - t0) * 1e3)
    return BenchStats(warmup, rounds, drop, trimmed_mean(times, drop), float(np.median(times)), min(times), max(times))
