"""Central finite-difference checks for every backward in the package."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network as net
from . import tensor_core as tc
from .attention import MotionGuidanceConfig, motion_guidance_backward, motion_guidance_fast

FD_EPS = 1e-4


def relative_error(analytic, numeric) -> float:
    """``||a - n|| / max(||a||, ||n||)``, 0 when both are exactly zero."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numerical_gradient(f, x: np.ndarray, eps: float = FD_EPS, indices=None) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    With ``indices`` only those flat positions are probed; the rest stay 0.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _check(name, pairs, tol):
    return CheckResult(name, max(relative_error(a, n) for a, n in pairs), tol)


# Each checker contracts the op output with a fixed random cotangent R, so
# the scalar is L = <op(x), R> and dL/dx is the op's backward applied to R.

def check_conv2d(rng, tol=1e-4):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    stride = int(rng.integers(1, 3))
    out = tc.conv2d(x, w, stride=stride, padding=1)
    r = rng.standard_normal(out.shape)
    gx, gw = tc.conv2d_backward(x, w, r, stride=stride, padding=1)

    def f():
        return float((tc.conv2d(x, w, stride=stride, padding=1) * r).sum())

    return _check("conv2d", [(gx, numerical_gradient(f, x)), (gw, numerical_gradient(f, w))], tol)


def check_relu(rng, tol=1e-4):
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-2] += 0.1  # keep FD away from the kink
    r = rng.standard_normal(x.shape)
    return _check("relu", [(tc.relu_backward(x, r), numerical_gradient(lambda: float((tc.relu(x) * r).sum()), x))], tol)


def check_sigmoid(rng, tol=1e-4):
    x = rng.standard_normal((2, 3, 4, 4)) * 2
    r = rng.standard_normal(x.shape)
    g = tc.sigmoid_backward(tc.sigmoid(x), r)
    return _check("sigmoid", [(g, numerical_gradient(lambda: float((tc.sigmoid(x) * r).sum()), x))], tol)


def check_elementwise_mul(rng, tol=1e-4):
    a, b = rng.standard_normal((2, 2, 4, 3, 3))
    r = rng.standard_normal(a.shape)
    ga, gb = tc.elementwise_mul_backward(a, b, r)

    def f():
        return float((tc.elementwise_mul(a, b) * r).sum())

    return _check("elementwise_mul", [(ga, numerical_gradient(f, a)), (gb, numerical_gradient(f, b))], tol)


def check_concat(rng, tol=1e-4):
    a = rng.standard_normal((2, 2, 3, 4))
    b = rng.standard_normal((2, 3, 3, 4))
    r = rng.standard_normal((2, 5, 3, 4))
    ga, gb = tc.concat_channels_backward([2, 3], r)

    def f():
        return float((tc.concat_channels(a, b) * r).sum())

    return _check("concat_channels", [(ga, numerical_gradient(f, a)), (gb, numerical_gradient(f, b))], tol)


def check_upsample(rng, tol=1e-4):
    x = rng.standard_normal((2, 3, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    r = rng.standard_normal((2, 3, 2 * x.shape[2], 2 * x.shape[3]))
    g = tc.upsample2x_backward(r)
    return _check("upsample2x", [(g, numerical_gradient(lambda: float((tc.upsample2x(x) * r).sum()), x))], tol)


def check_softmax(rng, tol=1e-4):
    k = int(rng.choice([1, 3, 5]))
    s = rng.standard_normal((k, k, 2, 3, 3))
    r = rng.standard_normal(s.shape)
    w = tc.softmax_over_leading_window(s)
    g = tc.softmax_over_leading_window_backward(w, r)
    f = lambda: float((tc.softmax_over_leading_window(s) * r).sum())  # noqa: E731
    return _check("softmax_over_leading_window", [(g, numerical_gradient(f, s))], tol)


def check_unfold(rng, tol=1e-4):
    k = int(rng.choice([1, 3, 5]))
    x = rng.standard_normal((2, 3, 4, 5))
    r = rng.standard_normal((k, k, 3, 2, 4, 5))
    f = lambda: float((tc.unfold(x, k) * r).sum())  # noqa: E731
    return _check("unfold", [(tc.fold(r), numerical_gradient(f, x))], tol)


def check_motion_guidance(rng, tol=1e-4):
    k = int(rng.choice([1, 3, 5]))
    d = int(rng.choice([1, 2]))
    v_a = rng.standard_normal((1, 4, 5, 5))
    v_m = rng.standard_normal((1, 4, 5, 5))
    cfg = MotionGuidanceConfig.random(4, k=k, d=d, rng=rng)
    w = cfg.compress_weights[0]
    r = rng.standard_normal(v_a.shape)
    ga, gm, gw = motion_guidance_backward(v_a, v_m, cfg, r)
    f = lambda: float((motion_guidance_fast(v_a, v_m, cfg) * r).sum())  # noqa: E731
    return _check(
        f"motion_guidance(K={k},d={d})",
        [(ga, numerical_gradient(f, v_a)), (gm, numerical_gradient(f, v_m)), (gw, numerical_gradient(f, w))],
        tol,
    )


def check_bce(rng, tol=1e-4):
    p = rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))
    gt = (rng.random(p.shape) < 0.5).astype(np.float64)
    g = net.bce_loss_backward(p, gt)
    return _check("bce_loss", [(g, numerical_gradient(lambda: net.bce_loss(p, gt), p))], tol)


PRIMITIVE_CHECKS = {
    "conv2d": check_conv2d,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "elementwise_mul": check_elementwise_mul,
    "concat": check_concat,
    "upsample": check_upsample,
    "softmax": check_softmax,
    "unfold": check_unfold,
    "motion_guidance": check_motion_guidance,
    "bce": check_bce,
}


def tiny_network_config(**overrides) -> net.NetworkConfig:
    kw = dict(widths=(2, 2, 2, 2), input_size=(32, 64), k=3, d=1, cascade=2)
    kw.update(overrides)
    return net.NetworkConfig(**kw)


def check_network(seed: int = 0, cfg: net.NetworkConfig | None = None, max_entries: int | None = None, tol=1e-3):
    """End-to-end BCE gradient check of every parameter array in 64-bit mode.

    ``max_entries`` caps how many entries per array are probed (random subset).
    The network is piecewise smooth: an entry whose +eps / -eps evaluations
    land on different ReLU activation patterns straddles a kink, where central
    differences do not estimate the derivative. Entries whose derivative sits
    below the roundoff floor of ``fp - fm`` are unresolvable at this eps and
    are skipped too. Both kinds are counted in ``skipped``; a replacement
    entry is drawn when sampling.
    """
    cfg = cfg or tiny_network_config()
    rng = np.random.default_rng(seed)
    params = net.init_params(cfg, seed=seed, dtype=np.float64)
    # zero biases put dead ReLU units exactly on the kink
    for name, p in params.items():
        if name.endswith(".b"):
            p[:] = rng.uniform(-0.2, 0.2, size=p.shape)
    h, w = cfg.input_size
    i_a = rng.random((1, 3, h, w))
    i_m = rng.random((1, 3, h, w))
    gt = (rng.random((1, 1, h, w)) < 0.3).astype(np.float64)
    _, grads = net.loss_and_grads(params, cfg, i_a, i_m, gt)

    def evaluate():
        logits, cache = net.forward(params, cfg, i_a, i_m, return_cache=True)
        pattern = np.concatenate([(z > 0).ravel() for z in net.relu_preactivations(cache)])
        return net.bce_loss(net.predict_mask(logits), gt), pattern

    worst, checked, skipped = 0.0, 0, 0
    for name, p in params.items():
        flat = p.reshape(-1)
        order = rng.permutation(flat.size) if max_entries is not None else np.arange(flat.size)
        want = flat.size if max_entries is None else min(max_entries, flat.size)
        ana, num = [], []
        for i in order:
            if len(ana) == want:
                break
            old = flat[i]
            flat[i] = old + FD_EPS
            fp, pat_p = evaluate()
            flat[i] = old - FD_EPS
            fm, pat_m = evaluate()
            flat[i] = old
            a, n = grads[name].reshape(-1)[i], (fp - fm) / (2 * FD_EPS)
            if not np.array_equal(pat_p, pat_m) or max(abs(a), abs(n)) < _resolution(fp, fm):
                skipped += 1
                continue
            ana.append(a)
            num.append(n)
        if ana:
            worst = max(worst, relative_error(ana, num))
            checked += len(ana)
    return CheckResult(f"network[{cfg.enhancement_mode},{cfg.fusion_mode}]", worst, tol, checked, skipped)


def _resolution(fp, fm):
    # summed roundoff in the loss is ~1e3 ulp; keep its share of |a - n| near 1%
    return 1e5 * np.finfo(np.float64).eps * max(abs(fp), abs(fm)) / (2 * FD_EPS)


def run_gradcheck(component: str = "all", seeds=range(20)) -> list[CheckResult]:
    names = list(PRIMITIVE_CHECKS) + ["network"] if component == "all" else [component]
    results = []
    for name in names:
        for seed in seeds:
            rng = np.random.default_rng(seed)
            if name == "network":
                results.append(check_network(seed, max_entries=6))
            elif name in PRIMITIVE_CHECKS:
                results.append(PRIMITIVE_CHECKS[name](rng))
            else:
                raise ValueError(f"unknown gradcheck component {name!r}; choose from {list(PRIMITIVE_CHECKS) + ['network', 'all']}")
    return results
