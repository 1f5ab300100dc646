"""Central finite-difference checks for every backward pass.

A check perturbs individual coordinates by +/- eps and compares
``(L(x + h) - L(x - h)) / (2h)`` with the analytic gradient, where ``h``
is the step actually realised in the array's dtype. The perturbed arrays
are upcast to float64 before the loss is evaluated, so float32 checks
measure the float32 backward pass against an accurate derivative instead
of against float32 forward roundoff. Losses are random linear
functionals of the op output.

Piecewise-linear ops (ReLU, max pooling, hard-negative mining) have kinks.
A loss callable may return a signature of its discrete decisions next to
the value; coordinates whose +/- perturbation changes the signature
straddle a kink and are skipped rather than counted as failures. The
fraction skipped is reported.

Relative error per tensor is ``max|a - n| / max(max|a|, max|n|)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import block, ops
from .detector.loss import multibox_loss

TOLERANCE = {np.float32: 1e-3, np.float64: 1e-6}
EPS = {np.float32: 1e-3, np.float64: 1e-5}


@dataclass
class CheckResult:
    name: str
    dtype: str
    rel_error: float
    checked: int
    skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        # a check that could not test anything is a failure unless there was nothing to test
        if self.checked == 0:
            return self.skipped == 0
        return self.rel_error < self.tolerance and self.skipped <= self.checked

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<36s} {self.dtype:<8s} rel_err={self.rel_error:.2e} "
                f"(tol {self.tolerance:.0e}, checked {self.checked}, kinks skipped {self.skipped})")


def _eval(loss_fn, arrays):
    res = loss_fn(arrays)
    if isinstance(res, tuple):
        return float(res[0]), res[1]
    return float(res), None


def _upcast(arrays):
    return {k: v.astype(np.float64) for k, v in arrays.items()}


def numeric_gradient(loss_fn, arrays: dict, name: str, coords, eps: float, shrink: int = 2):
    """FD derivative of ``loss_fn`` wrt ``arrays[name]`` at flat ``coords``.

    A coordinate whose +/- step crosses a kink is retried with steps 10x and
    100x smaller (``shrink`` retries). Returns ``(values, ok_mask)``;
    ``ok_mask`` is False where every step crossed a kink.
    """
    _, base_sig = _eval(loss_fn, _upcast(arrays))
    arr = arrays[name]
    flat = arr.reshape(-1)
    vals = np.zeros(len(coords))
    ok = np.zeros(len(coords), dtype=bool)
    for n, i in enumerate(coords):
        orig = flat[i].copy()
        for h in eps * 0.1 ** np.arange(shrink + 1):
            flat[i] = orig + h
            up = float(flat[i])
            lp, sp = _eval(loss_fn, _upcast(arrays))
            flat[i] = orig - h
            dn = float(flat[i])
            lm, sm = _eval(loss_fn, _upcast(arrays))
            flat[i] = orig
            if up == dn:
                break
            if base_sig is None or (sp == base_sig and sm == base_sig):
                vals[n] = (lp - lm) / (up - dn)
                ok[n] = True
                break
    return vals, ok


def check_gradients(label: str, loss_fn, arrays: dict, analytic: dict, rng: np.random.Generator,
                    dtype=np.float32, max_coords: int = 48, eps: float | None = None) -> list[CheckResult]:
    """Compare ``analytic[name]`` to finite differences for every named array.

    ``arrays`` is perturbed in place and restored. At most ``max_coords``
    randomly chosen coordinates are probed per array. ``dtype`` selects the
    tolerance (and the step, unless ``eps`` is given).
    """
    dtype = np.dtype(dtype).type
    eps, tol = (EPS[dtype] if eps is None else eps), TOLERANCE[dtype]
    results = []
    for name in sorted(analytic):
        arr = arrays[name]
        if arr.size == 0:
            results.append(CheckResult(f"{label}:{name}", np.dtype(dtype).name, 0.0, 0, 0, tol))
            continue
        n = min(max_coords, arr.size)
        coords = np.sort(rng.choice(arr.size, size=n, replace=False))
        num, ok = numeric_gradient(loss_fn, arrays, name, coords, eps)
        ana = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[coords]
        a, m = ana[ok], num[ok]
        scale = max(np.abs(a).max(initial=0.0), np.abs(m).max(initial=0.0))
        err = float(np.abs(a - m).max(initial=0.0) / scale) if scale > 0 else 0.0
        results.append(CheckResult(f"{label}:{name}", np.dtype(dtype).name, err, int(ok.sum()), int((~ok).sum()), tol))
    return results


def _projection(rng, shape):
    return rng.standard_normal(shape)


def _linear_loss(out, proj):
    return float(np.sum(out.astype(np.float64) * proj))


# ---------------------------------------------------------------------------
# per-op suites


def check_conv(rng, dtype=np.float32, backward=ops.conv2d_backward, shape=None, dilation=None,
               stride=1, kernel=3) -> list[CheckResult]:
    b, c, h, w = shape or (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(5, 8)), int(rng.integers(5, 8)))
    d = dilation or int(rng.integers(1, 3))
    oc = int(rng.integers(1, 4))
    x = rng.standard_normal((b, c, h, w)).astype(dtype)
    p = ops.ConvParams(rng.standard_normal((oc, c, kernel, kernel)).astype(dtype),
                       rng.standard_normal(oc).astype(dtype), stride=stride, padding=d, dilation=d)
    out = ops.conv2d_forward(x, p)
    proj = _projection(rng, out.shape)
    gx, gw, gb = backward(x, p, proj.astype(dtype))
    arrays = {"x": x, "weight": p.weight, "bias": p.bias}

    def loss(a):
        return _linear_loss(ops.conv2d_forward(a["x"], ops.ConvParams(a["weight"], a["bias"], stride, d, d)), proj)

    return check_gradients(f"conv2d{(b, c, h, w)} d={d}", loss, arrays, {"x": gx, "weight": gw, "bias": gb}, rng, dtype)


def check_relu(rng, dtype=np.float32) -> list[CheckResult]:
    shape = tuple(int(v) for v in rng.integers(1, 5, size=4))
    x = rng.standard_normal(shape).astype(dtype)
    proj = _projection(rng, shape)
    g = ops.relu_backward(x, proj.astype(dtype))

    def loss(a):
        return _linear_loss(ops.relu_forward(a["x"]), proj), (a["x"] > 0).tobytes()

    return check_gradients(f"relu{shape}", loss, {"x": x}, {"x": g}, rng, dtype)


def check_maxpool(rng, dtype=np.float32) -> list[CheckResult]:
    d = int(rng.integers(1, 3))
    k = 2 * d + 1
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(4, 8)), int(rng.integers(4, 8)))
    x = rng.standard_normal(shape).astype(dtype)
    proj = _projection(rng, shape)
    g = ops.maxpool2d_backward(x, proj.astype(dtype), k, 1, d)

    def loss(a):
        c = {}
        out = ops.maxpool2d_forward(a["x"], k, 1, d, cache=c)
        return _linear_loss(out, proj), c["argmax"].tobytes()

    return check_gradients(f"maxpool{shape} k={k}", loss, {"x": x}, {"x": g}, rng, dtype)


def check_avgpool(rng, dtype=np.float32) -> list[CheckResult]:
    d = int(rng.integers(1, 3))
    k = 2 * d + 1
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(4, 8)), int(rng.integers(4, 8)))
    x = rng.standard_normal(shape).astype(dtype)
    proj = _projection(rng, shape)
    g = ops.avgpool2d_backward(x, proj.astype(dtype), k, 1, d)

    def loss(a):
        return _linear_loss(ops.avgpool2d_forward(a["x"], k, 1, d), proj)

    return check_gradients(f"avgpool{shape} k={k}", loss, {"x": x}, {"x": g}, rng, dtype)


def check_concat(rng, dtype=np.float32) -> list[CheckResult]:
    b, h, w = (int(v) for v in rng.integers(1, 4, size=3))
    chans = [int(c) for c in rng.integers(1, 4, size=int(rng.integers(2, 5)))]
    arrays = {f"x{i}": rng.standard_normal((b, c, h, w)).astype(dtype) for i, c in enumerate(chans)}
    names = list(arrays)
    proj = _projection(rng, (b, sum(chans), h, w))
    pieces = ops.concat_backward(proj.astype(dtype), chans)
    analytic = dict(zip(names, pieces))

    def loss(a):
        return _linear_loss(ops.concat_channels([a[n] for n in names]), proj)

    return check_gradients(f"concat(b={b}, c={chans}, {h}x{w})", loss, arrays, analytic, rng, dtype)


def check_add(rng, dtype=np.float32) -> list[CheckResult]:
    shape = tuple(int(v) for v in rng.integers(1, 4, size=4))
    arrays = {"a": rng.standard_normal(shape).astype(dtype), "b": rng.standard_normal(shape).astype(dtype)}
    proj = _projection(rng, shape)
    ga, gb = ops.add_backward(proj.astype(dtype))

    def loss(a):
        return _linear_loss(ops.add_forward(a["a"], a["b"]), proj)

    return check_gradients(f"add{shape}", loss, arrays, {"a": ga, "b": gb}, rng, dtype)


def check_fluff(rng, dtype=np.float32, cfg: block.FluffConfig | None = None, shape=None) -> list[CheckResult]:
    if cfg is None:
        kind = block.FUSION_KINDS[int(rng.integers(0, len(block.FUSION_KINDS)))]
        R = int(rng.choice([1, 2]))
        L = int(rng.integers(1, 4))
        rates = tuple(tuple(int(v) for v in rng.integers(1, 4, size=R)) for _ in range(L))
        cfg = block.FluffConfig(c_pre=2 * R, c_out=int(rng.integers(1, 4)), levels=L, branches=R, rates=rates,
                                fusion_kind=kind, inter_level_relu=bool(rng.integers(0, 2)))
    b, h, w = shape or (int(rng.integers(1, 3)), int(rng.integers(4, 8)), int(rng.integers(4, 8)))
    x = rng.standard_normal((b, cfg.c_pre, h, w)).astype(dtype)
    params = block.init_fluff_params(cfg, rng, dtype=dtype)
    # non-zero biases so every code path carries signal
    for name, arr in params.named().items():
        if name.endswith("bias"):
            arr[...] = rng.standard_normal(arr.shape) * 0.5
    out = block.fluff_forward(x, cfg, params)
    proj = _projection(rng, out.shape)
    gx, grads = block.fluff_backward(x, cfg, params, proj.astype(dtype))
    arrays = {"x": x, **params.named()}

    def loss(a):
        c = {}
        o = block.fluff_forward(a["x"], cfg, block.FluffParams.from_named(cfg, a), cache=c)
        return _linear_loss(o, proj), block.activation_signature(c)

    label = (f"fluff{x.shape} L={cfg.levels} R={cfg.branches} {cfg.fusion_kind} "
             f"relu={int(cfg.inter_level_relu)}")
    return check_gradients(label, loss, arrays, {"x": gx, **grads}, rng, dtype, max_coords=16)


def check_multibox(rng, dtype=np.float32, num_priors: int | None = None,
                   num_classes: int | None = None) -> list[CheckResult]:
    n = int(rng.integers(1, 3))
    P = num_priors or int(rng.integers(4, 17))
    num_classes = num_classes or int(rng.integers(2, 6))
    centers = rng.uniform(0.2, 0.8, size=(P, 2))
    sizes = rng.uniform(0.15, 0.5, size=(P, 2))
    priors = np.clip(np.concatenate([centers - sizes / 2, centers + sizes / 2], axis=1), 0.0, 1.0)
    gt = []
    for _ in range(n):
        k = int(rng.integers(0, 3))
        # ground truth near existing priors so some of them match
        src = priors[rng.choice(P, size=k, replace=False)]
        boxes = np.clip(src + rng.normal(0, 0.03, size=src.shape), 0.0, 1.0)
        boxes[:, 2:] = np.maximum(boxes[:, 2:], boxes[:, :2] + 0.05)
        gt.append((boxes, rng.integers(1, num_classes, size=k)))
    arrays = {"loc": (rng.standard_normal((n, P, 4)) * 1.5).astype(dtype),
              "conf": rng.standard_normal((n, P, num_classes)).astype(dtype)}
    res = multibox_loss(arrays["loc"], arrays["conf"], priors, gt)

    def loss(a):
        r = multibox_loss(a["loc"], a["conf"], priors, gt)
        return r.loss, r.signature

    return check_gradients(f"multibox(n={n}, P={P}, C={num_classes})", loss, arrays,
                           {"loc": res.grad_loc, "conf": res.grad_conf}, rng, dtype)


def _network_signature(cache) -> bytes:
    parts = []
    for name in sorted(cache["st"]):
        entry = cache["st"][name]
        if len(entry) == 3:
            parts.append((entry[1] > 0).tobytes())
        else:
            parts.append(block.activation_signature(entry[1]))
    return b"".join(parts)


def check_network(det, rng, max_coords: int = 6, batch: int = 2) -> list[CheckResult]:
    """Spot-check a whole detector's backward pass against finite differences.

    The loss is a random linear functional of both head outputs, so every
    parameter tensor is probed at up to ``max_coords`` coordinates. A whole
    network has so many ReLUs that a float32-sized step crosses a kink on
    most coordinates, so the probe runs on float64 copies with a float64
    step while the tolerance still follows the network's dtype. Works on a
    copy of ``det`` whose biases are randomised, so no unit sits exactly on
    a ReLU kink.
    """
    det = copy.deepcopy(det)
    for name, arr in det.params.items():
        if name.endswith("bias"):
            arr[...] = rng.standard_normal(arr.shape) * 0.1
    dtype = np.dtype(det.dtype).type
    cfg = det.cfg
    x = rng.random((batch, cfg.in_channels, cfg.image_size, cfg.image_size)).astype(dtype)
    cache = {}
    loc, conf = det.forward(x, cache)
    pl, pc = _projection(rng, loc.shape), _projection(rng, conf.shape)
    grads = det.backward(pl.astype(dtype), pc.astype(dtype), cache)
    original = det.params

    def loss(a):
        det.params = a
        try:
            c = {}
            lo, co = det.forward(a["__x"].astype(np.float64), c)
        finally:
            det.params = original
        return _linear_loss(lo, pl) + _linear_loss(co, pc), _network_signature(c)

    arrays = {"__x": x, **det.params}
    arrays = {k: v.astype(np.float64) for k, v in arrays.items()}
    return check_gradients("network", loss, arrays, grads, rng, dtype, max_coords=max_coords, eps=EPS[np.float64])


OP_CHECKS = {
    "conv2d": check_conv,
    "relu": check_relu,
    "maxpool": check_maxpool,
    "avgpool": check_avgpool,
    "concat": check_concat,
    "add": check_add,
    "fluff": check_fluff,
    "multibox": check_multibox,
}


def run_suite(seed: int = 0, repeats: int = 5, dtypes=(np.float32, np.float64), extra=None) -> list[CheckResult]:
    """Run every op check ``repeats`` times per dtype on random small shapes.

    ``extra`` maps names to further ``check(rng, dtype)`` callables.
    """
    checks = dict(OP_CHECKS)
    if extra:
        checks.update(extra)
    results = []
    for dtype in dtypes:
        rng = np.random.default_rng(seed)
        for name, fn in checks.items():
            for _ in range(repeats):
                results.extend(fn(rng, dtype))
    return results
