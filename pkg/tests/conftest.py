import numpy as np

from fluff import ops
from fluff.block import FluffParams, fluff_backward, init_fluff_params
from fluff.config import ConvLayer, PriorMap, fluff_model
from fluff.synth import Dataset, SceneSpec, generate_dataset


def random_boxes(rng, n, quantize=False):
    """n valid boxes in the unit square; ``quantize`` snaps to a coarse grid to provoke ties."""
    c = rng.uniform(0.1, 0.9, size=(n, 2))
    s = rng.uniform(0.05, 0.4, size=(n, 2))
    b = np.clip(np.concatenate([c - s / 2, c + s / 2], axis=1), 0.0, 1.0)
    if quantize:
        b = np.round(b * 8) / 8
        b[:, 2:] = np.maximum(b[:, 2:], b[:, :2] + 0.125)
    return b


def nms_instance(rng, max_boxes=200):
    n = int(rng.integers(0, max_boxes + 1))
    quant = bool(rng.integers(0, 2))
    boxes = random_boxes(rng, n, quantize=quant)
    scores = np.round(rng.random(n), 1 if quant else 6)
    labels = rng.integers(1, 4, size=n)
    return boxes, scores, labels


def tiny_model(variant="Fluff", **kw):
    """A detector config small enough for whole-network finite differences."""
    return fluff_model(image_size=16, backbone=[ConvLayer(out_channels=4, stride=2)], backbone_maps=[0],
                       extra_layers=[ConvLayer(out_channels=4, stride=2)],
                       priors=[PriorMap(scale=0.3, aspect_ratios=[1.0, 2.0]), PriorMap(scale=0.6)],
                       fluff={"variant": variant}, **kw)


def make_dataset(seed, n, **spec):
    imgs, anns = generate_dataset(SceneSpec(seed=seed, **spec), n)
    return Dataset(imgs, [np.asarray(a["boxes"]).reshape(-1, 4) for a in anns],
                   [np.asarray(a["labels"], dtype=np.int64) for a in anns], [a["image_id"] for a in anns])


def empirical_rf(rates, kernel=3):
    """Support width of d(out centre)/d(input), backpropagated through a real conv chain."""
    size = 2 * sum((kernel - 1) * d for d in rates) + 5
    ps = [ops.ConvParams(np.ones((1, 1, kernel, kernel)), np.zeros(1), 1, d * (kernel - 1) // 2, d) for d in rates]
    x = np.zeros((1, 1, size, size))
    acts = [x]
    for p in ps:
        acts.append(ops.conv2d_forward(acts[-1], p))
    g = np.zeros_like(acts[-1])
    g[0, 0, size // 2, size // 2] = 1.0
    for p, a in zip(reversed(ps), reversed(acts[:-1])):
        g, _, _ = ops.conv2d_backward(a, p, g)
    return _support_width(g)


def block_rf_probe(cfg):
    """Support width of d(block output centre)/d(input) with all weights and biases set to one.

    Positive weights and biases keep every ReLU open, so the support is the
    union of all lattice paths.
    """
    named = init_fluff_params(cfg, np.random.default_rng(0), np.float64).named()
    params = FluffParams.from_named(cfg, {k: np.ones_like(v) for k, v in named.items()})
    reach = sum(2 * max(row[r] for row in cfg.rates) for r in range(cfg.branches)) * cfg.levels
    size = 2 * reach + 5
    x = np.zeros((1, cfg.c_pre, size, size))
    g = np.zeros((1, cfg.c_out, size, size))
    g[0, 0, size // 2, size // 2] = 1.0
    gx, _ = fluff_backward(x, cfg, params, g)
    return _support_width(gx)


def _support_width(g):
    cols = np.flatnonzero(np.abs(g[0]).sum(axis=(0, 1)) > 0)
    return int(cols[-1] - cols[0] + 1)
