"""Finite-difference cases: one builder per differentiable operation.

Each builder takes a seeded generator and returns a list of
``(scalar_function, input_tensor)`` pairs; every pair is checked with the
central-difference checker.  Outputs are contracted against fixed random
weights so that every output element influences the scalar.  Inputs of
piecewise operations are kept away from their kinks.
"""

from __future__ import annotations

import numpy as np

from tevit.core import tensor as tt
from tevit.core.gradcheck import finite_diff_check
from tevit.core.tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
SEEDS = range(20)
MAX_ELEMENTS = 64  # larger tensors are checked on a fresh random subset per seed


def _w(rng, shape):
    return rng.normal(size=shape)


def _scal(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * w).sum()


def _away(rng, shape, kinks=(0.0,), margin=0.05, scale=1.0):
    x = rng.normal(scale=scale, size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.sign(x[near] - k + 1e-12) * (margin + rng.uniform(0, 0.2, size=near.sum()))
    return x


def unary(fn, make=None):
    def build(rng):
        x = Tensor(make(rng) if make else rng.normal(size=(3, 4)))
        w = _w(rng, fn(Tensor(x.data)).shape)
        return [(lambda t: _scal(fn(t), w), x)]
    return build


def binary(fn, sa=(3, 4), sb=(3, 4), make_b=None):
    def build(rng):
        a = Tensor(rng.normal(size=sa))
        b = Tensor(make_b(rng, sb) if make_b else rng.normal(size=sb))
        w = _w(rng, fn(Tensor(a.data), Tensor(b.data)).shape)
        return [(lambda t: _scal(fn(t, Tensor(b.data)), w), a),
                (lambda t: _scal(fn(Tensor(a.data), t), w), b)]
    return build


def _maxmin(fn):
    def build(rng):
        a = rng.normal(size=(3, 4))
        b = a + _away(rng, (3, 4), margin=0.05)
        w = _w(rng, a.shape)
        A, B = Tensor(a), Tensor(b)
        return [(lambda t: _scal(fn(t, Tensor(b)), w), A), (lambda t: _scal(fn(Tensor(a), t), w), B)]
    return build


def _layer_norm(rng):
    x = Tensor(rng.normal(size=(2, 3, 6)))
    g = Tensor(rng.normal(size=6))
    b = Tensor(rng.normal(size=6))
    w = _w(rng, x.shape)
    return [(lambda t: _scal(tt.layer_norm(t, Tensor(g.data), Tensor(b.data)), w), x),
            (lambda t: _scal(tt.layer_norm(Tensor(x.data), t, Tensor(b.data)), w), g),
            (lambda t: _scal(tt.layer_norm(Tensor(x.data), Tensor(g.data), t), w), b)]


def _bilinear(rng):
    feat = Tensor(rng.normal(size=(2, 5, 6, 3)))
    n = 7
    bi = rng.integers(0, 2, size=n)
    y = rng.uniform(0.1, 3.9, size=n)
    x = rng.uniform(0.1, 4.9, size=n)
    # keep sample points off integer grid lines, where bilinear weights have kinks in y/x only
    w = _w(rng, (n, 3))
    return [(lambda t: _scal(tt.bilinear_gather(t, bi, y, x), w), feat)]


def _index_gather(rng):
    x = Tensor(rng.normal(size=(5, 4)))
    idx = rng.integers(0, 5, size=8)  # repeats exercise accumulation
    w = _w(rng, (8, 4))
    return [(lambda t: _scal(tt.index(t, idx), w), x)]


def _concat(rng):
    a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(4, 3)))
    w = _w(rng, (6, 3))
    return [(lambda t: _scal(tt.concat([t, Tensor(b.data)], 0), w), a),
            (lambda t: _scal(tt.concat([Tensor(a.data), t], 0), w), b)]


def _stack(rng):
    a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
    w = _w(rng, (2, 2, 3))
    return [(lambda t: _scal(tt.stack([t, Tensor(b.data)], 1), w), a)]


def _softmax(rng):
    x = Tensor(rng.normal(size=(3, 5)))
    w = _w(rng, (3, 5))
    return [(lambda t: _scal(tt.softmax(t, axis=-1), w), x), (lambda t: _scal(tt.softmax(t, axis=0), w), x)]


def _module_case(make):
    """Gradient of a scalarised module output with respect to its input and each parameter."""
    def build(rng):
        module, x_data = make(rng)
        out = module(Tensor(x_data))
        w = _w(rng, out.shape)
        cases = [(lambda t: _scal(module(t), w), Tensor(x_data))]
        for p in module.parameters():
            cases.append((lambda t: _scal(module(Tensor(x_data)), w), p))  # t is p itself
        return cases
    return build


def _mhsa(rng):
    from tevit.core.nn import MultiHeadAttention
    return MultiHeadAttention(rng, 8, 2), rng.normal(size=(2, 4, 8))


def _ffn(rng):
    from tevit.core.nn import FeedForward
    return FeedForward(rng, 6, 12), rng.normal(size=(3, 6))


def _block(rng):
    from tevit.backbone import TransformerBlock
    return TransformerBlock(rng, 8, 2, 2), rng.normal(size=(2, 5, 8))


def _query_interaction(rng):
    from tevit.head import QueryInteraction
    qi = QueryInteraction(rng, 8, 2)
    return (lambda q: qi(q, "stqi")), rng.normal(size=(3, 4, 8)), qi


def _stqi(rng):
    fn, x, mod = _query_interaction(rng)

    class Wrap:
        def __call__(self, t):
            return fn(t)

        def parameters(self):
            return mod.parameters()
    return Wrap(), x


def _dynamic_conv(rng):
    from tevit.head import DynamicConv
    # dim 16 gives a 4-wide bottleneck; a 2-wide layer norm is nearly constant (+-1) and starves gradients
    dc = DynamicConv(rng, 16, 3, 2)
    tokens = rng.normal(size=(2, 3, 9, 16))

    class Wrap:
        def __call__(self, q):
            return dc.interact(q, Tensor(tokens))

        def parameters(self):
            return dc.parameters()
    return Wrap(), rng.normal(size=(2, 3, 16))


def _msg_shift(rng):
    from tevit.backbone import ShiftSchedule, TokenSequence, msg_shift
    sched = ShiftSchedule(boundary_mode=("circular", "zero_fill")[int(rng.integers(0, 2))])
    patches = rng.normal(size=(4, 3, 2))

    class Wrap:
        def __call__(self, m):
            out = msg_shift(TokenSequence(Tensor(patches), m, 1), sched, "even")
            return out.messenger_tokens

        def parameters(self):
            return []
    return Wrap(), rng.normal(size=(4, 8, 2))


def _focal(rng):
    from tevit.losses import focal_loss
    y = (rng.uniform(size=(4, 3)) < 0.4).astype(np.float64)
    p = Tensor(rng.uniform(0.05, 0.95, size=(4, 3)))
    return [(lambda t: focal_loss(t, y).sum(), p)]


def _giou(rng):
    from tevit.losses import giou_loss
    def boxes(n):
        xy = rng.uniform(0, 10, size=(n, 2))
        wh = rng.uniform(1, 6, size=(n, 2))
        return np.concatenate([xy, xy + wh], axis=1)
    a, b = boxes(5), boxes(5)
    return [(lambda t: giou_loss(t, b).sum(), Tensor(a))]


def _l1(rng):
    from tevit.losses import l1_box_loss
    a = rng.normal(size=(5, 4))
    b = a + _away(rng, (5, 4))
    return [(lambda t: l1_box_loss(t, b).sum(), Tensor(a))]


def _dice(rng):
    from tevit.losses import dice_loss
    gt = rng.uniform(size=(3, 20)) < 0.5
    p = Tensor(rng.uniform(0.05, 0.95, size=(3, 20)))
    return [(lambda t: dice_loss(t, gt).sum(), p)]


def _upsample(rng):
    from tevit.losses import upsample_masks
    m = Tensor(rng.normal(size=(2, 3, 4, 4)))
    w = _w(rng, (2, 3, 16, 16))
    return [(lambda t: _scal(upsample_masks(t, (16, 16)), w), m)]


def _apply_deltas(rng):
    from tevit.head import apply_deltas
    xy = rng.uniform(10, 20, size=(4, 2))
    boxes = Tensor(np.concatenate([xy, xy + rng.uniform(5, 10, size=(4, 2))], axis=1))
    d = Tensor(rng.normal(scale=0.1, size=(4, 4)))
    w = _w(rng, (4, 4))
    return [(lambda t: _scal(apply_deltas(Tensor(boxes.data), t, (64, 64)), w), d),
            (lambda t: _scal(apply_deltas(t, Tensor(d.data), (64, 64)), w), boxes)]


def _roi_tokens(rng):
    from tevit.head import roi_tokens
    levels = [Tensor(rng.normal(size=(2, 3, 64 // s, 64 // s))) for s in (4, 8, 16, 32)]
    xy = rng.uniform(5, 30, size=(2, 3, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(8, 30, size=(2, 3, 2))], axis=-1)
    w = _w(rng, (2, 3, 9, 3))
    from tevit.head import fpn_levels
    cases = []
    for li in sorted(set(fpn_levels(boxes.reshape(-1, 4), (64, 64)).tolist())):
        def f(t, li=li):
            lv = [Tensor(l.data) for l in levels]
            lv[li] = t
            return _scal(roi_tokens(lv, boxes, (64, 64), 3)[0], w)
        cases.append((f, levels[li]))
    return cases


OP_CASES = {
    "add": binary(tt.add, (3, 4), (4,)),
    "sub": binary(tt.sub, (3, 4), (3, 1)),
    "mul": binary(tt.mul, (2, 3, 4), (3, 4)),
    "div": binary(tt.div, (3, 4), (3, 4), make_b=lambda rng, s: rng.uniform(0.5, 2.0, size=s)),
    "maximum": _maxmin(tt.maximum),
    "minimum": _maxmin(tt.minimum),
    "neg": unary(tt.neg),
    "exp": unary(tt.exp),
    "log": unary(tt.log, lambda rng: rng.uniform(0.2, 3.0, size=(3, 4))),
    "sqrt": unary(tt.sqrt, lambda rng: rng.uniform(0.2, 3.0, size=(3, 4))),
    "power": unary(lambda t: tt.power(t, 2.5), lambda rng: rng.uniform(0.2, 3.0, size=(3, 4))),
    "absolute": unary(tt.absolute, lambda rng: _away(rng, (3, 4))),
    "tanh": unary(tt.tanh),
    "sigmoid": unary(tt.sigmoid, lambda rng: rng.normal(scale=3, size=(3, 4))),
    "log_sigmoid": unary(tt.log_sigmoid, lambda rng: rng.normal(scale=3, size=(3, 4))),
    "relu": unary(tt.relu, lambda rng: _away(rng, (3, 4))),
    # -0.7518 is the stationary point of gelu, where relative error is ill-conditioned
    "gelu": unary(tt.gelu, lambda rng: _away(rng, (3, 4), kinks=(-0.7518,), scale=2)),
    "clip": unary(lambda t: tt.clip(t, -0.5, 0.7), lambda rng: _away(rng, (3, 4), kinks=(-0.5, 0.7))),
    "sum": unary(lambda t: tt.tsum(t, axis=1, keepdims=False)),
    "mean": unary(lambda t: tt.mean(t, axis=0, keepdims=True)),
    "reshape": unary(lambda t: tt.reshape(t, (2, 6))),
    "transpose": unary(lambda t: tt.transpose(t.reshape(3, 2, 2), (2, 0, 1))),
    "swapaxes": unary(lambda t: tt.swapaxes(t, 0, 1)),
    "index": _index_gather,
    "slice": unary(lambda t: t[1:, ::2]),
    "concat": _concat,
    "stack": _stack,
    "broadcast_to": unary(lambda t: tt.broadcast_to(t, (2, 3, 4))),
    "pad_zeros": unary(lambda t: tt.pad_zeros(t, 1, 2, 1)),
    "matmul": binary(tt.matmul, (2, 3, 4), (4, 5)),
    "linear": binary(lambda x, w: tt.linear(x, w, None), (3, 4), (4, 2)),
    "softmax": _softmax,
    "layer_norm": _layer_norm,
    "bilinear_gather": _bilinear,
    "mhsa": _module_case(_mhsa),
    "feed_forward": _module_case(_ffn),
    "transformer_block": _module_case(_block),
    "stqi_interaction": _module_case(_stqi),
    "dynamic_conv": _module_case(_dynamic_conv),
    "msg_shift": _module_case(_msg_shift),
    "focal_loss": _focal,
    "giou_loss": _giou,
    "l1_box_loss": _l1,
    "dice_loss": _dice,
    "upsample_masks": _upsample,
    "apply_deltas": _apply_deltas,
    "roi_tokens": _roi_tokens,
}


def run_case(name: str, seed: int) -> float:
    """Worst relative error over all inputs of one operation at one seed."""
    rng = np.random.default_rng(1000 + seed)
    worst = 0.0
    for f, x in OP_CASES[name](rng):
        worst = max(worst, finite_diff_check(f, x, STEP, max_elements=MAX_ELEMENTS, rng=rng))
    return worst


# -- end-to-end loss --------------------------------------------------------------

def tiny_model_config(interaction="stqi", messengers=4):
    from tevit.config import from_dict
    return from_dict({"model": {"image_size": [32, 32], "channels": [4, 8, 8, 8], "depths": [1, 1, 1, 1],
                                "heads": [1, 1, 1, 1], "mlp_ratio": 2, "messengers": messengers,
                                "num_queries": 3, "head_stages": 2, "head_dim": 16, "head_attn_heads": 2,
                                "head_ffn_ratio": 2, "roi_size": 2, "mask_dim": 4, "mask_level": 1,
                                "interaction": interaction},
                      "data": {"image_size": [32, 32], "min_radius": 4, "max_radius": 6}}, env={})


def end_to_end_check(seed: int, max_elements: int = 1) -> float:
    """Full loss (backbone, head cascade, matching fixed at the current optimum) against each parameter."""
    from tevit.losses import cost_matrix, total_loss
    from tevit.matching import hungarian
    from tevit.model import TeViT
    from tevit.synth import SyntheticSceneConfig, clip_ground_truth, render_video

    run = tiny_model_config()
    model = TeViT(run.model_config(), seed=seed)
    rng = np.random.default_rng(seed)
    # move the proposal boxes off the image border so their clamps sit in the interior
    model.head.proposals.data[:] = np.column_stack([rng.uniform(0.35, 0.65, size=(3, 2)),
                                                    rng.uniform(0.3, 0.6, size=(3, 2))])
    # unit-scale queries: at the 0.02 init, attention is nearly uniform and its weight gradients
    # shrink below the float64 resolution of a central difference
    model.head.queries.data[:] = rng.normal(size=model.head.queries.shape)
    # likewise the 1% class prior puts negative-class gradients near 1e-7; use a generic bias instead
    for stage in model.head.stages:
        stage.heads.cls.bias.data[:] = rng.normal(size=stage.heads.cls.bias.shape)
    scene = SyntheticSceneConfig(image_size=(32, 32), min_frames=3, max_frames=3, max_instances=2,
                                 min_radius=4, max_radius=6)
    video = render_video(scene, seed)
    gt = clip_ground_truth(video.gt, 0, 3)
    preds = model(video.frames)
    asg = [hungarian(cost_matrix(p, gt, run.loss, (32, 32))) for p in preds]

    # detached box coordinates are recorded on the first (analytic) call and replayed during the probes
    frozen = tt.frozen_constants()

    def loss(_param):
        with frozen:
            return total_loss(model(video.frames), gt, run.loss, (32, 32), assignments=asg)[0]

    worst = 0.0
    for p in model.parameters():
        worst = max(worst, finite_diff_check(loss, p, STEP, max_elements=max_elements,
                                             rng=np.random.default_rng(seed)))
    return worst
