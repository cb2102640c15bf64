"""Random gradient-check configurations for every differentiable primitive.

Each builder takes a generator and returns ``(loss_fn, params)``; the loss is
a fixed random projection of the primitive's output so every output entry
contributes to the gradient.
"""

import numpy as np

from lsca import diffcore as dc
from lsca.ctc import ctc_loss_op


def _t(a):
    return dc.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _project(out, rng_seed):
    r = np.random.default_rng(rng_seed).normal(size=out.shape)
    return dc.sum_all(dc.mul(out, r))


def _shape(rng, ndim=2, lo=1, hi=4):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=ndim))


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def case_add(rng):
    a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(1, 4)))
    return (lambda: _project(dc.add(a, b), 1)), [a, b]


def case_sub(rng):
    a, b = _t(rng.normal(size=(2, 3, 4))), _t(rng.normal(size=(4,)))
    return (lambda: _project(dc.sub(a, b), 2)), [a, b]


def case_mul(rng):
    a, b = _t(rng.normal(size=(3, 1))), _t(rng.normal(size=(3, 5)))
    return (lambda: _project(dc.mul(a, b), 3)), [a, b]


def case_scale(rng):
    a = _t(rng.normal(size=_shape(rng)))
    c = float(rng.normal())
    return (lambda: _project(dc.scale(a, c), 4)), [a]


def case_relu(rng):
    a = _t(_away_from_zero(rng, _shape(rng)))
    return (lambda: _project(dc.relu(a), 5)), [a]


def case_exp(rng):
    a = _t(rng.normal(size=_shape(rng)))
    return (lambda: _project(dc.exp(a), 6)), [a]


def case_log(rng):
    a = _t(rng.uniform(0.5, 2.0, size=_shape(rng)))
    return (lambda: _project(dc.log(a), 7)), [a]


def case_sum_all(rng):
    a = _t(rng.normal(size=_shape(rng, 3)))
    return (lambda: dc.scale(dc.sum_all(a), 1.7)), [a]


def case_mean_all(rng):
    a = _t(rng.normal(size=_shape(rng, 3)))
    return (lambda: dc.mul(dc.mean_all(a), dc.mean_all(a))), [a]


def case_reshape(rng):
    a = _t(rng.normal(size=(2, 6)))
    return (lambda: _project(dc.reshape(a, (3, 4)), 8)), [a]


def case_transpose(rng):
    a = _t(rng.normal(size=(2, 3, 4)))
    return (lambda: _project(dc.transpose(a, (2, 0, 1)), 9)), [a]


def case_matmul(rng):
    n, k, m = _shape(rng, 3)
    a, b = _t(rng.normal(size=(2, n, k))), _t(rng.normal(size=(2, k, m)))
    return (lambda: _project(dc.matmul(a, b), 10)), [a, b]


def case_affine(rng):
    d_in, d_out = _shape(rng, 2, 2, 5)
    x, w, b = _t(rng.normal(size=(2, 3, d_in))), _t(rng.normal(size=(d_in, d_out))), _t(rng.normal(size=(d_out,)))
    return (lambda: _project(dc.affine(x, w, b), 11)), [x, w, b]


def case_layer_norm(rng):
    d = int(rng.integers(2, 7))
    x, g, b = _t(rng.normal(size=(3, d))), _t(rng.normal(size=(d,))), _t(rng.normal(size=(d,)))
    return (lambda: _project(dc.layer_norm(x, g, b), 12)), [x, g, b]


def case_softmax(rng):
    a = _t(rng.normal(size=_shape(rng, 2, 2, 5)))
    return (lambda: _project(dc.softmax(a), 13)), [a]


def case_log_softmax(rng):
    a = _t(rng.normal(size=_shape(rng, 2, 2, 5)))
    return (lambda: _project(dc.log_softmax(a), 14)), [a]


def case_conv2d(rng):
    h, w_ = (int(s) for s in rng.integers(3, 8, size=2))
    cin, cout = (int(s) for s in rng.integers(1, 3, size=2))
    x = _t(rng.normal(size=(2, h, w_, cin)))
    w = _t(rng.normal(size=(cout, cin, 3, 3)))
    b = _t(rng.normal(size=(cout,)))
    return (lambda: _project(dc.conv2d(x, w, b), 15)), [x, w, b]


def case_dropout(rng):
    a = _t(rng.normal(size=(4, 5)))
    seed = int(rng.integers(1 << 30))
    return (lambda: _project(dc.dropout(a, 0.3, np.random.default_rng(seed), True), 16)), [a]


def case_feed_forward(rng):
    d, f = 4, 6
    x = _t(rng.normal(size=(2, 3, d)))
    w1, b1 = _t(rng.normal(size=(d, f))), _t(rng.normal(size=(f,)))
    w2, b2 = _t(rng.normal(size=(f, d))), _t(rng.normal(size=(d,)))
    return (lambda: _project(dc.feed_forward(x, w1, b1, w2, b2), 17)), [x, w1, b1, w2, b2]


def case_attention(rng):
    d, heads, t = 4, 2, int(rng.integers(2, 5))
    x = _t(rng.normal(size=(2, t, d)))
    ws = [_t(rng.normal(size=(d, d)) * 0.5) if i % 2 == 0 else _t(rng.normal(size=(d,)) * 0.1) for i in range(8)]
    mask = np.ones((2, t), dtype=bool)
    mask[1, t - 1] = False
    # the key bias shifts every score of a query equally, so its true gradient is zero
    ws[3].requires_grad = False
    return (lambda: _project(dc.multi_head_attention(x, *ws, num_heads=heads, key_mask=mask), 18)), [x] + ws[:3] + ws[4:]


def _frames_needed(y):
    return len(y) + sum(1 for i in range(1, len(y)) if y[i] == y[i - 1])


def case_ctc(rng):
    t = int(rng.integers(2, 7))
    v = int(rng.integers(2, 5))
    logits = _t(rng.normal(size=(2, t, v)))
    targets = []
    while len(targets) < 2:
        y = tuple(int(k) for k in rng.integers(1, v, size=int(rng.integers(0, 4))))
        if _frames_needed(y) <= t:
            targets.append(y)
    lens = [t, int(rng.integers(max(1, _frames_needed(targets[1])), t + 1))]
    weights = rng.uniform(0.2, 1.0, size=2)
    return (lambda: ctc_loss_op(logits, lens, targets, weights)[0]), [logits]


PRIMITIVE_CASES = {
    "add": case_add,
    "sub": case_sub,
    "mul": case_mul,
    "scale": case_scale,
    "relu": case_relu,
    "exp": case_exp,
    "log": case_log,
    "sum_all": case_sum_all,
    "mean_all": case_mean_all,
    "reshape": case_reshape,
    "transpose": case_transpose,
    "matmul": case_matmul,
    "affine": case_affine,
    "layer_norm": case_layer_norm,
    "softmax": case_softmax,
    "log_softmax": case_log_softmax,
    "conv2d": case_conv2d,
    "dropout": case_dropout,
    "feed_forward": case_feed_forward,
    "multi_head_attention": case_attention,
}


def worst_relative_error(builder, seed, max_entries=12):
    rng = np.random.default_rng(seed)
    fn, params = builder(rng)
    return max(dc.finite_diff_check(fn, p, epsilon=1e-5, max_entries=max_entries, rng=rng) for p in params)
