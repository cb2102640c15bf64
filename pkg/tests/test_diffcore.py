import numpy as np
import pytest

from gradcases import PRIMITIVE_CASES, case_ctc, worst_relative_error
from lsca import diffcore as dc


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    for seed in range(5):
        assert worst_relative_error(PRIMITIVE_CASES[name], seed) < 1e-4, (name, seed)


def test_ctc_op_gradient():
    for seed in range(5):
        assert worst_relative_error(case_ctc, seed) < 1e-4


def test_backward_before_forward():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    g = dc.Graph()
    with pytest.raises(dc.GraphError, match="before forward"):
        g.backward(x, [x])


def test_unused_param_gets_zero_grad():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    y = dc.Tensor(np.ones(2), requires_grad=True)
    with dc.Graph() as g:
        loss = dc.sum_all(dc.mul(x, x))
    gx, gy = g.backward(loss, [x, y])
    assert np.array_equal(gx, 2 * np.ones(3))
    assert np.array_equal(gy, np.zeros(2))


def test_no_recording_outside_graph():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    assert dc.exp(x).node is None


def test_shared_input_accumulates():
    x = dc.Tensor(np.array([2.0]), requires_grad=True)
    with dc.Graph() as g:
        y = dc.add(x, x)
        loss = dc.sum_all(dc.mul(y, x))  # 2x^2
    (gx,) = g.backward(loss, [x])
    assert gx[0] == pytest.approx(8.0)


def test_softmax_masked_row_stays_finite():
    z = np.array([[0.0, -np.inf, 1.0]])
    p = dc._softmax(z, -1)
    assert np.all(np.isfinite(p)) and p[0, 1] == 0.0
    assert p.sum() == pytest.approx(1.0)


def test_layer_norm_forward():
    x = dc.Tensor(np.array([[1.0, 2.0, 3.0]]))
    y = dc.layer_norm(x, dc.Tensor(np.ones(3)), dc.Tensor(np.zeros(3)), eps=0.0)
    expect = (np.array([1.0, 2.0, 3.0]) - 2.0) / np.sqrt(2.0 / 3.0)
    assert np.allclose(y.data[0], expect)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 5, 6, 2))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = dc.conv2d(dc.Tensor(x), dc.Tensor(w), dc.Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho, wo = (5 - 1) // 2 + 1, (6 - 1) // 2 + 1
    ref = np.zeros((1, ho, wo, 3))
    for i in range(ho):
        for j in range(wo):
            patch = xp[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]  # (3, 3, cin)
            for c in range(3):
                ref[0, i, j, c] = np.sum(patch * w[c].transpose(1, 2, 0)) + b[c]
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_out_len():
    assert [dc.conv_out_len(n) for n in (1, 2, 3, 4, 5, 9)] == [1, 1, 2, 2, 3, 5]


def test_dropout_eval_identity_and_train_needs_rng():
    x = dc.Tensor(np.ones((2, 2)))
    assert dc.dropout(x, 0.5, None, train=False) is x
    with pytest.raises(dc.GraphError):
        dc.dropout(x, 0.5, None, train=True)


def test_dropout_inverted_scaling():
    x = dc.Tensor(np.ones(100000))
    y = dc.dropout(x, 0.25, np.random.default_rng(0), train=True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
    assert y.mean() == pytest.approx(1.0, abs=0.02)


def test_positional_encoding_values():
    pe = dc.positional_encoding(3, 4)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert pe[1, 0] == pytest.approx(np.sin(1.0))
    assert pe[1, 2] == pytest.approx(np.sin(1.0 / 100.0))


def test_attention_ignores_masked_keys():
    rng = np.random.default_rng(1)
    d = 4
    ws = [dc.Tensor(rng.normal(size=(d, d))) if i % 2 == 0 else dc.Tensor(np.zeros(d)) for i in range(8)]
    x = rng.normal(size=(1, 3, d))
    x2 = x.copy()
    x2[0, 2] = 100.0
    mask = np.array([[True, True, False]])
    a = dc.multi_head_attention(dc.Tensor(x), *ws, num_heads=2, key_mask=mask).data
    b = dc.multi_head_attention(dc.Tensor(x2), *ws, num_heads=2, key_mask=mask).data
    assert np.allclose(a[0, :2], b[0, :2])


def test_finite_diff_check_rejects_empty():
    with pytest.raises(dc.ShapeError):
        dc.finite_diff_check(lambda: dc.Tensor(0.0), dc.Tensor(np.zeros(0), requires_grad=True))


def test_attention_key_bias_gradient_is_zero():
    rng = np.random.default_rng(3)
    d = 4
    ws = [dc.Tensor(rng.normal(size=(d, d)) if i % 2 == 0 else rng.normal(size=d), requires_grad=True) for i in range(8)]
    x = dc.Tensor(rng.normal(size=(2, 3, d)))
    with dc.Graph() as g:
        loss = dc.sum_all(dc.mul(dc.multi_head_attention(x, *ws, num_heads=2), rng.normal(size=(2, 3, d))))
    grads = g.backward(loss, ws)
    assert np.abs(grads[3]).max() < 1e-12
    assert np.abs(grads[2]).max() > 1e-3
