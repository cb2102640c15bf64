import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import enumerate_alignments, random_ctc_instance as random_instance

from lsca.ctc import (
    collapse_alignment,
    ctc_brute_force,
    ctc_loss,
    ctc_loss_batch,
    greedy_decode,
    is_feasible,
)


def test_single_frame():
    p = np.array([[0.1, 0.9]])
    loss, _ = ctc_loss(np.log(p), (1,))
    assert loss == pytest.approx(-math.log(0.9), abs=1e-12)


def test_two_frame_example():
    p = np.array([[0.4, 0.6], [0.5, 0.5]])
    loss, _ = ctc_loss(np.log(p), (1,))
    assert loss == pytest.approx(0.2231435513142097, abs=1e-12)  # -ln 0.8


def test_repeat_needs_blank():
    p = np.full((2, 2), 0.5)
    assert not is_feasible(2, (1, 1))
    loss, grad = ctc_loss(np.log(p), (1, 1))
    assert loss == math.inf and np.all(grad == 0)


def test_empty_target_is_all_blank():
    p = np.array([[0.7, 0.3], [0.2, 0.8]])
    loss, _ = ctc_loss(np.log(p), ())
    assert loss == pytest.approx(-math.log(0.7 * 0.2), abs=1e-12)


def test_matches_independent_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p, y = random_instance(rng)
        ref = enumerate_alignments(p, y)
        loss, _ = ctc_loss(np.log(p), y)
        if ref == 0.0:
            assert loss == math.inf
        else:
            assert abs(math.exp(-loss) - ref) / ref <= 1e-9


def test_library_brute_force_agrees_with_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p, y = random_instance(rng)
        assert ctc_brute_force(p, y) == pytest.approx(enumerate_alignments(p, y), rel=1e-12, abs=1e-300)


def test_brute_force_small_cases():
    assert ctc_brute_force(np.array([[0.5, 0.5]]), (1,)) == pytest.approx(0.5)
    assert ctc_brute_force(np.full((1, 3), 1 / 3), (1, 2)) == 0.0


def test_gradient_is_posterior_difference():
    # gradient w.r.t. logits equals p - gamma; rows sum to zero
    rng = np.random.default_rng(2)
    p, _ = random_instance(rng)
    p = np.vstack([p, p])
    _, grad = ctc_loss(np.log(p), (1,))
    assert np.allclose(grad.sum(1), 0.0, atol=1e-12)


def test_batch_matches_single():
    rng = np.random.default_rng(3)
    logp = np.log(rng.dirichlet(np.ones(4), size=(3, 6)))
    lens = [6, 4, 5]
    ys = [(1, 2), (3,), (2, 2)]
    losses, grad = ctc_loss_batch(logp, lens, ys)
    for b in range(3):
        l1, g1 = ctc_loss(logp[b, : lens[b]], ys[b])
        assert losses[b] == pytest.approx(l1, rel=1e-12)
        assert np.allclose(grad[b, : lens[b]], g1, atol=1e-12)
        assert np.all(grad[b, lens[b] :] == 0)


@pytest.mark.parametrize(
    "frames,expect",
    [((0, 1, 1, 0, 2), (1, 2)), ((1, 0, 1), (1, 1)), ((0, 0), ()), ((3, 3, 3), (3,))],
)
def test_collapse(frames, expect):
    assert collapse_alignment(frames).ids == expect


def test_greedy_tie_goes_to_lowest_index():
    p = np.zeros((1, 6))
    p[0, 2] = p[0, 5] = 0.5
    assert greedy_decode(p).ids == (2,)


def test_greedy_decode_example():
    p = np.eye(4)[[0, 1, 1, 2]]
    assert greedy_decode(p).ids == (1, 2)
    assert greedy_decode(np.eye(3)[[0, 0]]).ids == ()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=12))
def test_collapse_idempotent_and_blank_free(frames):
    once = collapse_alignment(frames).ids
    assert 0 not in once
    no_repeats = all(once[i] != once[i - 1] for i in range(1, len(once)))
    if no_repeats:
        assert collapse_alignment(once).ids == once


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_probability_bounded(seed):
    p, y = random_instance(np.random.default_rng(seed))
    loss, _ = ctc_loss(np.log(p), y)
    assert loss >= -1e-12
    assert (loss == math.inf) == (not is_feasible(p.shape[0], y))
