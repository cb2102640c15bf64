"""Connectionist temporal classification: loss, gradient and greedy decoding.

All forward-backward accumulation is done in the log domain.  ``-inf``
marks unreachable states; it never turns into NaN because every
log-sum-exp subtracts a finite maximum or short-circuits to ``-inf``.
"""

from __future__ import annotations

import itertools
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .vocab import BLANK, LabelSequence

NEG_INF = -np.inf


class CTCError(ValueError):
    pass


def min_frames(y: Sequence[int]) -> int:
    """Fewest frames that can emit ``y`` (one extra per adjacent repeat)."""
    y = list(y)
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def is_feasible(num_frames: int, y: Sequence[int]) -> bool:
    return num_frames >= min_frames(y)


def _extend(y: Sequence[int], blank: int = BLANK) -> np.ndarray:
    ext = np.full(2 * len(y) + 1, blank, dtype=np.int64)
    ext[1::2] = y
    return ext


def _lse(*terms: np.ndarray) -> np.ndarray:
    stack = np.stack(terms)
    m = stack.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.exp(stack - safe).sum(axis=0))
    return np.where(np.isfinite(m), out, NEG_INF)


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    """Shift along the last axis: out[..., s] = a[..., s - k], padding with -inf."""
    out = np.full_like(a, NEG_INF)
    n = a.shape[-1]
    if k > 0 and k < n:
        out[..., k:] = a[..., : n - k]
    elif k < 0 and -k < n:
        out[..., : n + k] = a[..., -k:]
    elif k == 0:
        out[...] = a
    return out


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    allow = np.zeros(len(ext), dtype=bool)
    if len(ext) > 2:
        allow[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allow


def ctc_loss(logp: np.ndarray, y: Sequence[int], blank: int = BLANK) -> Tuple[float, np.ndarray]:
    """Negative log-likelihood of ``y`` under per-frame log-probabilities.

    Returns ``(loss, grad)``.  ``grad`` is the derivative with respect to
    the unnormalised scores that produced ``logp`` through a log-softmax,
    ``p_t(k) - gamma_t(k)`` where gamma is the alignment posterior.  An
    infeasible target gives ``(inf, zeros)``.
    """
    logp = np.asarray(logp, dtype=np.float64)
    y = list(y.ids if isinstance(y, LabelSequence) else y)
    t_len, v = logp.shape
    if any(k == blank for k in y):
        raise CTCError("blank inside the target")
    if t_len == 0 or not is_feasible(t_len, y):
        return math.inf, np.zeros_like(logp)
    ext = _extend(y, blank)
    s = len(ext)
    skip = _skip_allowed(ext, blank)
    emit = logp[:, ext]  # (T, S)

    alpha = np.full((t_len, s), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        jump = np.where(skip, _shift(prev, 2), NEG_INF)
        alpha[t] = _lse(prev, _shift(prev, 1), jump) + emit[t]

    beta = np.full((t_len, s), NEG_INF)
    beta[-1, -1] = 0.0
    if s > 1:
        beta[-1, -2] = 0.0
    skip_next = np.zeros_like(skip)
    skip_next[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        jump = np.where(skip_next, _shift(nxt, -2), NEG_INF)
        beta[t] = _lse(nxt, _shift(nxt, -1), jump)

    log_like = float(_lse(alpha[-1, -1], alpha[-1, -2]) if s > 1 else alpha[-1, -1])
    if not np.isfinite(log_like):
        return math.inf, np.zeros_like(logp)
    post = np.exp(alpha + beta - log_like)  # (T, S)
    gamma = np.zeros_like(logp)
    for j, k in enumerate(ext):
        gamma[:, k] += post[:, j]
    return -log_like, np.exp(logp) - gamma


def ctc_loss_batch(
    logp: np.ndarray,
    frame_lens: Sequence[int],
    targets: Sequence[Sequence[int]],
    blank: int = BLANK,
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`ctc_loss` over a padded (B, T, V) batch.

    Returns per-utterance losses (inf where infeasible) and the (B, T, V)
    gradient with zeros on padded frames and infeasible utterances.
    """
    logp = np.asarray(logp, dtype=np.float64)
    bsz, t_max, v = logp.shape
    frame_lens = np.asarray(frame_lens, dtype=np.int64)
    targets = [list(y) for y in targets]
    s_lens = np.array([2 * len(y) + 1 for y in targets], dtype=np.int64)
    s_max = int(s_lens.max())
    ext = np.full((bsz, s_max), blank, dtype=np.int64)
    for b, y in enumerate(targets):
        if any(k == blank for k in y):
            raise CTCError("blank inside the target")
        ext[b, 1 : 2 * len(y) : 2] = y
    valid_s = np.arange(s_max)[None, :] < s_lens[:, None]
    skip = np.zeros((bsz, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    skip &= valid_s
    skip_next = np.zeros_like(skip)
    skip_next[:, :-2] = skip[:, 2:]

    emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (bsz, t_max, s_max)), axis=2)
    emit = np.where(valid_s[:, None, :], emit, NEG_INF)

    alpha = np.full((t_max, bsz, s_max), NEG_INF)
    alpha[0, :, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[0, :, 1] = emit[:, 0, 1]
    for t in range(1, t_max):
        prev = alpha[t - 1]
        jump = np.where(skip, _shift(prev, 2), NEG_INF)
        cur = _lse(prev, _shift(prev, 1), jump) + emit[:, t]
        active = (t < frame_lens)[:, None]
        alpha[t] = np.where(active, cur, NEG_INF)

    rows = np.arange(bsz)
    last_t = np.maximum(frame_lens - 1, 0)
    a_last = alpha[last_t, rows]  # (B, S)
    end1 = a_last[rows, s_lens - 1]
    end2 = np.where(s_lens > 1, a_last[rows, np.maximum(s_lens - 2, 0)], NEG_INF)
    log_like = _lse(end1, end2)

    beta = np.full((t_max, bsz, s_max), NEG_INF)
    init = np.full((bsz, s_max), NEG_INF)
    init[rows, s_lens - 1] = 0.0
    init[rows[s_lens > 1], (s_lens - 2)[s_lens > 1]] = 0.0
    for t in range(t_max - 1, -1, -1):
        if t < t_max - 1:
            nxt = beta[t + 1] + emit[:, t + 1]
            jump = np.where(skip_next, _shift(nxt, -2), NEG_INF)
            cur = _lse(nxt, _shift(nxt, -1), jump)
        else:
            cur = np.full((bsz, s_max), NEG_INF)
        is_last = (t == frame_lens - 1)[:, None]
        inside = (t < frame_lens - 1)[:, None]
        beta[t] = np.where(is_last, init, np.where(inside, cur, NEG_INF))

    feasible = np.array(
        [is_feasible(int(n), y) and n > 0 for n, y in zip(frame_lens, targets)]
    ) & np.isfinite(log_like)
    losses = np.where(feasible, -log_like, np.inf)

    ll = np.where(feasible, log_like, 0.0)
    with np.errstate(invalid="ignore"):
        post = np.exp(alpha.transpose(1, 0, 2) + beta.transpose(1, 0, 2) - ll[:, None, None])
    post = np.where(np.isfinite(post), post, 0.0)  # (B, T, S)
    onehot = np.zeros((bsz, s_max, v))
    onehot[rows[:, None], np.arange(s_max)[None, :], ext] = valid_s
    gamma = np.einsum("bts,bsv->btv", post, onehot)
    frame_mask = (np.arange(t_max)[None, :] < frame_lens[:, None])[:, :, None]
    grad = np.where(frame_mask & feasible[:, None, None], np.exp(logp) - gamma, 0.0)
    return losses, grad


def ctc_loss_op(
    logits: dc.Tensor,
    frame_lens: Sequence[int],
    targets: Sequence[Sequence[int]],
    weights: Sequence[float],
) -> Tuple[dc.Tensor, np.ndarray]:
    """Differentiable weighted sum of per-utterance CTC losses over logits.

    ``weights`` scale each utterance's loss (zero to skip it).  Returns the
    scalar loss tensor and the raw per-utterance losses.
    """
    data = logits.data
    logp = dc._log_softmax(data.astype(np.float64), -1)
    losses, grad = ctc_loss_batch(logp, frame_lens, targets)
    w = np.asarray(weights, dtype=np.float64)
    used = w != 0
    if np.any(used & ~np.isfinite(losses)):
        raise CTCError("weighted utterance is infeasible")
    total = float(np.sum(np.where(used, losses, 0.0) * w))
    g_scaled = (grad * w[:, None, None]).astype(data.dtype)
    out = dc.make_op("ctc_loss", np.asarray(total, dtype=data.dtype), (logits,), lambda g: (g * g_scaled,))
    return out, losses


def ctc_brute_force(p: np.ndarray, y: Sequence[int], blank: int = BLANK, limit: int = 10**7) -> float:
    """Sum over every frame labelling that collapses to ``y``."""
    p = np.asarray(p, dtype=np.float64)
    y = tuple(y.ids if isinstance(y, LabelSequence) else y)
    t_len, v = p.shape
    if v**t_len > limit:
        raise CTCError(f"instance too large for enumeration: {v}^{t_len}")
    if len(y) > t_len:
        return 0.0
    total = 0.0
    for path in itertools.product(range(v), repeat=t_len):
        if _collapse(path, blank) == y:
            total += math.prod(p[t, k] for t, k in enumerate(path))
    return total


def _collapse(frames: Sequence[int], blank: int = BLANK) -> Tuple[int, ...]:
    out = []
    prev = None
    for k in frames:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return tuple(out)


def collapse_alignment(frames: Sequence[int], vocab_id: str = "mix", blank: int = BLANK) -> LabelSequence:
    """Merge adjacent repeats, then drop blanks."""
    return LabelSequence(vocab_id, _collapse(frames, blank))


def greedy_decode(p: np.ndarray, vocab_id: str = "mix", length: Optional[int] = None) -> LabelSequence:
    """Per-frame argmax (first maximum wins) followed by collapse."""
    p = np.asarray(p)
    if length is not None:
        p = p[:length]
    return collapse_alignment(np.argmax(p, axis=-1), vocab_id)
