"""CTC, label-smoothed cross-entropy, and their weighted combination."""

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ContractError, UnalignableError
from ..numerics.tensor import Tensor, _wrap

NEG_INF = -np.inf


def ctc_min_frames(target):
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _lse3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))


def ctc_forward_backward(log_probs, targets, in_lens=None, blank=0):
    """Batched CTC negative log-likelihood and its gradient w.r.t. ``log_probs``.

    ``log_probs`` is ``(B, T, V)`` (or ``(T, V)``) of per-frame log
    probabilities; ``targets`` a list of label sequences. Returns
    ``(losses[B], grads[B, T, V])``. Unalignable utterances get loss ``inf``
    and zero gradient.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    single = lp.ndim == 2
    if single:
        lp = lp[None]
        targets = [targets]
    b, t_max, v = lp.shape
    in_lens = np.full(b, t_max) if in_lens is None else np.asarray(in_lens)
    targets = [list(map(int, y)) for y in targets]
    s_max = 2 * max((len(y) for y in targets), default=0) + 1

    ext = np.full((b, s_max), blank, dtype=np.int64)
    s_len = np.empty(b, dtype=np.int64)
    skip = np.zeros((b, s_max), dtype=bool)
    for i, y in enumerate(targets):
        ext[i, 1 : 2 * len(y) : 2] = y
        s_len[i] = 2 * len(y) + 1
        for s in range(3, s_len[i], 2):
            skip[i, s] = ext[i, s] != ext[i, s - 2]
    state_ok = np.arange(s_max)[None, :] < s_len[:, None]
    # emissions per (b, t, s)
    em = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (b, t_max, s_max)), axis=2)
    em = np.where(state_ok[:, None, :], em, NEG_INF)

    alpha = np.full((b, t_max, s_max), NEG_INF)
    alpha[:, 0, 0] = em[:, 0, 0]
    if s_max > 1:
        alpha[:, 0, 1] = em[:, 0, 1]
    pad1 = np.full((b, 1), NEG_INF)
    pad2 = np.full((b, 2), NEG_INF)
    for t in range(1, t_max):
        a = alpha[:, t - 1]
        p1 = np.concatenate([pad1, a], axis=1)[:, :s_max]
        p2 = np.where(skip, np.concatenate([pad2, a], axis=1)[:, :s_max], NEG_INF)
        alpha[:, t] = _lse3(a, p1, p2) + em[:, t]

    beta = np.full((b, t_max, s_max), NEG_INF)
    rows = np.arange(b)
    last = in_lens - 1
    beta[rows, last, s_len - 1] = em[rows, last, s_len - 1]
    has2 = s_len >= 2
    beta[rows[has2], last[has2], s_len[has2] - 2] = em[rows[has2], last[has2], s_len[has2] - 2]
    skip_next = np.concatenate([skip, np.zeros((b, 2), bool)], axis=1)[:, 2:]
    for t in range(t_max - 2, -1, -1):
        nb = beta[:, t + 1]
        n1 = np.concatenate([nb, pad1], axis=1)[:, 1:]
        n2 = np.where(skip_next, np.concatenate([nb, pad2], axis=1)[:, 2:], NEG_INF)
        val = _lse3(nb, n1, n2) + em[:, t]
        active = (t < last)[:, None]
        beta[:, t] = np.where(active, val, beta[:, t])

    fin = alpha[rows, last]
    end1 = fin[rows, s_len - 1]
    end2 = np.where(has2, fin[rows, np.maximum(s_len - 2, 0)], NEG_INF)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_like = np.logaddexp(end1, end2)

    required = np.array([ctc_min_frames(y) for y in targets])
    ok = required <= in_lens
    losses = np.where(ok, -log_like, np.inf)

    grads = np.zeros_like(lp)
    with np.errstate(invalid="ignore"):
        occ = alpha + beta - em  # log posterior occupancy * p
    time_ok = np.arange(t_max)[None, :] < in_lens[:, None]
    for i in np.flatnonzero(ok):
        post = np.exp(occ[i] + losses[i])  # (T, S)
        post[~time_ok[i]] = 0.0
        post = np.nan_to_num(post[:, : s_len[i]])
        g = np.zeros((t_max, v))
        for s in range(s_len[i]):
            g[:, ext[i, s]] -= post[:, s]
        grads[i] = g
    if single:
        return losses[0], grads[0]
    return losses, grads


def ctc_loss(log_probs, targets, in_lens=None, blank=0, zero_infinity=False):
    """Mean CTC loss over the batch as a differentiable scalar.

    Raises :class:`UnalignableError` for a target longer than its input
    unless ``zero_infinity`` drops such utterances from the mean.
    """
    log_probs = _wrap(log_probs)
    x = log_probs.data
    single = x.ndim == 2
    losses, grads = ctc_forward_backward(x, targets, in_lens, blank)
    losses = np.atleast_1d(losses)
    grads = grads[None] if single else grads
    # +inf means no alignment exists; NaN is left to propagate to the caller
    bad = np.flatnonzero(np.isposinf(losses))
    if len(bad) and not zero_infinity:
        i = int(bad[0])
        t_avail = x.shape[-2] if in_lens is None else int(np.asarray(in_lens)[i])
        tgt = targets if single else targets[i]
        raise UnalignableError(i, t_avail, ctc_min_frames(tgt))
    keep = ~np.isposinf(losses) if zero_infinity else np.ones(len(losses), bool)
    n = max(int(keep.sum()), 1)
    value = losses[keep].sum() / n
    grads = grads * keep[:, None, None] / n
    if single:
        grads = grads[0]
    return Tensor._from_op(np.asarray(value), (log_probs,), lambda g: (g * grads,))


def ce_loss(logits, targets, mask=None, smoothing=0.0):
    """Token-mean cross-entropy against targets smoothed by ``smoothing``.

    The target distribution puts ``1 - smoothing`` on the reference token
    and spreads ``smoothing`` evenly over the other ``V - 1`` tokens.
    ``mask`` (same shape as ``targets``) excludes padding positions.
    """
    logits = _wrap(logits)
    z = logits.data
    v = z.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(targets.shape, bool) if mask is None else np.asarray(mask, bool)
    n = int(mask.sum())
    if n == 0:
        raise ContractError("ce_loss: every position is padding")
    if np.any((targets[mask] < 0) | (targets[mask] >= v)):
        raise ContractError("ce_loss: target id outside vocabulary")
    shifted = z - z.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    q = np.full(z.shape, smoothing / (v - 1) if v > 1 else 0.0)
    tgt = np.where(mask, targets, 0)
    np.put_along_axis(q, tgt[..., None], 1.0 - smoothing, axis=-1)
    q *= mask[..., None]
    # q * logp with q == 0 contributes nothing even where logp == -inf
    contrib = np.where(q > 0, q * logp, 0.0)
    value = -contrib.sum() / n
    p = np.exp(logp)

    def back(g):
        return (g * (p * mask[..., None] - q) / n,)

    return Tensor._from_op(np.asarray(value), (logits,), back)


def joint_loss(l_ctc, l_ce, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"ctc weight must lie in [0, 1], got {alpha}")
    return _wrap(l_ctc) * alpha + _wrap(l_ce) * (1.0 - alpha)


@dataclass
class LossOutput:
    l_asr: float
    l_ctc: float
    l_ce: float
    alpha: float
