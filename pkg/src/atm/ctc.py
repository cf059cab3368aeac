"""CTC loss: log-space forward dynamic program plus alpha-beta gradients.

The dynamic program runs over the blank-expanded target (blank between and
around every label) in float64 for numerical headroom; the loss enters the
autodiff graph as a fused primitive whose backward is the standard
occupancy-posterior formula with respect to the per-frame log-probabilities.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, InfeasibleAlignment

NEG_INF = -np.inf


def expand_with_blanks(target, blank: int) -> np.ndarray:
    out = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    out[1::2] = np.asarray(target, dtype=np.int64)
    return out


def min_feasible_frames(target) -> int:
    """Fewest frames admitting a valid alignment: one per label plus one
    separator blank per adjacent repeat."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _skip_mask(states: np.ndarray, blank: int) -> np.ndarray:
    allow = np.zeros(states.size, dtype=bool)
    if states.size > 2:
        allow[2:] = (states[2:] != blank) & (states[2:] != states[:-2])
    return allow


def ctc_forward_f64(log_probs: np.ndarray, target, blank: int) -> tuple[float, np.ndarray]:
    """Forward pass; returns (log P(target | inputs), alpha table)."""
    t_len, n_classes = log_probs.shape
    states = expand_with_blanks(target, blank)
    s_len = states.size
    allow = _skip_mask(states, blank)

    alphas = np.full((t_len, s_len), NEG_INF, dtype=np.float64)
    alphas[0, 0] = log_probs[0, states[0]]
    if s_len > 1:
        alphas[0, 1] = log_probs[0, states[1]]
    for t in range(1, t_len):
        prev = alphas[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        skip = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
        skip = np.where(allow, skip, NEG_INF)
        alphas[t] = np.logaddexp(np.logaddexp(stay, step), skip) + log_probs[t, states]
    if s_len > 1:
        log_p = np.logaddexp(alphas[-1, -1], alphas[-1, -2])
    else:
        log_p = alphas[-1, -1]
    return float(log_p), alphas


def ctc_neg_log_likelihood(log_probs: np.ndarray, target, blank: int) -> float:
    """-log P(target | inputs), computed in float64."""
    _check_feasible(log_probs.shape[0], target)
    log_p, _ = ctc_forward_f64(np.asarray(log_probs, dtype=np.float64), target, blank)
    return -log_p


def ctc_grad_f64(log_probs: np.ndarray, target, blank: int) -> tuple[float, np.ndarray]:
    """Returns (nll, d nll / d log_probs) via the alpha-beta occupancy posterior."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    t_len, n_classes = log_probs.shape
    states = expand_with_blanks(target, blank)
    s_len = states.size
    allow = _skip_mask(states, blank)

    log_p, alphas = ctc_forward_f64(log_probs, target, blank)

    betas = np.full((t_len, s_len), NEG_INF, dtype=np.float64)
    betas[-1, -1] = 0.0
    if s_len > 1:
        betas[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = betas[t + 1] + log_probs[t + 1, states]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))
        skip = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))
        skip_ok = np.concatenate((allow[2:], [False, False]))
        skip = np.where(skip_ok, skip, NEG_INF)
        betas[t] = np.logaddexp(np.logaddexp(stay, step), skip)

    # Occupancy gamma[t, s]; rows sum to 1. Fold states sharing a class id.
    gamma = np.exp(alphas + betas - log_p)
    grad = np.zeros_like(log_probs)
    np.add.at(grad, (slice(None), states), gamma)
    return -log_p, -grad


def _check_feasible(t_len: int, target):
    need = min_feasible_frames(target)
    if t_len < need:
        raise InfeasibleAlignment(
            f"{t_len} frames cannot align a target of length {len(list(target))} "
            f"(needs >= {need})")


def ctc_loss(logits: Tensor, target, blank: int | None = None) -> Tensor:
    """Engine op: -log P(target | softmax(logits)) with gradients to logits."""
    if logits.ndim != 2:
        raise ContractViolation(f"ctc_loss expects (frames, classes) logits, got {logits.shape}")
    t_len, n_classes = logits.shape
    blank = n_classes - 1 if blank is None else blank
    for lab in target:
        if not (0 <= lab < n_classes) or lab == blank:
            raise ContractViolation(f"target label {lab} invalid for {n_classes} classes (blank={blank})")
    _check_feasible(t_len, target)

    lp = ad.log_softmax(logits, axis=-1)
    nll, grad = ctc_grad_f64(lp.data, target, blank)
    grad32 = grad.astype(lp.data.dtype)

    def vjp(g):
        return (g * grad32,)

    return Tensor(np.asarray(nll), op="ctc", parents=(lp,), vjp=vjp)


def greedy_decode(frame_scores: np.ndarray, blank: int | None = None) -> list[int]:
    """Best-path decode: framewise argmax, collapse repeats, strip blanks."""
    ids = np.argmax(frame_scores, axis=-1)
    blank = frame_scores.shape[-1] - 1 if blank is None else blank
    out: list[int] = []
    prev = -1
    for i in ids:
        if i != prev and i != blank:
            out.append(int(i))
        prev = i
    return out


def edit_distance(ref, hyp) -> int:
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]
