"""Mask-plan construction: block counts, guided start sampling, expansion.

Block starts are sampled *without replacement* with probability proportional
to a per-frame weight, renormalized over the not-yet-chosen indices after
every draw. The weight is the scorer confidence (``high``), its complement
(``low``), an alternating mix of the two (``mixed``), or uniform (``random``).
Each block then masks ``c`` consecutive frames from its start; blocks may
overlap, so realized coverage can fall below the nominal fraction and is
reported rather than enforced.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, LengthError
from .scorer import ConfidenceTrack

logger = logging.getLogger(__name__)

STRATEGIES = ("random", "high", "low", "mixed")


@dataclass
class MaskStrategy:
    kind: str = "high"
    mask_fraction: float = 0.40
    context: int = 10

    def validate(self):
        if self.kind not in STRATEGIES:
            raise ContractViolation(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if not (0.0 < self.mask_fraction <= 1.0):
            raise ContractViolation(f"mask_fraction must be in (0, 1], got {self.mask_fraction}")
        if self.context < 1:
            raise ContractViolation(f"context must be >= 1, got {self.context}")


@dataclass
class MaskPlan:
    starts: list[int]
    context: int
    length: int
    mask: np.ndarray = field(repr=False)  # bool, shape (length,)
    masked_indices: np.ndarray = field(repr=False)  # sorted int array


def num_blocks(length: int, fraction: float, context: int) -> int:
    """K = max(1, round(fraction * length / context)), rounding half up."""
    if length < context:
        raise LengthError(f"sequence of {length} frames shorter than one block of {context}")
    if not (0.0 < fraction <= 1.0):
        raise ContractViolation(f"fraction must be in (0, 1], got {fraction}")
    return max(1, math.floor(fraction * length / context + 0.5))


def _scores_array(scores) -> np.ndarray:
    if isinstance(scores, ConfidenceTrack):
        return scores.scores
    return np.asarray(scores, dtype=np.float32)


def _draw(weights: np.ndarray, count: int, taken: np.ndarray,
          rng: np.random.Generator) -> list[int]:
    """Inverse-CDF draws without replacement; ``taken`` is updated in place."""
    w = np.where(taken, 0.0, np.maximum(weights, 0.0)).astype(np.float64)
    out: list[int] = []
    for _ in range(count):
        total = w.sum()
        if total <= 0.0:
            remaining = np.flatnonzero(~taken)
            logger.warning("all remaining sampling weights are zero; "
                           "falling back to uniform over %d indices", remaining.size)
            idx = int(remaining[rng.integers(remaining.size)])
        else:
            u = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(w), u, side="right"))
            idx = min(idx, w.size - 1)
        out.append(idx)
        taken[idx] = True
        w[idx] = 0.0
    return out


def sample_starts(scores, count: int, kind: str, rng: np.random.Generator,
                  length: int | None = None) -> list[int]:
    """Sample ``count`` distinct block-start indices under a strategy.

    ``scores`` may be a ConfidenceTrack, an array, or None (random strategy
    only, in which case ``length`` is required).
    """
    if kind not in STRATEGIES:
        raise ContractViolation(f"unknown strategy {kind!r}")
    if kind == "random":
        if scores is not None:
            length = _scores_array(scores).size
        if length is None:
            raise ContractViolation("random sampling without scores requires an explicit length")
        weights_high = np.ones(length, dtype=np.float64)
    else:
        if scores is None:
            raise ContractViolation(f"strategy {kind!r} requires confidence scores")
        s = _scores_array(scores).astype(np.float64)
        if length is not None and s.size != length:
            raise ContractViolation(f"scores length {s.size} != sequence length {length}")
        length = s.size
        weights_high = s
    if count > length:
        raise ContractViolation(f"cannot draw {count} distinct starts from {length} frames")

    taken = np.zeros(length, dtype=bool)
    if kind == "mixed":
        n_high = -(-count // 2)  # odd counts favor the high half
        starts = _draw(weights_high, n_high, taken, rng)
        starts += _draw(1.0 - weights_high, count - n_high, taken, rng)
        return starts
    if kind == "low":
        return _draw(1.0 - weights_high, count, taken, rng)
    return _draw(weights_high, count, taken, rng)


def expand_mask(starts, context: int, length: int) -> MaskPlan:
    """Union of [start, start + context) blocks, clipped at the sequence end."""
    starts = [int(s) for s in starts]
    for s in starts:
        if not (0 <= s < length):
            raise ContractViolation(f"start {s} outside sequence of length {length}")
    mask = np.zeros(length, dtype=bool)
    for s in starts:
        mask[s:s + context] = True
    return MaskPlan(starts=starts, context=context, length=length, mask=mask,
                    masked_indices=np.flatnonzero(mask))


def make_plan(scores, length: int, strategy: MaskStrategy,
              rng: np.random.Generator) -> MaskPlan:
    strategy.validate()
    count = num_blocks(length, strategy.mask_fraction, strategy.context)
    starts = sample_starts(scores, count, strategy.kind, rng, length=length)
    return expand_mask(starts, strategy.context, length)


def mask_stats(plan: MaskPlan, scores) -> dict[str, float]:
    """Realized coverage and the mean confidence of the masked frames."""
    s = _scores_array(scores)
    if s.size != plan.length:
        raise ContractViolation(f"scores length {s.size} != plan length {plan.length}")
    covered = plan.masked_indices
    return {
        "realized_coverage": covered.size / plan.length,
        "mean_masked_confidence": float(s[covered].mean()) if covered.size else float("nan"),
    }
