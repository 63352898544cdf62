"""Difficulty and guideline-effectiveness arithmetic.

Pure functions over logprob lists; no I/O and no model access. All logs are
natural, so difficulties are nats/token and score checks against ln 2 stay
exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .models import FormatError, StepScore

# Difficulty floor: keeps log-ratios finite on perfectly predicted actions.
DIFFICULTY_FLOOR = 1e-6

GE_SIGN_DEFAULT = "default"
GE_SIGN_EQ5 = "eq5"
GE_SIGNS = (GE_SIGN_DEFAULT, GE_SIGN_EQ5)


@dataclass(frozen=True)
class TokenDistribution:
    """Top-k alternatives at one position plus the unreported residual mass."""

    top: tuple[tuple[str, float], ...]
    residual_mass: float

    def __post_init__(self) -> None:
        total = 0.0
        for token, logprob in self.top:
            if logprob > 0:
                raise ValueError(f"logprob for {token!r} must be <= 0")
            total += math.exp(logprob)
        if total > 1.0 + 1e-9:
            raise ValueError(f"top probabilities sum to {total} > 1")
        if not 0.0 <= self.residual_mass <= 1.0:
            raise ValueError("residual_mass must be in [0,1]")
        object.__setattr__(self, "top", tuple(self.top))


def step_difficulty(logprobs: Sequence[float]) -> float:
    """Average negated token logprob, floored at DIFFICULTY_FLOOR."""
    if not logprobs:
        raise ValueError("step has no token logprobs")
    for lp in logprobs:
        if lp > 0:
            raise ValueError(f"token logprob {lp} must be <= 0")
    return max(DIFFICULTY_FLOOR, -sum(logprobs) / len(logprobs))


def ge_score(per_step: Iterable[tuple[float, float]], sign: str = GE_SIGN_DEFAULT) -> float:
    """Aggregate per-step (d_i, d_g) pairs into one guideline-effectiveness value.

    Under the default convention a positive score means the guideline lowered
    difficulty on average (d_g < d_i). ``sign="eq5"`` negates the result; it
    never reorders anything else, so callers sorting "lowest first" must flip
    direction themselves when using it.
    """
    if sign not in GE_SIGNS:
        raise ValueError(f"unknown ge sign convention {sign!r}")
    pairs = list(per_step)
    if not pairs:
        raise ValueError("per_step must be non-empty")
    total = 0.0
    for d_i, d_g in pairs:
        if d_i <= 0 or d_g <= 0:
            raise ValueError(f"difficulties must be positive, got ({d_i}, {d_g})")
        # log(d_i) - log(d_g), not log(d_i/d_g): keeps swap antisymmetry exact.
        total += math.log(d_i) - math.log(d_g)
    value = total / len(pairs)
    return -value if sign == GE_SIGN_EQ5 else value


def mean_entropy(dists: Sequence[TokenDistribution]) -> float:
    """Mean per-position entropy of top-k distributions with a residual bucket."""
    if not dists:
        raise ValueError("no token distributions given")
    total = 0.0
    for dist in dists:
        h = 0.0
        for _token, logprob in dist.top:
            p = math.exp(logprob)
            if p > 0.0:
                h -= p * math.log(p)
        r = dist.residual_mass
        if r > 0.0:
            h -= r * math.log(r)
        total += max(0.0, h)
    return total / len(dists)


def aggregate_trajectory(
    with_g: Sequence[Sequence[float]],
    without_g: Sequence[Sequence[float]],
) -> tuple[list[StepScore], float]:
    """Combine per-step logprob lists from both prompt variants.

    Token counts may differ between variants (the tokenizer sees different
    contexts); only the step count must match. Returns the per-step scores
    and the default-convention ge value.
    """
    if len(with_g) != len(without_g):
        raise FormatError(
            f"variant step counts differ: with guideline {len(with_g)}, "
            f"without {len(without_g)}"
        )
    if not with_g:
        raise FormatError("trajectory has no steps to aggregate")
    per_step = [
        StepScore(
            d_i=step_difficulty(wo),
            d_g=step_difficulty(wi),
            n_tokens=len(wi),
        )
        for wi, wo in zip(with_g, without_g)
    ]
    ge = ge_score([(s.d_i, s.d_g) for s in per_step])
    return per_step, ge
