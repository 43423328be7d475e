"""Training objectives.

Plain cross-entropy for the identity and attribute heads, an
attribute-conditioned label smoothing loss for the verification head, and
the weighted total objective.  The scalar functions operate on explicit
probability vectors and are the reference surface; the ``*_from_logits``
variants build autodiff graphs for batched training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ALSParams:
    """Label-smoothing knobs: theta picks the pair weight, alpha shifts the
    probability inside the extra log term, beta scales that term."""

    theta: float = 0.1
    alpha: float = 0.1
    beta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must be in [0, 1], got {self.theta}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total objective: identity, attributes, verification."""

    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass(frozen=True)
class PairContext:
    """Identity and (color, type) labels of both members of a pair."""

    id1: int
    id2: int
    attr1: tuple[int, int]
    attr2: tuple[int, int]


def _check_simplex(probabilities, target):
    q = np.asarray(probabilities, dtype=np.float64)
    if q.ndim != 1:
        raise NumericError(f"probabilities must be a vector, got shape {q.shape}")
    if abs(q.sum() - 1.0) > 1e-5:
        raise NumericError(f"probabilities sum to {q.sum():.6f}, expected 1")
    if not 0 <= target < q.shape[0]:
        raise IndexError(f"target {target} out of range for {q.shape[0]} classes")
    return q


def cross_entropy(probabilities, target):
    """-log q[target], with q floored at 1e-12 before the log."""
    q = _check_simplex(probabilities, target)
    return float(-np.log(max(q[target], PROB_FLOOR)))


def epsilon_weight(ctx, theta):
    """Pair weight of the smoothing term.

    Same identity wins first (such pairs necessarily share attributes) and
    gets 1 - theta.  Different identities with equal color AND type get
    theta.  Everything else gets 0.  An attribute is only considered equal
    when both sides carry a real label (>= 0); the -1 sentinel never
    matches.
    """
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"theta must be in [0, 1], got {theta}")
    if ctx.id1 == ctx.id2:
        return 1.0 - theta
    c1, t1 = ctx.attr1
    c2, t2 = ctx.attr2
    if c1 == c2 and t1 == t2 and c1 >= 0 and t1 >= 0:
        return theta
    return 0.0


def als_loss(probabilities, target, ctx, params):
    """Cross-entropy plus the attribute-conditioned smoothing term.

    loss = -log q[t] + beta * eps(ctx) * (-log(alpha + q[t])), with both
    logs floored at 1e-12.  With beta = 0 this is exactly cross_entropy.
    """
    q = _check_simplex(probabilities, target)
    ce = float(-np.log(max(q[target], PROB_FLOOR)))
    eps = epsilon_weight(ctx, params.theta)
    extra = float(-np.log(max(params.alpha + q[target], PROB_FLOOR)))
    return ce + params.beta * eps * extra


def total_loss(l_category, l_color, l_type, l_verify, weights):
    """Weighted sum: w1 * category + w2 * (color + type) + w3 * verify."""
    components = (l_category, l_color, l_type, l_verify)
    if not all(np.isfinite(c) for c in components):
        raise NumericError(f"non-finite loss component in {components}")
    return (weights.lambda1 * l_category
            + weights.lambda2 * (l_color + l_type)
            + weights.lambda3 * l_verify)


def cross_entropy_from_logits(logits, targets, valid=None):
    """Mean cross-entropy over a batch, as an autodiff graph.

    ``valid`` optionally masks rows out of the mean (used for records
    whose attribute label is the -1 sentinel).  With no valid rows the
    result is exactly 0.
    """
    targets = np.asarray(targets)
    q = ad.softmax(logits, axis=1)
    if valid is None:
        picked = ad.take_per_row(q, targets)
        return ad.tmean(-ad.log(ad.clip_min(picked, PROB_FLOOR)))
    valid = np.asarray(valid, dtype=bool)
    safe = np.where(valid, targets, 0)
    picked = ad.take_per_row(q, safe)
    per_row = -ad.log(ad.clip_min(picked, PROB_FLOOR))
    w = valid.astype(np.float64)
    return ad.tsum(per_row * w) * (1.0 / max(w.sum(), 1.0))


def als_loss_from_logits(logits, targets, eps_weights, alpha, beta):
    """Batched smoothing loss through softmax; mean over pairs.

    ``eps_weights`` holds one epsilon_weight value per row, treated as a
    constant.
    """
    targets = np.asarray(targets)
    eps = np.asarray(eps_weights, dtype=np.float64)
    q = ad.softmax(logits, axis=1)
    qt = ad.take_per_row(q, targets)
    ce = -ad.log(ad.clip_min(qt, PROB_FLOOR))
    extra = -ad.log(ad.clip_min(qt + alpha, PROB_FLOOR))
    return ad.tmean(ce + (beta * eps) * extra)
