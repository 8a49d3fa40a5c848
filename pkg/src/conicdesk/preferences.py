"""Prospect-theory functionals on finite discrete laws.

Gains and losses are evaluated separately through utilities u+ / u- and
probability distortions w+ / w-; the distorted expectation of each side is
the exact layer-cake sum over the distinct utility levels, which is closed
form for discrete distributions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

PROB_TOL = 1e-12

# below this curvature the standard distortion form stops being increasing
MIN_GAMMA = 0.28


@dataclass(frozen=True)
class UtilityPair:
    """Power utilities for gains and losses, the gain side capped from above.

    u+(x) = min(x**gain_exponent, gain_cap) and
    u-(x) = loss_scale * x**loss_exponent, both on x >= 0.
    """

    gain_exponent: float = 0.88
    gain_cap: float = 1e6
    loss_exponent: float = 0.88
    loss_scale: float = 2.25

    def __post_init__(self):
        if not 0 < self.gain_exponent <= 1:
            raise ValueError("gain exponent must lie in (0, 1]")
        if not 0 < self.loss_exponent <= 1:
            raise ValueError("loss exponent must lie in (0, 1]")
        if not self.gain_cap > 0:
            raise ValueError("gain cap must be positive")
        if not self.loss_scale > 0:
            raise ValueError("loss scale must be positive")

    @property
    def bounded(self):
        return np.isfinite(self.gain_cap)

    def gain(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return np.minimum(x ** self.gain_exponent, self.gain_cap)

    def loss(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return self.loss_scale * x ** self.loss_exponent

    @classmethod
    def identity(cls, cap=1e6):
        return cls(gain_exponent=1.0, gain_cap=cap, loss_exponent=1.0, loss_scale=1.0)


def _distort(p, gamma):
    p = np.asarray(p, dtype=float)
    if gamma is None:
        return p
    num = p ** gamma
    return num / (num + (1.0 - p) ** gamma) ** (1.0 / gamma)


@dataclass(frozen=True)
class DistortionPair:
    """Probability distortions for the gain and loss sides.

    Each side uses w(p) = p**g / (p**g + (1-p)**g)**(1/g) with curvature g,
    or the identity when the curvature is None. Curvatures are restricted
    to (0.28, 1], the range on which this form is increasing.
    """

    gamma_gain: float | None = 0.61
    gamma_loss: float | None = 0.69

    def __post_init__(self):
        for g in (self.gamma_gain, self.gamma_loss):
            if g is not None and not MIN_GAMMA < g <= 1:
                raise ValueError(f"distortion curvature {g} outside ({MIN_GAMMA}, 1]")

    def gain(self, p):
        return _distort(p, self.gamma_gain)

    def loss(self, p):
        return _distort(p, self.gamma_loss)

    @classmethod
    def identity(cls):
        return cls(gamma_gain=None, gamma_loss=None)


@dataclass(frozen=True)
class CPTSpec:
    """Bundle of utilities and distortions defining the investor's preferences."""

    utility: UtilityPair = UtilityPair()
    distortion: DistortionPair = DistortionPair()

    def value(self, dist):
        return cpt_value(dist, self.utility, self.distortion)

    @classmethod
    def identity(cls, cap=1e6):
        return cls(UtilityPair.identity(cap=cap), DistortionPair.identity())


class DiscreteDistribution:
    """Finite law: outcomes with nonnegative probabilities summing to one.

    Outcomes are scalars for the prospect functionals; vector outcomes (one
    row per atom) are accepted for plain expected utility on terminal
    positions.
    """

    def __init__(self, outcomes, probabilities):
        out = np.asarray(outcomes, dtype=float)
        probs = np.asarray(probabilities, dtype=float)
        if out.ndim not in (1, 2):
            raise ValueError("outcomes must be a vector or a matrix of row vectors")
        if probs.ndim != 1 or len(probs) != len(out):
            raise ValueError("probabilities must match outcomes one to one")
        if np.any(probs < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        if not np.all(np.isfinite(probs)):
            raise ValueError("probabilities must be finite")
        self.outcomes = out
        self.probabilities = probs

    def __len__(self):
        return len(self.probabilities)

    @property
    def is_scalar(self):
        return self.outcomes.ndim == 1

    @staticmethod
    def mixture(components, weights):
        """Exact convex combination of laws: concatenated atoms with scaled weights."""
        weights = np.asarray(weights, dtype=float)
        if len(weights) != len(components) or len(components) == 0:
            raise ValueError("one weight per component required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > PROB_TOL:
            raise ValueError("weights must be a probability vector")
        outs = np.concatenate([c.outcomes for c in components])
        probs = np.concatenate([w * c.probabilities for c, w in zip(components, weights)])
        return DiscreteDistribution(outs, probs)

    def __repr__(self):
        return f"DiscreteDistribution(n={len(self)})"


def _require_scalar(dist):
    if not dist.is_scalar:
        raise ValueError("prospect functionals need scalar outcomes")


def _layer_cake(values, probs, distort):
    # exact Choquet sum over sorted distinct nonnegative levels
    uniq, inverse = np.unique(values, return_inverse=True)
    mass = np.zeros(len(uniq))
    np.add.at(mass, inverse, probs)
    tail = mass[::-1].cumsum()[::-1]  # P(value >= uniq[i])
    prev = np.concatenate([[0.0], uniq[:-1]])
    return float(np.sum((uniq - prev) * distort(tail)))


def v_plus(dist: DiscreteDistribution, utility: UtilityPair, distortion: DistortionPair):
    """Distorted expectation of u+ applied to the positive parts of the outcomes."""
    _require_scalar(dist)
    values = utility.gain(np.maximum(dist.outcomes, 0.0))
    return _layer_cake(values, dist.probabilities, distortion.gain)


def v_minus(dist: DiscreteDistribution, utility: UtilityPair, distortion: DistortionPair):
    """Distorted expectation of u- applied to the negative parts of the outcomes."""
    _require_scalar(dist)
    values = utility.loss(np.maximum(-dist.outcomes, 0.0))
    return _layer_cake(values, dist.probabilities, distortion.loss)


def cpt_value(dist: DiscreteDistribution, utility: UtilityPair, distortion: DistortionPair):
    """Prospect value: gain side minus loss side.

    Well defined for every finite law; an unbounded gain utility is allowed
    here but flagged, since the existence theory behind the optimizers
    needs the bound.
    """
    if not utility.bounded:
        warnings.warn("gain utility is unbounded above; optimizer guarantees need a cap",
                      stacklevel=2)
    return v_plus(dist, utility, distortion) - v_minus(dist, utility, distortion)


def cpt_value_arrays(outcomes, probs, utility: UtilityPair, distortion: DistortionPair):
    """Prospect value straight from outcome/probability arrays.

    Unvalidated fast path for optimizer inner loops; identical arithmetic to
    ``cpt_value`` on the corresponding distribution.
    """
    outcomes = np.asarray(outcomes, dtype=float)
    gains = utility.gain(outcomes)
    losses = utility.loss(-outcomes)
    return _layer_cake(gains, probs, distortion.gain) \
        - _layer_cake(losses, probs, distortion.loss)


def expected_utility(dist: DiscreteDistribution, u):
    """Plain expected utility sum(p_i u(x_i)); u may act on vector outcomes."""
    total = 0.0
    for x, p in zip(dist.outcomes, dist.probabilities):
        total += p * float(u(x))
    return total
