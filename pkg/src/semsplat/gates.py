"""Hard Concrete gates, the L0 penalty and composed drop probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .scene import GaussianCloud

EPS_UNIFORM = 1e-6


@dataclass(frozen=True)
class HardConcreteParams:
    tau: float = 2.0 / 3.0
    low: float = -0.1
    high: float = 1.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not (self.low < 0 and self.high > 1):
            raise ValueError(f"stretch bounds must satisfy low < 0 < 1 < high, got ({self.low}, {self.high})")

    @property
    def threshold(self) -> float:
        return -self.low / (self.high - self.low)


def sample_gates(gate_logits, params: HardConcreteParams, rng: np.random.Generator, return_grad=False):
    """Draw stretched-and-clamped Hard Concrete gates, one per logit.

    With ``return_grad`` also returns d(gate)/d(logit), which is zero where
    the clamp saturates.
    """
    gate_logits = np.asarray(gate_logits, dtype=np.float64)
    u = rng.uniform(EPS_UNIFORM, 1.0 - EPS_UNIFORM, size=gate_logits.shape)
    s = expit((np.log(u) - np.log1p(-u) + gate_logits) / params.tau)
    stretched = s * (params.high - params.low) + params.low
    gates = np.clip(stretched, 0.0, 1.0)
    if not return_grad:
        return gates
    inside = (stretched > 0.0) & (stretched < 1.0)
    grad = np.where(inside, (params.high - params.low) * s * (1.0 - s) / params.tau, 0.0)
    return gates, grad


def sample_gate(gate_logit: float, params: HardConcreteParams, rng: np.random.Generator) -> float:
    return float(sample_gates(np.array([gate_logit]), params, rng)[0])


def p_nonzero(gate_logits, params: HardConcreteParams):
    t = params.threshold
    return expit((np.asarray(gate_logits, dtype=np.float64) - params.tau * np.log(t / (1.0 - t))) / params.tau)


def l0_loss(cloud: GaussianCloud, params: HardConcreteParams):
    """Mean non-zero probability over the cloud and its gradient per gate logit."""
    if len(cloud) == 0:
        raise ValueError("L0 loss of an empty cloud")
    p = p_nonzero(cloud.gate_logits, params)
    grad = p * (1.0 - p) / params.tau / len(p)
    return float(p.mean()), grad


def drop_probability(p_base, p_confidence, gate_logits, params: HardConcreteParams):
    p_learned = 1.0 - p_nonzero(gate_logits, params)
    return np.clip(p_base * (1.0 - np.asarray(p_confidence)) * p_learned, 0.0, 1.0)


def prune(cloud: GaussianCloud, p_drop, rng: np.random.Generator, mode="stochastic", threshold=0.5):
    """Drop each point with probability ``p_drop`` (or when it exceeds ``threshold``).

    Never empties the cloud: if every point would go, the one with the lowest
    drop probability (lowest index on ties) survives. Returns the new cloud
    and the kept indices.
    """
    p_drop = np.asarray(p_drop, dtype=np.float64)
    if p_drop.shape != (len(cloud),):
        raise ValueError(f"expected {len(cloud)} drop probabilities, got {p_drop.shape}")
    if mode == "stochastic":
        keep = rng.uniform(size=len(p_drop)) >= p_drop
    elif mode == "threshold":
        keep = p_drop < threshold
    else:
        raise ValueError(f"unknown drop mode {mode!r}")
    kept = np.flatnonzero(keep)
    if len(kept) == 0 and len(p_drop) > 0:
        kept = np.array([int(np.argmin(p_drop))])
    return cloud.subset(kept), kept
