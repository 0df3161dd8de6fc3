"""The three privacy operations applied to every outgoing update.

P1 adds Laplace noise, P2 keeps a randomized top-k of the coordinates and
P3 periodically re-draws the sign of every surviving coordinate.
``apply_pipeline`` runs clip -> P1 -> P2 -> P3 in that order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .grad_core import GradientVector, as_array, clip_l2

log = logging.getLogger(__name__)

# scale below this counts as "no noise" (epsilon -> infinity)
NOISE_FLOOR = 1e-300


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float = 0.1
    sensitivity: float | None = None  # None -> 2 * clip
    delta: float = 0.0
    gamma: float = 0.07
    t: int = 100
    clip: float = 1.0
    beta: float = 0.9
    exact_sign_counts: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma ∈ (0,1] required, got {self.gamma}")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError(f"beta ∈ [0,1] required, got {self.beta}")
        if not (0.0 <= self.delta < 1.0):
            raise ValueError(f"delta ∈ [0,1) required, got {self.delta}")
        if int(self.t) != self.t or self.t < 0:
            raise ValueError(f"t must be a non-negative integer, got {self.t}")
        if not self.clip > 0:
            raise ValueError(f"clip must be > 0, got {self.clip}")
        if self.sensitivity is not None and not self.sensitivity > 0:
            raise ValueError(f"sensitivity must be > 0, got {self.sensitivity}")

    @property
    def delta_f(self) -> float:
        return 2.0 * self.clip if self.sensitivity is None else float(self.sensitivity)

    @property
    def noise_scale(self) -> float:
        return self.delta_f / self.epsilon

    def check_dimension(self, d: int) -> None:
        """Enforce delta << 1/d, read as delta < 1/(10 d)."""
        if self.delta >= 1.0 / (10 * d):
            raise ValueError(
                f"delta must satisfy delta < 1/(10·d) = {1.0 / (10 * d):.3g} "
                f"for d={d}, got {self.delta}")

    def with_(self, **kw) -> "PrivacyParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class PipelineTrace:
    pre_norm: float
    post_p1_norm: float
    kept_k: int
    signs_flipped: int
    round: int


def subsample_size(gamma: float, d: int) -> int:
    """k = max(1, floor(gamma * d)); a tiny slack absorbs float error in gamma*d."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma ∈ (0,1] required, got {gamma}")
    return max(1, min(d, int(math.floor(gamma * d + 1e-9))))


def laplace_perturb(g, params: PrivacyParams, rng: np.random.Generator) -> GradientVector:
    if not params.epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {params.epsilon}")
    v = as_array(g)
    out = GradientVector(v)  # validates finiteness
    scale = params.noise_scale
    if scale < NOISE_FLOOR or v.size == 0:
        return out
    return GradientVector(v + rng.laplace(0.0, scale, size=v.shape))


def pas_subsample(g, gamma: float, rng: np.random.Generator) -> GradientVector:
    """Keep the k coordinates with the largest theta_i * g_i**2, theta_i ~ U[0, gamma].

    Kept values pass through untouched; everything else becomes 0.
    """
    v = as_array(g)
    d = v.shape[0]
    if d < 1:
        raise ValueError("pas_subsample needs d >= 1")
    k = subsample_size(gamma, d)
    perm = rng.permutation(d)
    theta = rng.uniform(0.0, gamma, size=d)
    scores = theta * v * v
    # stable sort over the permuted order: ties go to the earlier permuted slot
    order = np.argsort(-scores[perm], kind="stable")
    keep = perm[order[:k]]
    out = np.zeros(d)
    out[keep] = v[keep]
    return GradientVector(out)


def gsr_reset(g, t: int, round: int, rng: np.random.Generator,
              exact_counts: bool = False) -> GradientVector:
    """Re-draw the sign of each nonzero entry on rounds where ``round % t == 0``.

    Each sign is +1 with probability pos/(pos+neg), independently. With
    ``exact_counts`` the current sign pattern is shuffled instead, which keeps
    the positive/negative totals fixed on every draw.
    """
    if round < 0 or t < 0:
        raise ValueError(f"round and t must be >= 0 (got round={round}, t={t})")
    v = as_array(g)
    out = GradientVector(v)
    if t == 0 or round % t != 0:
        return out
    nz = np.flatnonzero(v)
    pos = int(np.count_nonzero(v > 0))
    neg = int(np.count_nonzero(v < 0))
    if pos + neg == 0:
        log.debug("gsr_reset: all-zero input at round %d, nothing to re-sign", round)
        return out
    if exact_counts:
        signs = np.sign(v[nz])
        signs = signs[rng.permutation(nz.size)]
    else:
        signs = np.where(rng.random(nz.size) < pos / (pos + neg), 1.0, -1.0)
    res = v.copy()
    res[nz] = signs * np.abs(v[nz])
    return GradientVector(res)


def apply_pipeline(g, params: PrivacyParams, round: int,
                   rng: np.random.Generator) -> tuple[GradientVector, PipelineTrace]:
    gv = GradientVector(as_array(g))
    pre_norm = gv.norm()
    clipped = clip_l2(gv, params.clip)
    noisy = laplace_perturb(clipped, params, rng)
    post_p1 = noisy.norm()
    sampled = pas_subsample(noisy, params.gamma, rng)
    reset = gsr_reset(sampled, params.t, round, rng, params.exact_sign_counts)
    flipped = int(np.count_nonzero(np.sign(reset.values) != np.sign(sampled.values)))
    trace = PipelineTrace(
        pre_norm=pre_norm,
        post_p1_norm=post_p1,
        kept_k=subsample_size(params.gamma, gv.d),
        signs_flipped=flipped,
        round=round,
    )
    return reset, trace
