"""Exact Bayes filter over the finite post-jump state set.

Implements the discounted joint density of (inter-jump time, next hidden
state, observation), the one-step Bayes update, its kernel-regularized
variant, and the belief recursion driven by an observed event log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import PopdmpModel, RelaxedControl, flow_path, lambda_path

__all__ = [
    "Belief",
    "RegularizationKernel",
    "ImpossibleObservationError",
    "q_tilde",
    "q_tilde_sx",
    "update",
    "update_regularized",
    "filter_trajectory",
]

_DENOM_FLOOR = 1e-300


class ImpossibleObservationError(ValueError):
    """The observation has zero likelihood under the current belief."""


@dataclass(frozen=True, eq=False)
class Belief:
    """Probability vector over the post-jump states.

    Construction renormalizes when the sum deviates from one by at most
    1e-8 and rejects anything worse; entries must be nonnegative.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if p.size == 0 or not np.all(np.isfinite(p)):
            raise ValueError("belief must be a non-empty finite vector")
        if np.any(p < -1e-12):
            raise ValueError("belief entries must be nonnegative")
        p = np.maximum(p, 0.0)
        s = p.sum()
        if abs(s - 1.0) > 1e-8:
            raise ValueError(f"belief sums to {s!r}, outside the 1e-8 renormalization window")
        object.__setattr__(self, "probs", p / s)

    def __len__(self) -> int:
        return self.probs.size

    @staticmethod
    def dirac(index: int, d: int) -> "Belief":
        p = np.zeros(d)
        p[index] = 1.0
        return Belief(p)

    @staticmethod
    def uniform(d: int) -> "Belief":
        return Belief(np.full(d, 1.0 / d))


def as_belief(value, d: int | None = None) -> Belief:
    if isinstance(value, Belief):
        return value
    b = Belief(np.asarray(value, dtype=float))
    if d is not None and len(b) != d:
        raise ValueError(f"belief has length {len(b)}, expected {d}")
    return b


@dataclass(frozen=True)
class RegularizationKernel:
    """Smoothing kernel h_sigma for the regularized filter.

    The gaussian kernel is truncated at five bandwidths (mass outside is
    below 6e-7); the epanechnikov kernel has compact support [-sigma, sigma].
    """

    kind: str = "gaussian"
    sigma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("gaussian", "epanechnikov"):
            raise ValueError(f"unknown regularization kernel {self.kind!r}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError("bandwidth sigma must be positive")

    @property
    def halfwidth(self) -> float:
        return 5.0 * self.sigma if self.kind == "gaussian" else self.sigma

    def density(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "gaussian":
            return np.exp(-0.5 * (u / self.sigma) ** 2) / (self.sigma * math.sqrt(2.0 * math.pi))
        return np.maximum(0.75 / self.sigma * (1.0 - (u / self.sigma) ** 2), 0.0)


# ---------------------------------------------------------------------------
# joint density


def _state_idx(model: PopdmpModel, y) -> int:
    if isinstance(y, (int, np.integer)):
        i = int(y)
        if not (0 <= i < model.n_states):
            raise IndexError(f"state index {i} out of range")
        return i
    return model.state_index(y)


def _qtilde_matrices(model: PopdmpModel, control: RelaxedControl, times: np.ndarray,
                     x=None) -> np.ndarray:
    """q-tilde evaluated on a time grid: out[k, i, j] = q(t_k, y_j, x | y_i, r).

    With ``x=None`` the observation-density factor is omitted.
    """
    ts = np.asarray(times, dtype=float)
    d = model.n_states
    out = np.empty((ts.size, d, d))
    piece_of = np.array([control.piece_index_at(t) for t in ts])
    for i, y in enumerate(model.post_jump_states):
        lam_int = lambda_path(model, y, control, ts)
        egamma = np.exp(-model.discount * ts - lam_int)
        pos = flow_path(model, y, control, ts)
        hk = np.zeros((ts.size, d))
        for p in np.unique(piece_of):
            sel = piece_of == p
            mix = control.pieces[p]
            for a, w in zip(mix.actions, mix.weights):
                av = np.asarray(a, dtype=float)
                lam = np.asarray(model.hazard(pos[sel], av), dtype=float)
                rows = np.asarray(model.jump_kernel(pos[sel], av), dtype=float)
                hk[sel] += w * lam[:, None] * rows
        out[:, i, :] = egamma[:, None] * hk
    if x is not None:
        noisew = np.array(
            [model.noise.density_at(np.asarray(x, dtype=float) - y) for y in model.post_jump_states]
        )
        out = out * noisew[None, None, :]
    return out


def q_tilde(model: PopdmpModel, s: float, y_next, x, y, control: RelaxedControl) -> float:
    """Joint density of (jump time, next state, observation) with the
    discount absorbed; zero whenever x - y_next is not a noise offset."""
    if s < 0:
        raise ValueError("q_tilde requires s >= 0")
    i = _state_idx(model, y)
    j = _state_idx(model, y_next)
    m = _qtilde_matrices(model, control, np.array([float(s)]), x=x)[0]
    return float(m[i, j])


def q_tilde_sx(model: PopdmpModel, s: float, x, y, control: RelaxedControl) -> float:
    """Marginal density over next states: sum_j q_tilde(s, y_j, x | y, r)."""
    if s < 0:
        raise ValueError("q_tilde_sx requires s >= 0")
    i = _state_idx(model, y)
    m = _qtilde_matrices(model, control, np.array([float(s)]), x=x)[0]
    return float(m[i, :].sum())


# ---------------------------------------------------------------------------
# Bayes updates


def update(model: PopdmpModel, rho, control: RelaxedControl, s: float, x) -> Belief:
    """One-step Bayes update of the belief given (control, jump time,
    observation)."""
    if s < 0:
        raise ValueError("update requires s >= 0")
    probs = as_belief(rho, model.n_states).probs
    m = _qtilde_matrices(model, control, np.array([float(s)]), x=x)[0]
    numer = probs @ m
    denom = numer.sum()
    if denom < _DENOM_FLOOR:
        raise ImpossibleObservationError(
            f"observation {x!r} at s={s} has zero likelihood under the current belief"
        )
    return Belief(numer / denom)


def update_regularized(model: PopdmpModel, rho, control: RelaxedControl, s: float, x,
                       kernel: RegularizationKernel) -> Belief:
    """Bayes update with the jump-time argument smoothed by h_sigma.

    The numerator integrates q_tilde(u, ...) h_sigma(s - u) over
    u in [max(0, s - w), s + w] by composite Simpson, w the kernel support
    halfwidth.
    """
    if s < 0:
        raise ValueError("update_regularized requires s >= 0")
    probs = as_belief(rho, model.n_states).probs
    w = kernel.halfwidth
    lo, hi = max(0.0, s - w), s + w
    step = min(kernel.sigma / 8.0, 0.02)
    npan = max(8, 2 * math.ceil((hi - lo) / (2.0 * step)))
    nodes = np.linspace(lo, hi, npan + 1)
    ws = np.full(npan + 1, 2.0)
    ws[1::2] = 4.0
    ws[0] = ws[-1] = 1.0
    ws *= (hi - lo) / npan / 3.0
    coeff = ws * kernel.density(s - nodes)
    mats = _qtilde_matrices(model, control, nodes, x=x)
    numer = np.einsum("k,i,kij->j", coeff, probs, mats)
    denom = numer.sum()
    if denom < _DENOM_FLOOR:
        raise ImpossibleObservationError(
            f"observation {x!r} at s={s} has zero likelihood under the current belief"
        )
    return Belief(numer / denom)


def filter_trajectory(model: PopdmpModel, x0, events,
                      kernel: RegularizationKernel | None = None) -> list[Belief]:
    """Belief recursion mu_0, mu_1, ... along an observed event log.

    ``events`` is a sequence of (control, inter-jump time, observation)
    triples; ``mu_0 = Q_0(.|x0)``.  A zero-likelihood observation raises
    ImpossibleObservationError tagged with the event index.
    """
    mu = Belief(np.asarray(model.initial_kernel(np.atleast_1d(np.asarray(x0, dtype=float))),
                           dtype=float))
    out = [mu]
    for n, (control, s, x) in enumerate(events):
        if s <= 0:
            raise ValueError(f"event {n}: inter-jump time must be positive")
        try:
            if kernel is None:
                mu = update(model, mu, control, float(s), x)
            else:
                mu = update_regularized(model, mu, control, float(s), x, kernel)
        except ImpossibleObservationError as err:
            raise ImpossibleObservationError(f"event {n}: {err}") from None
        out.append(mu)
    return out
