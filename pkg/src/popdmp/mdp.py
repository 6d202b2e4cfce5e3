"""Filtered-MDP layer over the belief simplex.

Provides the one-stage cost of a relaxed control from a post-jump state and
from a belief, the expectation of a grid value function under the belief
transition kernel, and the L / T Bellman operators minimized over a finite
control family.

All time integrals here run on one shared grid over [0, t_max] with composite
Simpson weights.  With piecewise-constant controls whose hazard, kernel or
cost actually depends on the action, the integrand jumps at control
breakpoints; those jumps are not panel-aligned, costing O(h) locally.  Models
with uncontrolled local characteristics (the usual case here) have continuous
integrands and keep the full Simpson order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson

from .filtering import RegularizationKernel, as_belief
from .grid import ValueGrid, interpolate_batch
from .model import PopdmpModel, RelaxedControl, flow_path

__all__ = [
    "StageQuadrature",
    "ControlFamily",
    "CandidateTables",
    "StageContext",
    "switching_family",
    "build_tables",
    "stage_cost_g",
    "stage_cost_belief",
    "expected_next_value",
    "transition_mass",
    "L_operator",
    "T_operator",
]

DEFAULT_STAGE_STEP = 0.01
DEFAULT_TAIL_TOL = 1e-8
_DENOM_FLOOR = 1e-300


@dataclass(frozen=True)
class StageQuadrature:
    """Truncated time grid for the stage integrals.

    ``t_max`` is chosen so the neglected tail of both the discounted cost
    integral and the transition mass sits below ``tail_tol``; the integrand
    decays at least like exp(-(discount + hazard_lower) t).
    """

    t_max: float
    h: float = DEFAULT_STAGE_STEP

    def __post_init__(self):
        if not (self.t_max > 0 and self.h > 0):
            raise ValueError("t_max and h must be positive")

    @staticmethod
    def for_model(model: PopdmpModel, h: float = DEFAULT_STAGE_STEP,
                  tail_tol: float = DEFAULT_TAIL_TOL) -> "StageQuadrature":
        decay = model.discount + model.hazard_bounds[0]
        scale = max(model.cost_max, model.hazard_bounds[1], 1.0)
        t_max = math.log(scale / (decay * tail_tol)) / decay
        return StageQuadrature(t_max=t_max, h=h)

    def times_and_weights(self) -> tuple[np.ndarray, np.ndarray]:
        npan = max(2, 2 * math.ceil(self.t_max / (2.0 * self.h)))
        ts = np.linspace(0.0, self.t_max, npan + 1)
        w = np.full(npan + 1, 2.0)
        w[1::2] = 4.0
        w[0] = w[-1] = 1.0
        w *= self.t_max / npan / 3.0
        return ts, w


@dataclass(frozen=True)
class ControlFamily:
    """Finite candidate set standing in for the full relaxed-control space."""

    candidates: tuple[RelaxedControl, ...]

    def __post_init__(self):
        if len(self.candidates) == 0:
            raise ValueError("control family must be non-empty")

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, k: int) -> RelaxedControl:
        return self.candidates[k]


def switch_control(action: float, tau: float, after: float = 0.0) -> RelaxedControl:
    """Hold ``action`` on [0, tau), then ``after`` forever."""
    return RelaxedControl.from_pieces([(0.0, float(action)), (float(tau), float(after))])


def switching_family(actions=(-1.0, 0.0, 1.0), taus=None) -> ControlFamily:
    """Single-switch bang family over scalar actions.

    Candidate order (it breaks argmin ties, lowest index first): the zero
    constant, then for each nonzero action in descending order all switch
    times ascending, then the nonzero constants in descending order.
    Zero-action switches coincide with the zero constant and are not
    duplicated.
    """
    if taus is None:
        taus = [k / 10.0 for k in range(1, 21)]
    acts = [float(a) for a in actions]
    nonzero = sorted([a for a in acts if a != 0.0], reverse=True)
    cands: list[RelaxedControl] = []
    if 0.0 in acts:
        cands.append(RelaxedControl.constant(0.0))
    for a in nonzero:
        for tau in taus:
            cands.append(switch_control(a, tau))
    for a in nonzero:
        cands.append(RelaxedControl.constant(a))
    return ControlFamily(tuple(cands))


# ---------------------------------------------------------------------------
# per-candidate tables


@dataclass(eq=False)
class CandidateTables:
    """Everything about one control that is independent of beliefs and of the
    value function: flow positions, mixture hazard/cost, the discounted
    hazard-kernel tensor and the per-state stage cost."""

    control: RelaxedControl
    times: np.ndarray        # (n,)
    weights: np.ndarray      # (n,) composite Simpson weights on [0, t_max]
    step: float
    positions: np.ndarray    # (d, n, D)
    lam_mix: np.ndarray      # (d, n)
    cost_mix: np.ndarray     # (d, n)
    egamma: np.ndarray       # (d, n) exp(-beta t - Lambda)
    dmat: np.ndarray         # (d, d, n): dmat[i, u, j] = egamma[i, j] * sum_a w lam Q(u)
    g: np.ndarray            # (d,) stage costs


def build_tables(model: PopdmpModel, control: RelaxedControl,
                 stage: StageQuadrature) -> CandidateTables:
    model.check_control(control)
    ts, W = stage.times_and_weights()
    n = ts.size
    d = model.n_states
    D = model.space_dim
    piece_of = np.array([control.piece_index_at(t) for t in ts])
    pos = np.empty((d, n, D))
    for i, y in enumerate(model.post_jump_states):
        pos[i] = flow_path(model, y, control, ts)
    lam_mix = np.zeros((d, n))
    cost_mix = np.zeros((d, n))
    kmix = np.zeros((d, n, d))
    for p in np.unique(piece_of):
        sel = np.flatnonzero(piece_of == p)
        mix = control.pieces[p]
        flat = pos[:, sel, :].reshape(-1, D)
        for a, w in zip(mix.actions, mix.weights):
            av = np.asarray(a, dtype=float)
            lam = np.asarray(model.hazard(flat, av), dtype=float).reshape(d, sel.size)
            rows = np.asarray(model.jump_kernel(flat, av), dtype=float).reshape(d, sel.size, d)
            cst = np.asarray(model.cost_rate(flat, av), dtype=float).reshape(d, sel.size)
            lam_mix[:, sel] += w * lam
            cost_mix[:, sel] += w * cst
            kmix[:, sel, :] += w * lam[:, :, None] * rows
    lam_int = cumulative_simpson(lam_mix, dx=float(ts[1] - ts[0]), axis=1, initial=0.0)
    egamma = np.exp(-model.discount * ts[None, :] - lam_int)
    if not np.all(np.isfinite(egamma)):
        raise FloatingPointError("non-finite discount factors in stage tables")
    dmat = np.ascontiguousarray((egamma[:, :, None] * kmix).transpose(0, 2, 1))
    g = (W[None, :] * egamma * cost_mix).sum(axis=1)
    return CandidateTables(
        control=control,
        times=ts,
        weights=W,
        step=float(ts[1] - ts[0]),
        positions=pos,
        lam_mix=lam_mix,
        cost_mix=cost_mix,
        egamma=egamma,
        dmat=dmat,
        g=g,
    )


def _smooth_tensor(dmat: np.ndarray, step: float, kernel: RegularizationKernel) -> np.ndarray:
    """Convolve the last axis with h_sigma using window Simpson weights.

    Terms reaching below time zero are dropped, matching the truncated
    integration domain of the regularized filter; beyond t_max the tensor is
    treated as zero (its mass there is below the tail tolerance).
    """
    w = max(1, math.ceil(kernel.halfwidth / step))
    pattern = np.full(2 * w + 1, 2.0)
    pattern[1::2] = 4.0
    pattern[0] = pattern[-1] = 1.0
    pattern *= step / 3.0
    offsets = np.arange(-w, w + 1)
    sw = pattern * kernel.density(offsets * step)
    n = dmat.shape[-1]
    out = np.zeros_like(dmat)
    for m, c in zip(offsets, sw):
        if c == 0.0:
            continue
        if m >= 0:
            out[..., m:] += c * dmat[..., : n - m]
        else:
            out[..., :m] += c * dmat[..., -m:]
    return out


class StageContext:
    """Cache of per-control tables shared across operator evaluations."""

    def __init__(self, model: PopdmpModel, stage: StageQuadrature | None = None):
        self.model = model
        self.stage = stage if stage is not None else StageQuadrature.for_model(model)
        self.obs_points, self.obs_weights = model.observation_atoms()
        self._tables: dict[RelaxedControl, CandidateTables] = {}
        self._smoothed: dict[tuple[RelaxedControl, RegularizationKernel], np.ndarray] = {}

    def tables(self, control: RelaxedControl) -> CandidateTables:
        tb = self._tables.get(control)
        if tb is None:
            tb = build_tables(self.model, control, self.stage)
            self._tables[control] = tb
        return tb

    def smoothed_dmat(self, control: RelaxedControl, kernel: RegularizationKernel) -> np.ndarray:
        key = (control, kernel)
        out = self._smoothed.get(key)
        if out is None:
            tb = self.tables(control)
            out = _smooth_tensor(tb.dmat, tb.step, kernel)
            self._smoothed[key] = out
        return out


def _resolve_ctx(model, stage, ctx) -> StageContext:
    if ctx is not None:
        return ctx
    return StageContext(model, stage)


def _state_number(model: PopdmpModel, y) -> int:
    if isinstance(y, (int, np.integer)):
        i = int(y)
        if not (0 <= i < model.n_states):
            raise IndexError(f"state index {i} out of range")
        return i
    return model.state_index(y)


# ---------------------------------------------------------------------------
# operators


def stage_cost_g(model: PopdmpModel, y, control: RelaxedControl,
                 stage: StageQuadrature | None = None, ctx: StageContext | None = None) -> float:
    """Expected discounted running cost until the next jump, started at y."""
    ctx = _resolve_ctx(model, stage, ctx)
    return float(ctx.tables(control).g[_state_number(model, y)])


def stage_cost_belief(model: PopdmpModel, rho, control: RelaxedControl,
                      stage: StageQuadrature | None = None,
                      ctx: StageContext | None = None) -> float:
    """Belief-averaged one-stage cost sum_y g(y, r) rho(y)."""
    ctx = _resolve_ctx(model, stage, ctx)
    probs = as_belief(rho, model.n_states).probs
    return float(probs @ ctx.tables(control).g)


def _require_kernel_policy(model: PopdmpModel, kernel) -> None:
    if model.hazard_controlled and kernel is None:
        raise ValueError(
            "models with action-dependent hazard or jump kernel require a "
            "regularization kernel for the belief transition"
        )


def expected_next_value(model: PopdmpModel, v: ValueGrid, rho, control: RelaxedControl,
                        kernel: RegularizationKernel | None = None,
                        stage: StageQuadrature | None = None,
                        ctx: StageContext | None = None) -> float:
    """Integral of the interpolated value function against the belief
    transition kernel.

    The observation sum is exact (finitely many reachable observations); the
    time integral uses the stage Simpson grid.  The plain filter drives the
    next belief unless a regularization kernel is given (mandatory when the
    hazard or jump kernel is controlled).
    """
    _require_kernel_policy(model, kernel)
    ctx = _resolve_ctx(model, stage, ctx)
    tb = ctx.tables(control)
    d_w = tb.dmat
    d_b = ctx.smoothed_dmat(control, kernel) if kernel is not None else d_w
    probs = as_belief(rho, model.n_states).probs
    un_w = np.einsum("i,iuj->uj", probs, d_w)
    un_b = un_w if d_b is d_w else np.einsum("i,iuj->uj", probs, d_b)
    total = 0.0
    for wvec in ctx.obs_weights:
        wx = wvec @ un_w
        idx = np.flatnonzero(wx > 0.0)
        if idx.size == 0:
            continue
        numer = wvec[:, None] * un_b[:, idx]
        denom = numer.sum(axis=0)
        keep = denom > _DENOM_FLOOR
        idx = idx[keep]
        if idx.size == 0:
            continue
        beliefs = (numer[:, keep] / denom[keep]).T
        vals = interpolate_batch(v, beliefs)
        total += float((tb.weights[idx] * wx[idx]) @ vals)
    return total


def transition_mass(model: PopdmpModel, rho, control: RelaxedControl,
                    stage: StageQuadrature | None = None,
                    ctx: StageContext | None = None) -> float:
    """Total substochastic mass of the belief transition kernel; equals
    expected_next_value with v identically one."""
    ctx = _resolve_ctx(model, stage, ctx)
    tb = ctx.tables(control)
    probs = as_belief(rho, model.n_states).probs
    un_w = np.einsum("i,iuj->uj", probs, tb.dmat)
    return float(tb.weights @ un_w.sum(axis=0))


def L_operator(model: PopdmpModel, v: ValueGrid, rho, control: RelaxedControl,
               kernel: RegularizationKernel | None = None,
               stage: StageQuadrature | None = None,
               ctx: StageContext | None = None) -> float:
    """One-stage cost plus expected next value under one candidate control."""
    ctx = _resolve_ctx(model, stage, ctx)
    return stage_cost_belief(model, rho, control, ctx=ctx) + expected_next_value(
        model, v, rho, control, kernel=kernel, ctx=ctx
    )


def T_operator(model: PopdmpModel, v: ValueGrid, rho, family: ControlFamily,
               kernel: RegularizationKernel | None = None,
               stage: StageQuadrature | None = None,
               ctx: StageContext | None = None) -> tuple[float, int]:
    """Minimum of L over the candidate family; ties go to the lowest index."""
    ctx = _resolve_ctx(model, stage, ctx)
    best_val = math.inf
    best_k = 0
    for k, control in enumerate(family):
        val = L_operator(model, v, rho, control, kernel=kernel, ctx=ctx)
        if val < best_val:
            best_val = val
            best_k = k
    return best_val, best_k
