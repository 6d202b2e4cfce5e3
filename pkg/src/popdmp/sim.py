"""Monte Carlo simulation of the controlled process and policy evaluation.

Jump times are sampled by thinning against the global hazard bound: propose
exponential increments at the bound's rate, draw an action atom from the
mixture active at the proposal time, and accept with probability
hazard(position, action) / bound.  Drawing the atom before the acceptance
test makes the accepted (time, action) pair follow the hazard-weighted law
that the transition density prescribes, and reduces to plain thinning when
the hazard ignores the action.

Reproducibility contract: trajectory ``i`` of a run with master seed ``s``
consumes uniforms from ``PCG64(SeedSequence((s, i)))`` in a fixed order
(initial state draw when the initial distribution is sampled; per proposal
the increment, the atom and the acceptance check, where a proposal reaching
the horizon consumes just the increment; per accepted jump the next state
and the noise offset).  Results are therefore bit-identical however the
batch is chunked or scheduled.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.integrate import cumulative_simpson

from .grid import ValueGrid, interpolate
from .mdp import StageQuadrature
from .model import ClosedFormFlow, PopdmpModel, RelaxedControl, flow_path
from .solver import BellmanSweep, GridPolicy

__all__ = [
    "RngStream",
    "Trajectory",
    "CrossCheckRow",
    "CrossCheckReport",
    "default_horizon",
    "sample_jump",
    "sample_first_jumps",
    "simulate_trajectory",
    "evaluate_policy_mc",
    "cross_check",
]

_SIM_STEP = 1e-3


@dataclass(frozen=True)
class RngStream:
    """Addresses one reproducible uniform stream: (master seed, stream index)."""

    seed: int
    index: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((int(self.seed), int(self.index))))
        )


@dataclass
class Trajectory:
    """Marked-point-process record of one simulated run.

    ``times[n]``, ``states[n]`` and ``observations[n]`` hold (T_n, Y_n, X_n)
    including the initial entries; ``controls[n]`` is the control used on
    [T_n, T_{n+1}) and ``segment_costs[n]`` its discounted-to-zero cost
    contribution.  When the run is truncated at the horizon the last segment
    has no closing jump.
    """

    times: list[float]
    states: list[int]
    observations: list[np.ndarray]
    controls: list[RelaxedControl]
    segment_costs: list[float]
    total_cost: float
    truncated: bool


def default_horizon(model: PopdmpModel, truncation_tol: float = 1e-6) -> float:
    """Horizon H with e^(-beta H) * c_max / beta below the truncation
    tolerance (with a factor-two margin)."""
    beta = model.discount
    scale = max(model.cost_max, beta * truncation_tol)
    return math.log(2.0 * scale / (beta * truncation_tol)) / beta


# ---------------------------------------------------------------------------
# per-control path tables


@dataclass(eq=False)
class _ControlTables:
    control: RelaxedControl
    breaks: np.ndarray
    atom_cums: list[np.ndarray]
    times: np.ndarray
    positions: np.ndarray | None  # (d, n, D); None when the flow is closed-form
    lam_int: np.ndarray           # (d, n)
    cum_cost: np.ndarray          # (d, n): integral of exp(-beta u) c_mix(u)


class SimTables:
    """Flow, hazard-integral and discounted-cost paths per control on a fine
    shared grid, grown on demand when a sampled jump time falls beyond it.

    Regrowth extends the grid (old nodes are a prefix of the new ones, so
    values at existing times are unchanged); a lock keeps concurrent chunks
    from rebuilding the same entry twice.
    """

    def __init__(self, model: PopdmpModel, span: float, step: float = _SIM_STEP):
        self.model = model
        self.step = float(step)
        self._n = max(2, math.ceil(span / self.step)) + 1
        self._entries: dict[RelaxedControl, _ControlTables] = {}
        self._lock = threading.Lock()

    @property
    def span(self) -> float:
        return (self._n - 1) * self.step

    def ensure(self, control: RelaxedControl) -> _ControlTables:
        tb = self._entries.get(control)
        if tb is None:
            with self._lock:
                tb = self._entries.get(control)
                if tb is None:
                    tb = self._build(control)
                    self._entries[control] = tb
        return tb

    def ensure_span(self, needed: float) -> None:
        if needed <= self.span:
            return
        with self._lock:
            if needed <= self.span:
                return
            while self.span < needed:
                self._n = int(self._n * 1.6) + 2
            for control in list(self._entries):
                self._entries[control] = self._build(control)

    def _build(self, control: RelaxedControl) -> _ControlTables:
        model = self.model
        ts = np.arange(self._n) * self.step
        d, D = model.n_states, model.space_dim
        closed = isinstance(model.drift, ClosedFormFlow) and model.drift.path is not None
        pos = np.empty((d, ts.size, D))
        for i, y in enumerate(model.post_jump_states):
            pos[i] = flow_path(model, y, control, ts)
        piece_of = np.array([control.piece_index_at(t) for t in ts])
        lam_mix = np.zeros((d, ts.size))
        cost_mix = np.zeros((d, ts.size))
        for p in np.unique(piece_of):
            sel = np.flatnonzero(piece_of == p)
            mix = control.pieces[p]
            flat = pos[:, sel, :].reshape(-1, D)
            for a, w in zip(mix.actions, mix.weights):
                av = np.asarray(a, dtype=float)
                lam_mix[:, sel] += w * np.asarray(model.hazard(flat, av)).reshape(d, sel.size)
                cost_mix[:, sel] += w * np.asarray(model.cost_rate(flat, av)).reshape(d, sel.size)
        lam_int = cumulative_simpson(lam_mix, dx=self.step, axis=1, initial=0.0)
        cum_cost = cumulative_simpson(
            np.exp(-model.discount * ts)[None, :] * cost_mix, dx=self.step, axis=1, initial=0.0
        )
        return _ControlTables(
            control=control,
            breaks=np.asarray(control.breaks, dtype=float),
            atom_cums=[np.cumsum(p.weights) for p in control.pieces],
            times=ts,
            positions=None if closed else pos,
            lam_int=lam_int,
            cum_cost=cum_cost,
        )

    # -- lookups (linear interpolation on the fine grid) ----------------------

    def _frac_index(self, s: np.ndarray):
        j = np.clip(np.floor(s / self.step).astype(np.int64), 0, self._n - 2)
        return j, s / self.step - j

    def position(self, tb: _ControlTables, y_idx: np.ndarray, s: np.ndarray) -> np.ndarray:
        if tb.positions is None:
            out = np.empty((s.size, self.model.space_dim))
            for i in np.unique(y_idx):
                sel = np.flatnonzero(y_idx == i)
                out[sel] = self.model.drift.path(
                    self.model.post_jump_states[i], tb.control, s[sel]
                )
            return out
        j, w = self._frac_index(s)
        p = tb.positions
        return p[y_idx, j] * (1.0 - w)[:, None] + p[y_idx, j + 1] * w[:, None]

    def position_all(self, tb: _ControlTables, s: np.ndarray) -> np.ndarray:
        d = self.model.n_states
        if tb.positions is None:
            out = np.empty((s.size, d, self.model.space_dim))
            for i in range(d):
                out[:, i, :] = self.model.drift.path(
                    self.model.post_jump_states[i], tb.control, s
                )
            return out
        j, w = self._frac_index(s)
        p = tb.positions
        return (p[:, j, :] * (1.0 - w)[None, :, None] + p[:, j + 1, :] * w[None, :, None]).transpose(1, 0, 2)

    def lam_int_all(self, tb: _ControlTables, s: np.ndarray) -> np.ndarray:
        j, w = self._frac_index(s)
        return (tb.lam_int[:, j] * (1.0 - w) + tb.lam_int[:, j + 1] * w).T

    def seg_cost(self, tb: _ControlTables, y_idx: np.ndarray, dt: np.ndarray) -> np.ndarray:
        j, w = self._frac_index(dt)
        return tb.cum_cost[y_idx, j] * (1.0 - w) + tb.cum_cost[y_idx, j + 1] * w


# ---------------------------------------------------------------------------
# per-trajectory uniform streams


class _StreamBank:
    """One PCG64 stream per trajectory, consumed strictly in order."""

    def __init__(self, seed: int, indices: np.ndarray, block: int = 64):
        self._gens = [RngStream(seed, int(i)).generator() for i in indices]
        self._block = block
        self._buf = np.empty((len(self._gens), block))
        self._pos = np.full(len(self._gens), block, dtype=np.int64)

    def take(self, rows: np.ndarray) -> np.ndarray:
        exhausted = rows[self._pos[rows] >= self._block]
        for i in exhausted:
            self._buf[i] = self._gens[i].random(self._block)
            self._pos[i] = 0
        out = self._buf[rows, self._pos[rows]]
        self._pos[rows] += 1
        return out


# ---------------------------------------------------------------------------
# policy drivers


class _FixedDriver:
    def __init__(self, control: RelaxedControl):
        self.controls = [control]

    def assign(self, beliefs: np.ndarray) -> np.ndarray:
        return np.zeros(beliefs.shape[0], dtype=np.int64)


class _GridDriver:
    def __init__(self, policy: GridPolicy):
        self._policy = policy
        self.controls = list(policy.family)

    def assign(self, beliefs: np.ndarray) -> np.ndarray:
        return self._policy.candidate_indices(beliefs)


class _CallableDriver:
    """Wraps a generic belief -> control rule; distinct controls get ids as
    they appear (not thread-safe, single-chunk runs only)."""

    def __init__(self, rule):
        self._rule = rule
        self.controls: list[RelaxedControl] = []
        self._ids: dict[RelaxedControl, int] = {}

    def assign(self, beliefs: np.ndarray) -> np.ndarray:
        out = np.empty(beliefs.shape[0], dtype=np.int64)
        for n, probs in enumerate(beliefs):
            control = self._rule(probs)
            k = self._ids.get(control)
            if k is None:
                k = len(self.controls)
                self.controls.append(control)
                self._ids[control] = k
            out[n] = k
        return out


def _make_driver(policy):
    if isinstance(policy, GridPolicy):
        return _GridDriver(policy)
    if isinstance(policy, RelaxedControl):
        return _FixedDriver(policy)
    if hasattr(policy, "control"):
        return _CallableDriver(policy.control)
    if callable(policy):
        return _CallableDriver(policy)
    raise TypeError(f"cannot drive simulation with policy of type {type(policy)!r}")


# ---------------------------------------------------------------------------
# the batch engine


@dataclass
class _BatchResult:
    costs: np.ndarray
    truncated: np.ndarray
    n_jumps: np.ndarray
    beliefs: np.ndarray
    hidden: np.ndarray
    events: dict | None


def _inverse_cdf(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(cum, u, side="right")
    return np.minimum(idx, cum.size - 1)


def _rowwise_inverse_cdf(cums: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (cums <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cums.shape[1] - 1)


def _simulate_batch(model: PopdmpModel, driver, tables: SimTables, bank: _StreamBank,
                    n: int, x0=None, y0: int | None = None, horizon: float = math.inf,
                    max_jumps: int | None = None, record: bool = False) -> _BatchResult:
    d = model.n_states
    states_pts = model.post_jump_states
    beta = model.discount
    lam_bar = model.hazard_bounds[1]
    offsets = model.noise.offsets
    noise_cum = np.cumsum(model.noise.weights)

    if y0 is not None:
        mu0 = np.zeros(d)
        mu0[int(y0)] = 1.0
        y = np.full(n, int(y0), dtype=np.int64)
    else:
        mu0 = np.asarray(model.initial_kernel(np.atleast_1d(np.asarray(x0, dtype=float))),
                         dtype=float)
        mu0 = mu0 / mu0.sum()
        u = bank.take(np.arange(n))
        y = _inverse_cdf(np.cumsum(mu0), u)
    beliefs = np.tile(mu0, (n, 1))
    T = np.zeros(n)
    cost = np.zeros(n)
    active = np.ones(n, dtype=bool)
    truncated = np.zeros(n, dtype=bool)
    n_jumps = np.zeros(n, dtype=np.int64)
    ev_traj, ev_t, ev_y, ev_x, ev_k, ev_seg = [], [], [], [], [], []

    while active.any():
        rows = np.flatnonzero(active)
        ks = driver.assign(beliefs[rows])
        for k in np.unique(ks):
            sub = rows[ks == k]
            control = driver.controls[k]
            tb = tables.ensure(control)
            m = sub.size
            elapsed = np.zeros(m)
            pend = np.ones(m, dtype=bool)
            accepted = np.zeros(m, dtype=bool)
            s_acc = np.zeros(m)
            act_acc = np.zeros((m, model.action_box.shape[0]))
            while pend.any():
                p = np.flatnonzero(pend)
                u1 = bank.take(sub[p])
                elapsed[p] -= np.log1p(-u1) / lam_bar
                over = T[sub[p]] + elapsed[p] >= horizon
                pend[p[over]] = False
                live = p[~over]
                if live.size == 0:
                    continue
                u2 = bank.take(sub[live])
                u3 = bank.take(sub[live])
                s_prop = elapsed[live]
                tables.ensure_span(float(s_prop.max()))
                tb = tables.ensure(control)
                pos = tables.position(tb, y[sub[live]], s_prop)
                piece = np.searchsorted(tb.breaks, s_prop, side="right")
                acts = np.empty((live.size, model.action_box.shape[0]))
                rate = np.empty(live.size)
                for pc in np.unique(piece):
                    g = np.flatnonzero(piece == pc)
                    mix = control.pieces[pc]
                    aidx = _inverse_cdf(tb.atom_cums[pc], u2[g])
                    for ai in np.unique(aidx):
                        asel = g[aidx == ai]
                        av = np.asarray(mix.actions[ai], dtype=float)
                        acts[asel] = av
                        rate[asel] = np.asarray(model.hazard(pos[asel], av), dtype=float)
                ok = u3 * lam_bar <= rate
                hit = live[ok]
                pend[hit] = False
                accepted[hit] = True
                s_acc[hit] = s_prop[ok]
                act_acc[hit] = acts[ok]

            # horizon-truncated members of this group
            cut = sub[~accepted]
            if cut.size:
                dt = horizon - T[cut]
                tables.ensure_span(float(dt.max()))
                tb = tables.ensure(control)
                seg = np.exp(-beta * T[cut]) * tables.seg_cost(tb, y[cut], dt)
                cost[cut] += seg
                active[cut] = False
                truncated[cut] = True
                if record:
                    for t_id, sc in zip(cut, seg):
                        ev_traj.append(-t_id - 1)  # marks an unfinished final segment
                        ev_t.append(horizon)
                        ev_y.append(-1)
                        ev_x.append(np.full(model.space_dim, np.nan))
                        ev_k.append(k)
                        ev_seg.append(float(sc))

            jumped = sub[accepted]
            if jumped.size == 0:
                continue
            s = s_acc[accepted]
            seg = np.exp(-beta * T[jumped]) * tables.seg_cost(tb, y[jumped], s)
            cost[jumped] += seg
            pos_j = tables.position(tb, y[jumped], s)
            u4 = bank.take(jumped)
            u5 = bank.take(jumped)
            y_next = np.empty(jumped.size, dtype=np.int64)
            acts = act_acc[accepted]
            uniq, inv = np.unique(acts, axis=0, return_inverse=True)
            for ai in range(uniq.shape[0]):
                g = np.flatnonzero(inv == ai)
                rows_k = np.asarray(model.jump_kernel(pos_j[g], uniq[ai]), dtype=float)
                y_next[g] = _rowwise_inverse_cdf(np.cumsum(rows_k, axis=1), u4[g])
            eps_idx = _inverse_cdf(noise_cum, u5)
            x = states_pts[y_next] + offsets[eps_idx]

            # exact Bayes update of the beliefs, using the full mixture at s
            pos_all = tables.position_all(tb, s)
            egam = np.exp(-tables.lam_int_all(tb, s))
            hk = np.zeros((jumped.size, d, d))
            piece = np.searchsorted(tb.breaks, s, side="right")
            for pc in np.unique(piece):
                g = np.flatnonzero(piece == pc)
                mix = control.pieces[pc]
                flat = pos_all[g].reshape(-1, model.space_dim)
                for a, w in zip(mix.actions, mix.weights):
                    av = np.asarray(a, dtype=float)
                    lam = np.asarray(model.hazard(flat, av), dtype=float).reshape(g.size, d)
                    rk = np.asarray(model.jump_kernel(flat, av), dtype=float).reshape(g.size, d, d)
                    hk[g] += w * lam[:, :, None] * rk
            deltas = x[:, None, :] - states_pts[None, :, :]
            fac = np.zeros((jumped.size, d))
            for off, w_off in zip(offsets, model.noise.weights):
                tol = model.noise.match_tol * (1.0 + float(np.abs(off).max()))
                fac += w_off * np.all(np.abs(deltas - off) <= tol, axis=2)
            numer = np.einsum("gi,gi,giu->gu", beliefs[jumped], egam, hk) * fac
            den = numer.sum(axis=1)
            if np.any(den <= 0):
                raise AssertionError("model-generated observation got zero likelihood")
            beliefs[jumped] = numer / den[:, None]

            T[jumped] += s
            y[jumped] = y_next
            n_jumps[jumped] += 1
            if record:
                ev_traj.extend(jumped.tolist())
                ev_t.extend(T[jumped].tolist())
                ev_y.extend(y_next.tolist())
                ev_x.extend(list(x))
                ev_k.extend([k] * jumped.size)
                ev_seg.extend(seg.tolist())
            if max_jumps is not None:
                done = jumped[n_jumps[jumped] >= max_jumps]
                active[done] = False

    events = None
    if record:
        events = {
            "traj": np.asarray(ev_traj, dtype=np.int64),
            "t": np.asarray(ev_t, dtype=float),
            "y": np.asarray(ev_y, dtype=np.int64),
            "x": np.asarray(ev_x, dtype=float).reshape(-1, model.space_dim),
            "cand": np.asarray(ev_k, dtype=np.int64),
            "seg": np.asarray(ev_seg, dtype=float),
        }
    return _BatchResult(
        costs=cost, truncated=truncated, n_jumps=n_jumps, beliefs=beliefs, hidden=y,
        events=events,
    )


# ---------------------------------------------------------------------------
# public entry points


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng), 0).generator()
    raise TypeError("rng must be a Generator, an RngStream or an integer seed")


def sample_jump(model: PopdmpModel, y, control: RelaxedControl, rng):
    """One inter-jump sample: returns (s, next-state index, observation).

    ``y`` is the current post-jump state (index or point).  Thinning against
    the hazard upper bound; rejected proposals advance time.
    """
    gen = _as_generator(rng)
    model.check_control(control)
    if isinstance(y, (int, np.integer)):
        y_pt = model.post_jump_states[int(y)]
    else:
        y_pt = np.atleast_1d(np.asarray(y, dtype=float))
    lam_bar = model.hazard_bounds[1]
    t = 0.0
    while True:
        t -= math.log1p(-gen.random()) / lam_bar
        mix = control.mixture_at(t)
        aidx = int(_inverse_cdf(np.cumsum(mix.weights), np.array([gen.random()]))[0])
        av = np.asarray(mix.actions[aidx], dtype=float)
        pos = flow_path(model, y_pt, control, np.array([t]))[0]
        lam = float(np.asarray(model.hazard(pos[None, :], av), dtype=float)[0])
        if gen.random() * lam_bar <= lam:
            break
    rows = np.asarray(model.jump_kernel(pos[None, :], av), dtype=float)[0]
    y_next = int(_inverse_cdf(np.cumsum(rows), np.array([gen.random()]))[0])
    eps = model.noise.offsets[int(_inverse_cdf(np.cumsum(model.noise.weights),
                                               np.array([gen.random()]))[0])]
    x = model.post_jump_states[y_next] + eps
    return float(t), y_next, x


def sample_first_jumps(model: PopdmpModel, control: RelaxedControl, n: int, seed: int,
                       y0: int | None = None, x0=None):
    """Vectorized first-jump sampler.

    The initial hidden state is either forced (``y0``) or drawn from the
    initial kernel at ``x0``.  Returns arrays (s, next-state index,
    observation, posterior belief) of the first jump of n independent
    trajectories (streams seed/0 .. seed/n-1); the posterior is the exact
    one-step Bayes update computed alongside the draw.
    """
    if (y0 is None) == (x0 is None):
        raise ValueError("give exactly one of y0 (forced state) or x0 (observation)")
    driver = _FixedDriver(control)
    span = 4.0 / model.hazard_bounds[0]
    tables = SimTables(model, span)
    bank = _StreamBank(seed, np.arange(n))
    res = _simulate_batch(model, driver, tables, bank, n, x0=x0,
                          y0=None if y0 is None else int(y0),
                          horizon=math.inf, max_jumps=1, record=True)
    ev = res.events
    order = np.argsort(ev["traj"], kind="stable")
    return ev["t"][order], ev["y"][order], ev["x"][order], res.beliefs


def simulate_trajectory(model: PopdmpModel, x0, policy, rng,
                        cost_horizon: float | None = None,
                        y0: int | None = None) -> Trajectory:
    """Simulate one trajectory under a stationary belief policy.

    The initial hidden state is drawn from the initial kernel at ``x0``
    unless ``y0`` forces it; the belief filter runs online to feed the
    policy; cost accrues by quadrature along each inter-jump segment and the
    run truncates at the cost horizon (flagged).
    """
    if isinstance(rng, RngStream):
        seed, index = rng.seed, rng.index
    elif isinstance(rng, (int, np.integer)):
        seed, index = int(rng), 0
    elif isinstance(rng, tuple) and len(rng) == 2:
        seed, index = int(rng[0]), int(rng[1])
    else:
        raise TypeError("rng must be an RngStream, an integer seed or a (seed, index) pair")
    horizon = default_horizon(model) if cost_horizon is None else float(cost_horizon)
    driver = _make_driver(policy)
    tables = SimTables(model, horizon)
    bank = _StreamBank(seed, np.array([index]))
    res = _simulate_batch(model, driver, tables, bank, 1, x0=x0, y0=y0,
                          horizon=horizon, record=True)
    ev = res.events
    x0v = np.atleast_1d(np.asarray(x0, dtype=float))
    if y0 is not None:
        first_y = int(y0)
    else:
        # replay the stream's first draw to recover the initial hidden state
        gen = RngStream(seed, index).generator()
        mu0 = np.asarray(model.initial_kernel(x0v), dtype=float)
        first_y = int(_inverse_cdf(np.cumsum(mu0 / mu0.sum()), np.array([gen.random()]))[0])
    times = [0.0]
    states: list[int] = []
    observations = [x0v]
    controls: list[RelaxedControl] = []
    seg_costs: list[float] = []
    jump_rows = np.flatnonzero(ev["traj"] >= 0)
    for r in jump_rows:
        times.append(float(ev["t"][r]))
        states.append(int(ev["y"][r]))
        observations.append(ev["x"][r])
        controls.append(driver.controls[int(ev["cand"][r])])
        seg_costs.append(float(ev["seg"][r]))
    cut_rows = np.flatnonzero(ev["traj"] < 0)
    for r in cut_rows:
        controls.append(driver.controls[int(ev["cand"][r])])
        seg_costs.append(float(ev["seg"][r]))
    states.insert(0, first_y)
    return Trajectory(
        times=times,
        states=states,
        observations=observations,
        controls=controls,
        segment_costs=seg_costs,
        total_cost=float(res.costs[0]),
        truncated=bool(res.truncated[0]),
    )


def evaluate_policy_mc(model: PopdmpModel, x0, policy, n_traj: int, seed: int,
                       horizon: float | None = None, workers: int = 1):
    """Sample mean and standard error of the discounted cost under a policy.

    Trajectory ``i`` always uses stream (seed, i), so the result is
    independent of chunking and worker count.
    """
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    horizon = default_horizon(model) if horizon is None else float(horizon)
    driver = _make_driver(policy)
    tables = SimTables(model, horizon)
    for control in driver.controls:
        tables.ensure(control)

    def run_chunk(lo: int, hi: int) -> np.ndarray:
        bank = _StreamBank(seed, np.arange(lo, hi))
        res = _simulate_batch(model, driver, tables, bank, hi - lo, x0=x0,
                              horizon=horizon, record=False)
        return res.costs

    workers = max(1, int(workers))
    if workers == 1 or isinstance(driver, _CallableDriver):
        costs = run_chunk(0, n_traj)
    else:
        bounds = np.linspace(0, n_traj, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ab: run_chunk(*ab), zip(bounds[:-1], bounds[1:])))
        costs = np.concatenate(parts)
    mean = float(costs.mean())
    stderr = float(costs.std(ddof=1) / math.sqrt(n_traj)) if n_traj > 1 else 0.0
    return mean, stderr


@dataclass
class CrossCheckRow:
    x0: float
    mc_mean: float
    stderr: float
    mdp_value: float
    z: float


@dataclass
class CrossCheckReport:
    rows: list[CrossCheckRow]

    @property
    def max_abs_z(self) -> float:
        return max((abs(r.z) for r in self.rows), default=0.0)


def cross_check(model: PopdmpModel, policy: GridPolicy, observations, n_traj: int,
                seed: int = 0, horizon: float | None = None,
                stage: StageQuadrature | None = None, kernel=None,
                workers: int = 1, sweep: BellmanSweep | None = None,
                bias_tol: float | None = None) -> CrossCheckReport:
    """Compare Monte Carlo continuous-time cost against the filtered-MDP
    policy value (the T_f fixed point) at each initial observation.

    The z denominator combines the Monte Carlo standard error with a small
    numerical-accuracy allowance (default ``1e-3 * (1 + |value|)``) covering
    quadrature and path-interpolation bias on both sides; without it,
    policies with (near-)deterministic cost would turn microscopic quadrature
    bias into arbitrarily large z-scores.
    """
    if sweep is None:
        sweep = BellmanSweep(model, policy.grid, policy.family, kernel=kernel, stage=stage)
    v_policy = sweep.policy_fixed_point(policy.argmins)
    vg = ValueGrid(policy.grid, v_policy)
    rows = []
    for k, x0 in enumerate(observations):
        mu0 = np.asarray(model.initial_kernel(np.atleast_1d(np.asarray(x0, dtype=float))),
                         dtype=float)
        v_mdp = interpolate(vg, mu0 / mu0.sum())
        mc, se = evaluate_policy_mc(model, x0, policy, n_traj, seed + k,
                                    horizon=horizon, workers=workers)
        diff = mc - v_mdp
        floor = bias_tol if bias_tol is not None else 1e-3 * (1.0 + abs(v_mdp))
        z = diff / math.hypot(se, floor)
        rows.append(CrossCheckRow(x0=float(np.atleast_1d(x0)[0]), mc_mean=mc, stderr=se,
                                  mdp_value=v_mdp, z=z))
    return CrossCheckReport(rows=rows)
