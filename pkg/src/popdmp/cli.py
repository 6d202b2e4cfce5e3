"""Command-line interface: config ingestion and the solve / simulate /
filter / crosscheck / sweep pipelines.

Configs are YAML.  Every run writes ``resolved_config.yaml`` into the output
directory with all defaults filled in, so runs are self-describing and the
echo is byte-identical across reruns of the same input.  All numeric CSV
fields are printed with nine significant digits.

Control specification grammar (used in ``policy.csv`` and in the event logs
replayed by ``popdmp filter``)::

    const:<a>                 constant action a
    switch:<a>:<tau>          action a on [0, tau), then 0
    pw:<t0>=<a0>;<t1>=<a1>    piecewise-constant actions from the given times
                              (t0 must be 0); an action may be a mixture
                              written a1*w1|a2*w2
"""

from __future__ import annotations

import copy
import csv
import math
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from .catalog import BUILTIN_MODELS, build_builtin, table_model
from .filtering import RegularizationKernel, filter_trajectory
from .mdp import ControlFamily, StageQuadrature, switching_family
from .model import ActionMixture, PopdmpModel, RelaxedControl
from .sim import cross_check, default_horizon, evaluate_policy_mc, simulate_trajectory
from .solver import (
    build_simplex_grid,
    extract_policy,
    sigma_sweep,
    value_iteration,
    write_report_csv,
    write_value_csv,
)

__all__ = ["main", "load_config", "RunConfig", "format_control", "parse_control"]


class ConfigError(click.ClickException):
    exit_code = 1


def _fmt(x) -> str:
    return f"{float(x):.9g}"


# ---------------------------------------------------------------------------
# control spec strings


def format_control(control: RelaxedControl) -> str:
    def atom_str(mix: ActionMixture) -> str:
        parts = []
        for a, w in zip(mix.actions, mix.weights):
            a_txt = ",".join(_fmt(v) for v in a)
            parts.append(a_txt if len(mix.actions) == 1 else f"{a_txt}*{_fmt(w)}")
        return "|".join(parts)

    if len(control.pieces) == 1 and len(control.pieces[0].actions) == 1:
        return f"const:{atom_str(control.pieces[0])}"
    if (
        len(control.pieces) == 2
        and all(len(p.actions) == 1 for p in control.pieces)
        and all(v == 0.0 for v in control.pieces[1].actions[0])
    ):
        return f"switch:{atom_str(control.pieces[0])}:{_fmt(control.breaks[0])}"
    starts = [0.0, *control.breaks]
    return "pw:" + ";".join(f"{_fmt(t)}={atom_str(p)}" for t, p in zip(starts, control.pieces))


def _parse_mixture(txt: str) -> ActionMixture:
    pairs = []
    for part in txt.split("|"):
        if "*" in part:
            a_txt, w_txt = part.rsplit("*", 1)
            w = float(w_txt)
        else:
            a_txt, w = part, 1.0
        action = tuple(float(v) for v in a_txt.split(","))
        pairs.append((action, w))
    return ActionMixture.of(pairs)


def parse_control(spec: str) -> RelaxedControl:
    spec = spec.strip()
    try:
        if spec.startswith("const:"):
            return RelaxedControl.constant(_parse_mixture(spec[6:]))
        if spec.startswith("switch:"):
            _, a_txt, tau_txt = spec.split(":")
            return RelaxedControl.from_pieces(
                [(0.0, _parse_mixture(a_txt)), (float(tau_txt), 0.0)]
            )
        if spec.startswith("pw:"):
            pairs = []
            for part in spec[3:].split(";"):
                t_txt, a_txt = part.split("=")
                pairs.append((float(t_txt), _parse_mixture(a_txt)))
            return RelaxedControl.from_pieces(pairs)
    except (ValueError, IndexError) as err:
        raise ConfigError(f"bad control spec {spec!r}: {err}") from None
    raise ConfigError(f"bad control spec {spec!r}: expected const:/switch:/pw: prefix")


# ---------------------------------------------------------------------------
# configuration


_DEFAULTS = {
    "model": {"builtin": "particle-steering"},
    "solver": {
        "grid_k": 40,
        "tol": 1.0e-4,
        "max_iter": 200,
        "sigma": "plain",
        "kernel": "gaussian",
        "family": {"actions": [-1.0, 0.0, 1.0], "taus": {"start": 0.1, "stop": 2.0, "step": 0.1}},
        "quadrature": {"t_max": "auto", "h": 0.01, "tail_tol": 1.0e-8},
    },
    "sim": {
        "n_traj": 10000,
        "seed": 20260810,
        "horizon": "auto",
        "x0": 0.0,
        "policy": {"kind": "solved", "a": 0.0, "tau": 0.5},
        "record_trajectories": 10,
        "workers": 1,
    },
    "crosscheck": {"observations": [-2.0, 0.0, 2.0]},
    "sweep": {"sigmas": [0.2, 0.1, 0.05], "grid_k": 15},
    "output": {"directory": "out"},
}

_INLINE_DEFAULTS = {"discount": 1.0, "q0": "bayes", "action_box": [-1.0, 1.0]}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


class RunConfig:
    """Validated, fully resolved run configuration."""

    def __init__(self, resolved: dict):
        self.resolved = resolved
        self._validate()

    def _validate(self) -> None:
        m = self.resolved["model"]
        has_builtin = "builtin" in m and m["builtin"] is not None
        has_inline = "inline" in m and m["inline"] is not None
        if has_builtin == has_inline:
            raise ConfigError("model must name exactly one source: 'builtin' or 'inline'")
        if has_builtin and m["builtin"] not in BUILTIN_MODELS:
            raise ConfigError(
                f"unknown builtin model {m['builtin']!r}; available: {sorted(BUILTIN_MODELS)}"
            )
        if has_inline:
            inline = m["inline"]
            for key in ("states", "cost_table", "kernel_table", "hazard", "noise"):
                if key not in inline:
                    raise ConfigError(f"inline model is missing '{key}'")
        sol = self.resolved["solver"]
        if not (isinstance(sol["grid_k"], int) and sol["grid_k"] >= 1):
            raise ConfigError("solver.grid_k must be a positive integer")
        if not (float(sol["tol"]) > 0):
            raise ConfigError("solver.tol must be positive")
        sig = sol["sigma"]
        if sig != "plain" and not (isinstance(sig, (int, float)) and sig > 0):
            raise ConfigError("solver.sigma must be 'plain' or a positive bandwidth")
        for field in ("n_traj",):
            if not (isinstance(self.resolved["sim"][field], int) and self.resolved["sim"][field] >= 1):
                raise ConfigError(f"sim.{field} must be a positive integer")

    # -- builders --------------------------------------------------------------

    def build_model(self) -> PopdmpModel:
        m = self.resolved["model"]
        try:
            if m.get("builtin"):
                return build_builtin(m["builtin"])
            inline = {**_INLINE_DEFAULTS, **m["inline"]}
            noise = inline["noise"]
            return table_model(
                states=inline["states"],
                cost_table=[tuple(row) for row in inline["cost_table"]],
                kernel_table=[tuple(row) for row in inline["kernel_table"]],
                hazard=inline["hazard"] if np.isscalar(inline["hazard"])
                else [tuple(row) for row in inline["hazard"]],
                noise_offsets=noise["offsets"],
                noise_weights=noise["weights"],
                discount=float(inline["discount"]),
                q0=inline["q0"],
                action_box=inline["action_box"],
                name="inline",
            )
        except ValueError as err:
            raise ConfigError(f"invalid model data: {err}") from None

    def build_family(self) -> ControlFamily:
        fam = self.resolved["solver"]["family"]
        taus_spec = fam["taus"]
        if isinstance(taus_spec, dict):
            start, stop, step = (float(taus_spec[k]) for k in ("start", "stop", "step"))
            count = int(round((stop - start) / step)) + 1
            taus = [start + i * step for i in range(count)]
        else:
            taus = [float(t) for t in taus_spec]
        return switching_family(actions=[float(a) for a in fam["actions"]], taus=taus)

    def stage(self, model: PopdmpModel) -> StageQuadrature:
        q = self.resolved["solver"]["quadrature"]
        h = float(q["h"])
        if q["t_max"] == "auto":
            return StageQuadrature.for_model(model, h=h, tail_tol=float(q["tail_tol"]))
        return StageQuadrature(t_max=float(q["t_max"]), h=h)

    def kernel(self) -> RegularizationKernel | None:
        sig = self.resolved["solver"]["sigma"]
        if sig == "plain":
            return None
        return RegularizationKernel(self.resolved["solver"]["kernel"], float(sig))

    def horizon(self, model: PopdmpModel) -> float:
        h = self.resolved["sim"]["horizon"]
        return default_horizon(model) if h == "auto" else float(h)


def load_config(path) -> RunConfig:
    """Parse, validate and resolve a YAML config against the defaults."""
    try:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from None
    if not isinstance(user, dict):
        raise ConfigError("config root must be a mapping")
    resolved = _merge(_DEFAULTS, user)
    user_model = user.get("model") or {}
    if user_model.get("inline") is not None and "builtin" not in user_model:
        # an inline model in the user file replaces the default builtin
        resolved["model"]["builtin"] = None
    if resolved["model"].get("inline"):
        # echo the applied inline defaults (discount, q0 rule, action box)
        resolved["model"]["inline"] = {**_INLINE_DEFAULTS, **resolved["model"]["inline"]}
    if not _all_finite(resolved):
        raise ConfigError("config contains non-finite numbers")
    return RunConfig(resolved)


def _all_finite(node) -> bool:
    if isinstance(node, dict):
        return all(_all_finite(v) for v in node.values())
    if isinstance(node, (list, tuple)):
        return all(_all_finite(v) for v in node)
    if isinstance(node, float):
        return math.isfinite(node)
    return True


def _write_resolved(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = yaml.safe_dump(cfg.resolved, sort_keys=True, default_flow_style=False)
    (out_dir / "resolved_config.yaml").write_text(text)


def _apply_overrides(cfg: RunConfig, grid_k, tol, sigma, seed, workers) -> RunConfig:
    resolved = copy.deepcopy(cfg.resolved)
    if grid_k is not None:
        resolved["solver"]["grid_k"] = int(grid_k)
    if tol is not None:
        resolved["solver"]["tol"] = float(tol)
    if sigma is not None:
        resolved["solver"]["sigma"] = "plain" if sigma == "plain" else float(sigma)
    if seed is not None:
        resolved["sim"]["seed"] = int(seed)
    if workers is not None:
        resolved["sim"]["workers"] = int(workers)
    return RunConfig(resolved)


# ---------------------------------------------------------------------------
# solve machinery shared by subcommands


def _solve(cfg: RunConfig):
    model = cfg.build_model()
    family = cfg.build_family()
    grid = build_simplex_grid(model.n_states, int(cfg.resolved["solver"]["grid_k"]))
    vg, report = value_iteration(
        model,
        grid,
        family,
        kernel=cfg.kernel(),
        tol=float(cfg.resolved["solver"]["tol"]),
        max_iter=int(cfg.resolved["solver"]["max_iter"]),
        stage=cfg.stage(model),
    )
    return model, family, grid, vg, report


def _write_policy_csv(vg, family, path) -> None:
    d = vg.grid.dim
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([f"rho_{i + 1}" for i in range(d)] + ["argmin_index", "control"])
        for p, a in zip(vg.grid.points, vg.argmins):
            out.writerow([_fmt(c) for c in p] + [str(int(a)), format_control(family[int(a)])])


# ---------------------------------------------------------------------------
# commands


@click.group()
def main():
    """Optimal control of partially observable piecewise deterministic
    Markov processes on a finite post-jump state set."""


_shared = [
    click.option("--config", "config_path", type=click.Path(), required=True,
                 help="YAML run configuration."),
    click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                 help="Output directory (default: from config)."),
    click.option("--grid-k", type=int, default=None, help="Override solver.grid_k."),
    click.option("--tol", type=float, default=None, help="Override solver.tol."),
    click.option("--sigma", default=None, help="Override solver.sigma ('plain' or bandwidth)."),
    click.option("--seed", type=int, default=None, help="Override sim.seed."),
    click.option("--workers", type=int, default=None, help="Worker threads for simulation."),
]


def _with_shared(fn):
    for opt in reversed(_shared):
        fn = opt(fn)
    return fn


def _prepare(config_path, out_dir, grid_k, tol, sigma, seed, workers):
    cfg = _apply_overrides(load_config(config_path), grid_k, tol, sigma, seed, workers)
    out = Path(out_dir) if out_dir is not None else Path(cfg.resolved["output"]["directory"])
    _write_resolved(cfg, out)
    return cfg, out


@main.command()
@_with_shared
def solve(config_path, out_dir, grid_k, tol, sigma, seed, workers):
    """Run value iteration and write value.csv, policy.csv, report.csv."""
    cfg, out = _prepare(config_path, out_dir, grid_k, tol, sigma, seed, workers)
    model, family, grid, vg, report = _solve(cfg)
    write_value_csv(vg, out / "value.csv")
    _write_policy_csv(vg, family, out / "policy.csv")
    write_report_csv(report, out / "report.csv")
    click.echo(
        f"value iteration: {report.iterations} iterations, "
        f"final residual {report.final_residual:.3e}, "
        f"{'converged' if report.converged else 'NOT converged'}"
    )
    if not report.converged:
        sys.exit(2)


@main.command()
@_with_shared
def simulate(config_path, out_dir, grid_k, tol, sigma, seed, workers):
    """Simulate trajectories under the configured policy; write
    trajectories.csv and evaluation.csv."""
    cfg, out = _prepare(config_path, out_dir, grid_k, tol, sigma, seed, workers)
    model = cfg.build_model()
    sim_cfg = cfg.resolved["sim"]
    pol_cfg = sim_cfg["policy"]
    if pol_cfg["kind"] == "solved":
        _, family, _, vg, _ = _solve(cfg)
        policy = extract_policy(vg, family)
    elif pol_cfg["kind"] == "constant":
        policy = RelaxedControl.constant(float(pol_cfg["a"]))
    elif pol_cfg["kind"] == "switch":
        policy = RelaxedControl.from_pieces(
            [(0.0, float(pol_cfg["a"])), (float(pol_cfg["tau"]), 0.0)]
        )
    else:
        raise ConfigError("sim.policy.kind must be solved, constant or switch")
    x0 = float(sim_cfg["x0"])
    horizon = cfg.horizon(model)
    n_traj = int(sim_cfg["n_traj"])
    seed_v = int(sim_cfg["seed"])
    mean, se = evaluate_policy_mc(
        model, x0, policy, n_traj, seed_v, horizon=horizon,
        workers=int(sim_cfg.get("workers", 1)),
    )
    with open(out / "evaluation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "n_traj", "seed", "mean_cost", "stderr"])
        w.writerow([_fmt(x0), str(n_traj), str(seed_v), _fmt(mean), _fmt(se)])
    n_rec = min(int(sim_cfg["record_trajectories"]), n_traj)
    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj", "n", "T_n", "Y_n", "X_n", "segment_cost"])
        for i in range(n_rec):
            traj = simulate_trajectory(model, x0, policy, (seed_v, i), cost_horizon=horizon)
            for nn in range(len(traj.times)):
                seg = traj.segment_costs[nn] if nn < len(traj.segment_costs) else ""
                w.writerow([
                    str(i), str(nn), _fmt(traj.times[nn]),
                    _fmt(model.post_jump_states[traj.states[nn]][0]),
                    _fmt(traj.observations[nn][0]),
                    _fmt(seg) if seg != "" else "",
                ])
    click.echo(f"mean discounted cost {mean:.6g} (stderr {se:.3g}) over {n_traj} runs")


@main.command(name="filter")
@click.option("--events", "events_path", type=click.Path(), required=True,
              help="CSV with columns r_piece_spec,s,x.")
@click.option("--x0", type=float, default=None, help="Initial observation (default sim.x0).")
@_with_shared
def filter_cmd(events_path, x0, config_path, out_dir, grid_k, tol, sigma, seed, workers):
    """Replay an event log through the Bayes filter; write beliefs.csv."""
    cfg, out = _prepare(config_path, out_dir, grid_k, tol, sigma, seed, workers)
    model = cfg.build_model()
    events = []
    try:
        with open(events_path) as fh:
            for row in csv.DictReader(fh):
                events.append(
                    (parse_control(row["r_piece_spec"]), float(row["s"]), float(row["x"]))
                )
    except (KeyError, ValueError) as err:
        raise ConfigError(f"bad event log {events_path}: {err}") from None
    x0_val = float(cfg.resolved["sim"]["x0"]) if x0 is None else float(x0)
    beliefs = filter_trajectory(model, x0_val, events, kernel=cfg.kernel())
    with open(out / "beliefs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"mu_{i + 1}" for i in range(model.n_states)])
        for n, b in enumerate(beliefs):
            w.writerow([str(n)] + [_fmt(p) for p in b.probs])
    click.echo(f"filtered {len(events)} events; final belief "
               + "[" + ", ".join(_fmt(p) for p in beliefs[-1].probs) + "]")


@main.command()
@_with_shared
def crosscheck(config_path, out_dir, grid_k, tol, sigma, seed, workers):
    """Solve, then compare Monte Carlo cost of the solved policy against the
    filtered-MDP value; write zscores.csv.  Exits nonzero if any |z| >= 4."""
    cfg, out = _prepare(config_path, out_dir, grid_k, tol, sigma, seed, workers)
    model, family, grid, vg, report = _solve(cfg)
    policy = extract_policy(vg, family)
    sim_cfg = cfg.resolved["sim"]
    report_cc = cross_check(
        model,
        policy,
        [float(v) for v in cfg.resolved["crosscheck"]["observations"]],
        n_traj=int(sim_cfg["n_traj"]),
        seed=int(sim_cfg["seed"]),
        horizon=cfg.horizon(model),
        stage=cfg.stage(model),
        kernel=cfg.kernel(),
        workers=int(sim_cfg.get("workers", 1)),
    )
    with open(out / "zscores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "mc_mean", "stderr", "mdp_value", "z"])
        for r in report_cc.rows:
            w.writerow([_fmt(r.x0), _fmt(r.mc_mean), _fmt(r.stderr), _fmt(r.mdp_value), _fmt(r.z)])
    for r in report_cc.rows:
        click.echo(
            f"x0={r.x0:+.3g}: mc={r.mc_mean:.6g} (se {r.stderr:.3g}) "
            f"mdp={r.mdp_value:.6g} z={r.z:+.2f}"
        )
    if report_cc.max_abs_z >= 4.0:
        click.echo("cross-check FAILED: |z| >= 4", err=True)
        sys.exit(3)


@main.command()
@_with_shared
def sweep(config_path, out_dir, grid_k, tol, sigma, seed, workers):
    """Regularization-bandwidth sweep against the plain filter; write
    sigma_sweep.csv."""
    cfg, out = _prepare(config_path, out_dir, grid_k, tol, sigma, seed, workers)
    model = cfg.build_model()
    family = cfg.build_family()
    grid = build_simplex_grid(model.n_states, int(cfg.resolved["sweep"]["grid_k"]))
    result = sigma_sweep(
        model,
        grid,
        family,
        sigmas=[float(s) for s in cfg.resolved["sweep"]["sigmas"]],
        tol=float(cfg.resolved["solver"]["tol"]),
        max_iter=int(cfg.resolved["solver"]["max_iter"]),
        stage=cfg.stage(model),
        kind=cfg.resolved["solver"]["kernel"],
    )
    with open(out / "sigma_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma", "value_gap", "argmin_agreement"])
        for row in result.rows:
            w.writerow([_fmt(row.sigma), _fmt(row.value_gap), _fmt(row.argmin_agreement)])
    for row in result.rows:
        click.echo(f"sigma={row.sigma:g}: gap={row.value_gap:.4g} "
                   f"argmin agreement={row.argmin_agreement:.3f}")


@main.command()
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the config to a file instead of stdout.")
def example(out_path):
    """Print the fully resolved configuration of the built-in
    particle-steering model."""
    cfg = RunConfig(copy.deepcopy(_DEFAULTS))
    text = yaml.safe_dump(cfg.resolved, sort_keys=True, default_flow_style=False)
    if out_path is None:
        click.echo(text, nl=False)
    else:
        Path(out_path).write_text(text)


if __name__ == "__main__":
    main()
