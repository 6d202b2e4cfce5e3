import time

import numpy as np
import pytest

import popdmp as P


@pytest.fixture(scope="session")
def steering():
    return P.particle_steering_model()


@pytest.fixture(scope="session")
def steering_uniform_q0():
    return P.particle_steering_model(q0="uniform")


@pytest.fixture(scope="session")
def family():
    return P.switching_family()


@pytest.fixture(scope="session")
def ctx(steering):
    return P.StageContext(steering)


@pytest.fixture(scope="session")
def solved15(steering, family):
    grid = P.build_simplex_grid(3, 15)
    sweep = P.BellmanSweep(steering, grid, family)
    vg, report = P.value_iteration(steering, grid, family, tol=1e-4, sweep=sweep)
    return grid, vg, report, sweep


@pytest.fixture(scope="session")
def solved40(steering, family):
    t0 = time.perf_counter()
    grid = P.build_simplex_grid(3, 40)
    sweep = P.BellmanSweep(steering, grid, family)
    vg, report = P.value_iteration(steering, grid, family, tol=1e-4, max_iter=200, sweep=sweep)
    elapsed = time.perf_counter() - t0
    return grid, vg, report, sweep, elapsed


def mirror_gap(grid, values):
    """Sup-norm asymmetry of a value function under reversing the belief."""
    lat = np.rint(grid.points * grid.subdivisions).astype(int)
    idx_of = {tuple(row): i for i, row in enumerate(lat)}
    gap = 0.0
    for i, row in enumerate(lat):
        j = idx_of[tuple(row[::-1])]
        gap = max(gap, abs(values[i] - values[j]))
    return gap
