import json

import pytest

from vecnet import verify as V


@pytest.mark.parametrize("name, kwargs", [
    ("descent", {"n_instances": 50}),
    ("danskin", {"n_instances": 10}),
    ("superposition", {"n_pairs": 500}),
    ("rank", {"n_settles": 10}),
    ("recovery", {"n_trials": 5, "d": 64, "K": 80}),
    ("masked", {"n_instances": 6}),
    ("fista", {"n_instances": 10, "required": 9}),
    ("rk4", {}),
])
def test_suites_pass_at_small_sizes(name, kwargs):
    res = V.SUITES[name](seed=1, **kwargs)
    assert res.passed, res.stats
    json.dumps(res.as_dict())


def test_failing_suite_is_reported():
    # an impossible tolerance must fail rather than pass silently
    res = V.superposition(n_pairs=100, tol=-1.0)
    assert not res.passed


def test_run_suites_report_shape():
    rep = V.run_suites(["superposition", "rk4"], seed=2)
    assert rep["seed"] == 2 and rep["passed"] is True
    assert set(rep["suites"]) == {"superposition", "rk4"}
    assert all("seconds" in s for s in rep["suites"].values())
    with pytest.raises(KeyError):
        V.run_suites(["bogus"])


def test_circular_orbit_is_periodic():
    state, exact, steps = V.circular_orbit(0.01)
    assert steps > 0
    assert abs(exact - state.positions).max() < 0.05
