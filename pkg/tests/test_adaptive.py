import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adapttikh.adaptive import TRACE_COLUMNS, AdaptiveConfig, dorfler_mark, run_adaptive
from adapttikh.benchmark import add_noise, benchmark_mesh, y_dagger_data
from adapttikh.errors import InvalidArgument
from adapttikh.estimators import EstimatorConstants
from adapttikh.fem import FeFunction

# constants calibrated on the default benchmark mesh (see the rate study)
CONSTANTS = EstimatorConstants(c_I=0.181, c_dirac=0.1469, c_inf=0.018)


def noisy_ring(n_boundary, delta, seed=0):
    mesh = benchmark_mesh(n_boundary, 1)
    g = y_dagger_data(mesh)
    noise = FeFunction(mesh, add_noise(g, delta, seed=seed).coefficients - g.coefficients)
    return mesh, g, noise


# -- configuration ------------------------------------------------------------------------


def test_defaults_satisfy_hypothesis():
    c = AdaptiveConfig()
    assert c.tau_upper > c.tau_lower >= max(np.sqrt(1 + 2 * c.c2), 1 + c.c1)
    assert (c.tau_upper, c.theta, c.alpha0) == (2.0, 0.6, 1e-2)


@pytest.mark.parametrize("bad", [
    {"tau_lower": 1.2},
    {"tau_upper": 1.5},
    {"c2": 2.0},
    {"theta": 1.0},
    {"theta": 0.0},
    {"theta_mark": 0.0},
    {"theta_mark": 1.5},
    {"delta": 0.0},
    {"max_inner": 0},
])
def test_invalid_config(bad):
    with pytest.raises(InvalidArgument):
        AdaptiveConfig(**bad)


def test_alpha_sequence_exact():
    c = AdaptiveConfig(alpha0=0.02, theta=0.6)
    assert [c.alpha(k) for k in range(3)] == [0.02, 0.02 * 0.6, 0.02 * 0.6**2]


# -- marking ------------------------------------------------------------------------------


def test_dorfler_examples():
    ind = np.array([1.0, 3.0, 2.0, 3.0])
    # squares 1, 9, 4, 9 (total 23); half the total needs the two largest
    np.testing.assert_array_equal(dorfler_mark(ind, np.sqrt(0.5)), [1, 3])
    # ties go to the lower id
    np.testing.assert_array_equal(dorfler_mark(ind, 0.1), [1])
    np.testing.assert_array_equal(dorfler_mark(ind, 1.0), [0, 1, 2, 3])
    assert dorfler_mark(np.zeros(5), 0.5).size == 0
    np.testing.assert_array_equal(dorfler_mark(np.array([0.0, 2.0, 0.0]), 1.0), [1])


def test_dorfler_invalid():
    with pytest.raises(InvalidArgument):
        dorfler_mark(np.array([1.0, -1.0]), 0.5)
    with pytest.raises(InvalidArgument):
        dorfler_mark(np.array([1.0]), 0.0)


@given(st.lists(st.floats(0, 1e3, allow_subnormal=False), min_size=1, max_size=60),
       st.floats(0.05, 1.0))
def test_dorfler_minimal_bulk(values, theta):
    ind = np.array(values)
    marked = dorfler_mark(ind, theta)
    sq = ind**2
    total = sq.sum()
    if total == 0:
        assert marked.size == 0
        return
    assert sq[marked].sum() >= theta**2 * total * (1 - 1e-12)
    # minimal: dropping the smallest marked contribution breaks the criterion
    if marked.size > 1:
        weakest = sq[marked].min()
        assert sq[marked].sum() - weakest < theta**2 * total * (1 + 1e-12)
    # greedy: every unmarked indicator is at most the smallest marked one
    rest = np.setdiff1d(np.arange(len(ind)), marked)
    if rest.size:
        assert ind[rest].max() <= ind[marked].min()


# -- the loop -----------------------------------------------------------------------------


def test_noise_dominated_data_stops_at_first_alpha():
    mesh = benchmark_mesh(16, 1)
    zero = FeFunction(mesh, np.zeros(mesh.n_vertices))
    noise = add_noise(zero, 1e-3, seed=3)
    trace = run_adaptive(AdaptiveConfig(delta=1e-3), mesh, "measure", zero, CONSTANTS,
                         noise=noise)
    assert trace.status == "overshoot"
    assert {r.k for r in trace.records} == {0}
    assert trace.final.discrepancy <= 1e-3 * (1 + 1e-12)


@pytest.fixture(scope="module")
def accepted_trace():
    mesh, g, noise = noisy_ring(16, 0.06)
    cfg = AdaptiveConfig(delta=0.06, alpha0=0.05, max_inner=60)
    return run_adaptive(cfg, mesh, "measure", g, CONSTANTS, noise=noise)


def test_accepted_final_record(accepted_trace):
    t = accepted_trace
    c = t.config
    assert t.status == "accepted" and t.succeeded
    f = t.final
    assert f.accepted
    assert c.tau_lower * c.delta <= f.discrepancy <= c.tau_upper * c.delta
    assert f.discrepancy_gap <= c.c1 * c.delta
    assert f.functional_bound <= c.c2 * c.delta**2


def test_trace_structure(accepted_trace):
    t = accepted_trace
    c = t.config
    alphas = t.alphas
    assert len(alphas) >= 2
    for k, a in enumerate(alphas):
        assert a == c.alpha0 * c.theta**k
    for k in range(len(alphas)):
        ndof = [r.ndof for r in t.records if r.k == k]
        assert all(b >= a for a, b in zip(ndof, ndof[1:]))
    for r in t.records:
        assert 0.0 <= r.eta_kappa <= 1.0


def _longest_outer(trace):
    ks = [r.k for r in trace.records]
    return max(set(ks), key=ks.count)


def test_residual_bound_trend(accepted_trace):
    # overall decrease within the longest outer step
    k = _longest_outer(accepted_trace)
    rb = [r.residual_bound for r in accepted_trace.records if r.k == k]
    assert len(rb) > 5 and rb[-1] < rb[0]
    nd = [r.ndof for r in accepted_trace.records if r.k == k]
    assert np.polyfit(np.log(nd), np.log(rb), 1)[0] < 0


@pytest.mark.xfail(strict=True, reason=(
    "the residual bound can grow by up to ~1.5x in one Dorfler step on the ring "
    "benchmark; only the overall trend decreases (see the decisions ledger)"))
def test_residual_bound_stepwise_slack(accepted_trace):
    for k in set(r.k for r in accepted_trace.records):
        rb = [r.residual_bound for r in accepted_trace.records if r.k == k]
        for a, b in zip(rb, rb[1:]):
            assert b <= 1.2 * a


def test_trace_serialization(accepted_trace):
    text = accepted_trace.to_csv()
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == TRACE_COLUMNS
    assert len(rows) == len(accepted_trace.records) + 1
    d = json.loads(accepted_trace.to_json())
    assert d["status"] == "accepted"
    assert sum(len(o["inner"]) for o in d["outer"]) == len(accepted_trace.records)
    assert [o["k"] for o in d["outer"]] == list(range(len(accepted_trace.alphas)))


def test_deterministic():
    mesh, g, noise = noisy_ring(16, 0.05)
    cfg = AdaptiveConfig(delta=0.05, alpha0=0.05, tau_lower=2.0, tau_upper=3.0, c1=1.0,
                         c2=1.5, max_inner=10)
    a = run_adaptive(cfg, mesh, "measure", g, CONSTANTS, noise=noise)
    b = run_adaptive(cfg, mesh, "measure", g, CONSTANTS, noise=noise)
    assert a.to_csv() == b.to_csv()


def test_max_inner_flag():
    mesh, g, noise = noisy_ring(16, 0.01)
    cfg = AdaptiveConfig(delta=0.01, max_inner=2)
    t = run_adaptive(cfg, mesh, "measure", g, CONSTANTS, noise=noise)
    assert t.status == "max_inner" and not t.succeeded
    assert len(t.records) == 2


def test_max_elements_flag():
    mesh, g, noise = noisy_ring(16, 0.01)
    cfg = AdaptiveConfig(delta=0.01, max_elements=100)
    t = run_adaptive(cfg, mesh, "measure", g, CONSTANTS, noise=noise)
    assert t.status == "max_elements"


@pytest.mark.parametrize("kind", ["l2", "ivanov"])
def test_other_kinds_run(kind):
    mesh, g, noise = noisy_ring(16, 0.05)
    cfg = AdaptiveConfig(delta=0.05, alpha0=0.05, max_inner=3, max_outer=2)
    t = run_adaptive(cfg, mesh, kind, g, EstimatorConstants(c_I=0.05), noise=noise)
    assert t.records and t.status in ("accepted", "overshoot", "max_inner", "max_outer")


def test_callable_data():
    mesh = benchmark_mesh(16, 1)
    cfg = AdaptiveConfig(delta=0.05, alpha0=0.05, tau_lower=2.0, tau_upper=3.0, c1=1.0,
                         c2=1.5, max_inner=4, max_outer=3)
    from adapttikh.benchmark import exact_state
    t = run_adaptive(cfg, mesh, "measure", lambda p: exact_state(0.5, p), CONSTANTS)
    assert t.records
