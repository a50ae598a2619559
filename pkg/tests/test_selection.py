import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cfidd import selection
from cfidd.selection import SelectionError, ServiceMap, Strategy

betas = st.integers(1, 6).flatmap(lambda K: st.integers(1, 6).flatmap(
    lambda L: arrays(float, (K, L), elements=st.floats(1e-12, 1.0))))


def test_two_user_walkthrough():
    beta = np.array([[2.0], [1.0]])
    assert selection.mean_test(beta)[:, 0].tolist() == [True, False]
    assert selection.initial_access(beta, 2).D[0].tolist() == [0, 1]


def test_equal_gains_trimmed_by_lowest_index():
    beta = np.ones((5, 2))
    assert selection.mean_test(beta).all()
    m = selection.initial_access(beta, 3)
    assert m.D[0].tolist() == [0, 1, 2]
    # users 3 and 4 overflow to the second AP, which fills its last slot with user 0
    assert m.D[1].tolist() == [0, 3, 4]


def test_infeasible_load_raises():
    with pytest.raises(SelectionError):
        selection.initial_access(np.ones((3, 1)), 2)


def test_masters_precede_other_requests():
    # AP 0 is master for users 0 and 1 but has one slot; user 1 must still find an AP
    beta = np.array([[0.9, 0.1, 0.05], [0.8, 0.2, 0.1], [0.1, 0.7, 0.3]])
    out = selection.enforce_constraints(np.ones((3, 3), dtype=bool), beta, 1)
    assert out.astype(int).tolist() == [[1, 0, 0], [0, 0, 1], [0, 1, 0]]


def test_all_aps():
    m = selection.select(Strategy.ALL_APS, np.ones((3, 4)), 1)
    assert m.d.all()


def test_llr_refine_walkthrough():
    # AP 0 serves users 0 and 1 with mean |LLR| 5 and 1; AP 1 is user 1's master
    beta = np.array([[1.0, 0.1], [0.2, 0.9]])
    prior = ServiceMap(np.array([[True, True], [True, True]]))
    llr = np.array([[5.0, 0.5], [1.0, 3.0]])
    out = selection.llr_refine(prior, llr, beta, 2)
    assert out.D[0].tolist() == [0]
    assert out.D[1].tolist() == [1]
    # if AP 0 were user 1's master, user 1 would be put back
    beta2 = np.array([[1.0, 0.1], [0.9, 0.2]])
    assert selection.llr_refine(prior, llr, beta2, 2).D[0].tolist() == [0, 1]


def test_llr_strategies_need_llrs():
    with pytest.raises(SelectionError):
        selection.select(Strategy.LLR_M, np.ones((2, 2)), 2)
    with pytest.raises(SelectionError):
        selection.select(Strategy.RANDOM, np.ones((2, 2)), 2)


def test_strategy_parsing():
    assert Strategy.parse("llr-m") is Strategy.LLR_M
    assert Strategy.parse("AllAPs") is Strategy.ALL_APS
    assert Strategy.parse("all_aps") is Strategy.ALL_APS
    with pytest.raises(ValueError):
        Strategy.parse("best")


def test_initializers():
    assert selection.initializer(Strategy.LLR_LLSF) is Strategy.LLSF
    assert selection.initializer(Strategy.LLR_LECG) is Strategy.LECG
    assert selection.initializer(Strategy.LLR_M) is None


def _check_map(m: ServiceMap, tau_p):
    m.validate(tau_p)
    K, L = m.d.shape
    for l, users in enumerate(m.D):
        assert set(users) == set(np.flatnonzero(m.d[:, l]))
    for k, aps in enumerate(m.M):
        assert set(aps) == set(np.flatnonzero(m.d[k]))
        for i in m.B[k]:
            assert k == i or np.any(m.d[k] & m.d[i])


@settings(max_examples=80, deadline=None)
@given(beta=betas, tau_p=st.integers(1, 6), seed=st.integers(0, 1000))
def test_every_strategy_emits_valid_maps(beta, tau_p, seed):
    K, L = beta.shape
    if K > tau_p * L:
        with pytest.raises(SelectionError):
            selection.initial_access(beta, tau_p)
        return
    rng = np.random.default_rng(seed)
    h_hat = rng.standard_normal((K, L, 2)) + 1j * rng.standard_normal((K, L, 2))
    eta = rng.uniform(0.1, 1.0, K)
    maps = [selection.initial_access(beta, tau_p), selection.lecg_map(h_hat, eta, beta, tau_p),
            selection.random_map(beta, tau_p, rng), selection.strongest_map(beta, tau_p)]
    llr = rng.uniform(0, 10, (K, L))
    maps += [selection.llr_refine(m, llr, beta, tau_p) for m in maps[:2]]
    for m in maps:
        _check_map(m, tau_p)
    # a user keeps its master AP whenever that AP is master for at most tau_p users
    master = np.argmax(beta, axis=1)
    uncontested = np.bincount(master, minlength=L)[master] <= tau_p
    assert maps[0].d[np.arange(K), master][uncontested].all()


@settings(max_examples=60, deadline=None)
@given(beta=betas, scale=st.floats(1e-3, 1e3), col=st.integers(0, 5))
def test_llsf_mean_test_is_scale_invariant(beta, scale, col):
    col = col % beta.shape[1]
    scaled = beta.copy()
    scaled[:, col] *= scale
    np.testing.assert_array_equal(selection.mean_test(scaled)[:, col], selection.mean_test(beta)[:, col])


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_fronthaul_monotone(K, m, extra):
    f = selection.fronthaul_load
    assert f(K + extra, m) >= f(K, m)
    assert f(K, m + extra) >= f(K, m)


def test_fronthaul_examples():
    assert selection.fronthaul_load(10, 9) == 4185
    assert selection.fronthaul_load(10, 25) == 31625
    assert isinstance(selection.fronthaul_load(10, 9), int)
    assert selection.fronthaul_load(10, 0) == 0
    assert selection.fronthaul_load(1, 0.5) == pytest.approx(0.5 + (0.25 + 0.5) / 2)
    with pytest.raises(ValueError):
        selection.fronthaul_load(-1, 2)


def test_fronthaul_is_fast():
    t = time.perf_counter()
    selection.fronthaul_load(10, 9)
    assert time.perf_counter() - t < 1e-3


def test_flop_examples():
    assert selection.flop_count("llr", M_c=2) == 16
    assert selection.flop_count("llr_selection", K=10, m=1, M_c=2) == 27
    assert selection.flop_count("soft_ic", L=2, N=4) == 512
    assert selection.flop_count("proposed", L=2, N=4) == 128
    assert selection.flop_count("mbdf", L=2, N=4, B=8) == 8 * 512
    with pytest.raises(ValueError):
        selection.flop_count("magic")


def test_accounting_rows():
    rows = selection.accounting_rows(10, 9, 4, 9)
    assert [r["scheme"] for r in rows] == list(selection.FLOP_SCHEMES)
    assert all(r["fronthaul"] == 4185 for r in rows)


@settings(max_examples=40, deadline=None)
@given(beta=betas, seed=st.integers(0, 100))
def test_all_aps_dominates(beta, seed):
    K, L = beta.shape
    tau_p = K  # every strategy feasible
    rng = np.random.default_rng(seed)
    full = selection.select(Strategy.ALL_APS, beta, tau_p).d
    for m in (selection.initial_access(beta, tau_p), selection.random_map(beta, tau_p, rng)):
        assert np.all(full >= m.d)


def test_service_map_json_round_trip():
    m = ServiceMap(np.array([[1, 0, 1], [0, 1, 1]], dtype=bool))
    back = ServiceMap.from_json(m.to_json())
    assert np.array_equal(back.d, m.d)
    assert [b.tolist() for b in m.B] == [[0, 1], [0, 1]]


def test_validate_rejects_bad_maps():
    with pytest.raises(SelectionError):
        ServiceMap(np.array([[1, 0], [0, 0]], dtype=bool)).validate(2)
    with pytest.raises(SelectionError):
        ServiceMap(np.ones((3, 1), dtype=bool)).validate(2)
