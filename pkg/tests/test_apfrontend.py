import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from cfidd import apfrontend as fe
from cfidd import codec

finite = dict(allow_nan=False, allow_infinity=False)


def _crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def _setup(seed, K=4, N=3):
    rng = np.random.default_rng(seed)
    h = _crandn(rng, K, N)
    E = _crandn(rng, K, N, N) * 0.1
    C = E @ np.swapaxes(E, -1, -2).conj()
    eta = rng.uniform(0.5, 2.0, K)
    return rng, h, C, eta


# ---------------------------------------------------------------- filters

def test_scalar_filter_closed_form():
    h, c, eta, s2 = np.array([[0.6 - 0.8j]]), 0.3, 2.0, 0.5
    w = fe.local_mmse_filter(h, np.array([[[c]]]), np.array([eta]), s2, 0)
    assert w[0] == pytest.approx(eta * h[0, 0] / (eta * (abs(h[0, 0]) ** 2 + c) + s2), rel=1e-12)


def test_filters_match_single_filter_reference():
    _, h, C, eta = _setup(0)
    served = np.array([0, 2, 3])
    W = fe.local_mmse_filters(h, C, eta, 0.2, served)
    for s, k in enumerate(served):
        ref = fe.local_mmse_filter(h[served], C[served], eta[served], 0.2, s)
        np.testing.assert_allclose(W[s], ref, atol=1e-12)


def test_filter_against_explicit_inverse():
    _, h, C, eta = _setup(1)
    served = np.arange(4)
    Z = sum(eta[i] * (np.outer(h[i], h[i].conj()) + C[i]) for i in served) + 0.3 * np.eye(3)
    W = fe.local_mmse_filters(h, C, eta, 0.3, served)
    np.testing.assert_allclose(W[1], eta[1] * np.linalg.inv(Z) @ h[1], atol=1e-12)


def test_own_error_covariance_variant():
    _, h, C, eta = _setup(2)
    served = np.array([0, 1])
    W = fe.local_mmse_filters(h, C, eta, 0.1, served, own_error_cov=True)
    np.testing.assert_allclose(W[1], fe.local_mmse_filter(h[served], C[1], eta[served], 0.1, 1), atol=1e-12)


def test_noise_dominated_filter_is_matched():
    _, h, C, eta = _setup(3)
    w = fe.local_mmse_filters(h, C, eta, 1e9, np.arange(4))[2]
    cos = abs(np.vdot(w, h[2])) / (np.linalg.norm(w) * np.linalg.norm(h[2]))
    assert cos > 1 - 1e-6


def test_zero_power_interferer_changes_nothing():
    _, h, C, eta = _setup(4)
    base = fe.local_mmse_filters(h[:3], C[:3], eta[:3], 0.2, np.arange(3))
    eta0 = eta.copy()
    eta0[3] = 0.0
    more = fe.local_mmse_filters(h, C, eta0, 0.2, np.arange(4))[:3]
    np.testing.assert_allclose(more, base, atol=1e-12)


def test_perfectly_known_interferers_are_nulled():
    # residual variance 0 for the other served users removes them from the filter
    _, h, C, eta = _setup(5, K=3)
    v = np.zeros(3)
    W = fe.local_mmse_filters(h, C, eta, 0.2, np.arange(3), soft_var=v)
    Z = eta[0] * np.outer(h[0], h[0].conj()) + np.einsum("i,imn->mn", eta, C) + 0.2 * np.eye(3)
    np.testing.assert_allclose(W[0], eta[0] * np.linalg.solve(Z, h[0]), atol=1e-12)


def test_hermitian_solve_singular_uses_pseudoinverse():
    Z = np.array([[1.0, 1.0], [1.0, 1.0]], dtype=complex)
    b = np.array([[2.0], [2.0]], dtype=complex)
    np.testing.assert_allclose(fe.hermitian_solve(Z, b), np.linalg.pinv(Z) @ b, atol=1e-12)


def test_empty_served_set():
    _, h, C, eta = _setup(6)
    assert fe.local_mmse_filters(h, C, eta, 0.1, np.array([], dtype=int)).shape == (0, 3)


# ---------------------------------------------------------------- estimates and AWGN model

def test_deselected_user_estimate_is_zero():
    y = np.ones((5, 2), dtype=complex)
    assert not fe.local_soft_estimate(np.array([1.0, 2.0j]), y, d_kl=0).any()


def test_identity_channel_passes_symbol():
    eta, x = 4.0, codec.qpsk_map(np.array([0, 1]))
    h = np.array([0.5, 0.5j])
    w = h / np.vdot(h, h).real  # forces w^H h = 1
    assert fe.local_soft_estimate(w, math.sqrt(eta) * h * x) == pytest.approx(math.sqrt(eta) * x)


@given(a=st.complex_numbers(max_magnitude=10, **finite), b=st.complex_numbers(max_magnitude=10, **finite))
def test_soft_estimate_is_linear(a, b):
    rng = np.random.default_rng(0)
    w, y1, y2 = _crandn(rng, 3), _crandn(rng, 3), _crandn(rng, 3)
    lhs = fe.local_soft_estimate(w, a * y1 + b * y2)
    rhs = a * fe.local_soft_estimate(w, y1) + b * fe.local_soft_estimate(w, y2)
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_scalar_noiseless_awgn_params():
    h, eta, s2 = np.array([0.3 + 0.4j]), 2.0, 1e-15
    w = fe.local_mmse_filter(h[None], np.zeros((1, 1, 1)), np.array([eta]), s2, 0)
    psi = eta * np.outer(h, h.conj()) + s2 * np.eye(1)
    alpha, gamma2 = fe.awgn_params(w, h, psi, eta)
    assert alpha == pytest.approx(1.0, abs=1e-9)
    assert gamma2 < 1e-9


def test_gamma2_matches_simulated_residual_variance():
    rng, h, C, eta = _setup(7)
    s2, k, T = 0.3, 1, 100_000
    w = fe.local_mmse_filters(h, C, eta, s2, np.arange(4))[k]
    psi = fe.received_covariance(h, C, eta, s2)
    alpha, gamma2 = fe.awgn_params(w, h[k], psi, eta[k])
    # per-symbol channel = estimate + independent error drawn from C
    Lc = np.linalg.cholesky(C + 1e-15 * np.eye(3))
    H = h[None] + np.einsum("kmn,tkn->tkm", Lc, _crandn(rng, T, 4, 3))
    x = codec.QPSK_POINTS[rng.integers(0, 4, size=(T, 4))]
    y = np.einsum("k,tkn,tk->tn", np.sqrt(eta), H, x) + math.sqrt(s2) * _crandn(rng, T, 3)
    x_hat = fe.local_soft_estimate(w, y) / math.sqrt(eta[k])
    sample = np.var(x_hat - alpha * x[:, k])
    assert gamma2 == pytest.approx(sample, rel=0.05)


def test_detect_at_ap_agrees_with_awgn_params():
    rng, h, C, eta = _setup(8)
    served = np.array([0, 2])
    y = _crandn(rng, 16, 3)
    out = fe.detect_at_ap(y, h, C, eta, 0.4, served)
    psi = fe.received_covariance(h, C, eta, 0.4)
    W = fe.local_mmse_filters(h, C, eta, 0.4, served)
    for s, k in enumerate(served):
        alpha, gamma2 = fe.awgn_params(W[s], h[k], psi, eta[k])
        np.testing.assert_allclose(out.alpha[s], alpha, atol=1e-12)
        np.testing.assert_allclose(out.gamma2[s], gamma2, rtol=1e-9)
        np.testing.assert_allclose(out.x_hat[s], fe.local_soft_estimate(W[s], y) / math.sqrt(eta[k]), atol=1e-12)


def test_soft_cancellation_with_certain_priors():
    rng, h, C, eta = _setup(9, K=3)
    C = np.zeros_like(C)
    T = 8
    x = codec.QPSK_POINTS[rng.integers(0, 4, size=(3, T))]
    y = np.einsum("k,kn,kt->tn", np.sqrt(eta), h, x)
    out = fe.detect_at_ap(y, h, C, eta, 1e-3, np.arange(3), soft_mean=x, soft_var=np.zeros((3, T)))
    # with the interferers removed the output is the single-user filter output
    w0 = eta[0] * h[0] / (eta[0] * np.vdot(h[0], h[0]).real + 1e-3)
    np.testing.assert_allclose(out.x_hat[0], (np.vdot(w0, h[0]) * x[0]), atol=1e-9)


# ---------------------------------------------------------------- priors and LLRs

def test_uniform_prior():
    np.testing.assert_allclose(fe.prior_from_llr(np.zeros(2)), 0.25)


def test_certain_prior_picks_labelled_symbol():
    p = fe.prior_from_llr(np.array([30.0, -30.0]))
    assert p[2] > 1 - 1e-9  # bits (1, 0)
    assert codec.QPSK_POINTS[2] == pytest.approx(math.sqrt(0.5) * (1 - 1j))


def test_bit_llr_examples():
    s = math.sqrt(0.5)
    np.testing.assert_allclose(fe.bit_llr(s * (1 - 1j), 1.0, 1.0), [2.0, -2.0], atol=1e-12)
    np.testing.assert_allclose(fe.bit_llr(0.0, 1.0, 1.0), [0.0, 0.0], atol=1e-15)


def _direct_llr(x_hat, alpha, gamma2, lc):
    """Literal four-term sum over the constellation, in the probability domain."""
    p1 = 1.0 / (1.0 + np.exp(-lc))
    out = []
    for i in range(2):
        num = den = 0.0
        for bits, s in zip(codec.QPSK_BITS, codec.QPSK_POINTS):
            prior = np.prod([p1[j] if bits[j] else 1 - p1[j] for j in range(2)])
            term = math.exp(-abs(x_hat - alpha * s) ** 2 / gamma2) * prior
            if bits[i]:
                num += term
            else:
                den += term
        out.append(math.log(num / den) - lc[i])
    return np.clip(out, -30, 30)


@settings(max_examples=200, deadline=None)
@given(xr=st.floats(-3, 3), xi=st.floats(-3, 3), ar=st.floats(-2, 2), ai=st.floats(-2, 2),
       g=st.floats(0.1, 5), l1=st.floats(-10, 10), l2=st.floats(-10, 10))
def test_bit_llr_matches_direct_sum(xr, xi, ar, ai, g, l1, l2):
    lc = np.array([l1, l2])
    got = fe.bit_llr(complex(xr, xi), complex(ar, ai), g, lc)
    np.testing.assert_allclose(got, _direct_llr(complex(xr, xi), complex(ar, ai), g, lc), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(xr=st.floats(-2, 2), xi=st.floats(-2, 2), ar=st.floats(0.1, 2), g=st.floats(0.2, 4),
       cr=st.floats(-3, 3), ci=st.floats(-3, 3), l1=st.floats(-5, 5), l2=st.floats(-5, 5))
def test_bit_llr_scaling_invariance(xr, xi, ar, g, cr, ci, l1, l2):
    c = complex(cr, ci)
    assume(abs(c) > 0.1)
    x, a, lc = complex(xr, xi), complex(ar, 0.3), np.array([l1, l2])
    np.testing.assert_allclose(fe.bit_llr(c * x, c * a, abs(c) ** 2 * g, lc), fe.bit_llr(x, a, g, lc), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(r1=st.floats(-2, 2), dr=st.floats(1e-3, 1), xi=st.floats(-2, 2), a=st.floats(0.1, 2), g=st.floats(0.5, 4))
def test_bit_llr_monotone_in_real_part(r1, dr, xi, a, g):
    lo = fe.bit_llr(complex(r1, xi), a, g)[0]
    hi = fe.bit_llr(complex(r1 + dr, xi), a, g)[0]
    assert hi > lo


def test_bit_llr_broadcasts_and_clamps():
    x = np.full((3, 5), 100.0 + 0j)
    out = fe.bit_llr(x, 1.0, 1e-3)
    assert out.shape == (3, 5, 2)
    assert np.all(out[..., 0] == 30.0)
