"""Stage-two processing at the CPU.

Large-scale fading decoding (LSFD): statistics of the local filter outputs
are sample-averaged over small-scale realizations of a fixed large-scale
setup, the CPU weights each AP's soft estimate with the optimal LSFD vector,
and the combined stream is decoded in an outer detector/decoder loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import apfrontend, codec
from .apfrontend import GAMMA2_FLOOR, LocalOutput, detect_at_ap, soft_statistics
from .netmodel import Estimator

log = logging.getLogger(__name__)


@dataclass
class LsfdStats:
    """Sample means of the LSFD statistics.

    ``upsilon1[k]`` is (K, m_k, m_k): entry ``[i]`` is the cross-statistics
    matrix of user ``k``'s filters against user ``i``'s channels, restricted
    to the APs in ``serving[k]``.  Use :meth:`upsilon1_full` for the (L, L)
    zero-padded form.
    """

    g: np.ndarray  # (K, L) complex
    upsilon1: list  # K arrays (K, m_k, m_k)
    upsilon2: np.ndarray  # (K, L) real, diagonal of the per-user matrix
    serving: list  # K index arrays
    samples_used: int

    def upsilon1_full(self, k: int, i: int) -> np.ndarray:
        L = self.g.shape[1]
        out = np.zeros((L, L), dtype=complex)
        idx = self.serving[k]
        out[np.ix_(idx, idx)] = self.upsilon1[k][i]
        return out


@dataclass
class Diagnostics:
    flags: list = field(default_factory=list)


def _filters_batch(H_hat: np.ndarray, C: np.ndarray, eta: np.ndarray, sigma2: float, d: np.ndarray,
                   own_error_cov: bool = False) -> np.ndarray:
    """Local filters for a batch of realizations: (R, K, L, N), zero where d = 0."""
    W = np.zeros_like(H_hat)
    for l in range(d.shape[1]):
        served = np.flatnonzero(d[:, l])
        if served.size:
            W[:, served, l, :] = apfrontend.local_mmse_filters(
                H_hat[:, :, l, :], C[:, l], eta, sigma2, served, own_error_cov=own_error_cov)
    return W


def estimate_lsfd_stats(sqrt_R: np.ndarray, estimator: Estimator, eta: np.ndarray, sigma2: float,
                        d: np.ndarray, n_stat: int, rng: np.random.Generator, chunk: int = 100,
                        own_error_cov: bool = False) -> LsfdStats:
    """Monte Carlo estimate of the LSFD statistics for a fixed setup.

    Each of the ``n_stat`` realizations draws fresh channels and pilot noise,
    re-estimates the channels and recomputes the local filters.
    """
    if n_stat < 1:
        raise ValueError("n_stat must be >= 1")
    K, L, N, _ = sqrt_R.shape
    d = np.asarray(d, dtype=bool)
    serving = [np.flatnonzero(d[k]) for k in range(K)]
    g = np.zeros((K, L), dtype=complex)
    ups2 = np.zeros((K, L))
    ups1 = [np.zeros((K, s.size, s.size), dtype=complex) for s in serving]
    done = 0
    while done < n_stat:
        r = min(chunk, n_stat - done)
        z = (rng.standard_normal((r, K, L, N)) + 1j * rng.standard_normal((r, K, L, N))) / np.sqrt(2)
        H = np.einsum("klmn,rkln->rklm", sqrt_R, z)
        H_hat = estimator.estimate(estimator.observe(H, rng))
        W = _filters_batch(H_hat, estimator.C, eta, sigma2, d, own_error_cov)
        # U[r, k, i, l] = w_kl^H h_il
        U = np.einsum("rkln,riln->rkil", W.conj(), H)
        g += np.einsum("rkkl->kl", U)
        ups2 += np.sum(np.abs(W) ** 2, axis=(0, 3))
        for k in range(K):
            Uk = U[:, k][:, :, serving[k]]  # (r, K, m)
            ups1[k] += np.einsum("ril,rij->ilj", Uk, Uk.conj())
        done += r
    g /= n_stat
    ups2 /= n_stat
    for k in range(K):
        ups1[k] /= n_stat
    return LsfdStats(g=g, upsilon1=ups1, upsilon2=ups2, serving=serving, samples_used=n_stat)


def co_served_users(d: np.ndarray) -> list[np.ndarray]:
    """B_k: users sharing at least one serving AP with k (inclusive)."""
    d = np.asarray(d, dtype=bool)
    share = (d.astype(int) @ d.T.astype(int)) > 0
    return [np.flatnonzero(share[k] | (np.arange(d.shape[0]) == k)) for k in range(d.shape[0])]


def _interference_matrix(stats: LsfdStats, k: int, eta: np.ndarray, users) -> np.ndarray:
    return np.einsum("i,imn->mn", np.asarray(eta, dtype=float)[users], stats.upsilon1[k][users])


def lsfd_weights(stats: LsfdStats, B: list, eta: np.ndarray, sigma2: float,
                 diagnostics: Diagnostics | None = None) -> np.ndarray:
    """Optimal LSFD vectors, (K, L), zero outside each user's serving APs."""
    K, L = stats.g.shape
    a = np.zeros((K, L), dtype=complex)
    for k in range(K):
        idx = stats.serving[k]
        if idx.size == 0:
            continue
        M = _interference_matrix(stats, k, eta, B[k]) + sigma2 * np.diag(stats.upsilon2[k, idx])
        gk = stats.g[k, idx]
        try:
            sol = np.linalg.solve(M, gk)
            if not np.all(np.isfinite(sol)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            tr = np.trace(M).real
            M = M + 1e-12 * (tr if tr > 0 else 1.0) * np.eye(idx.size)
            sol = np.linalg.lstsq(M, gk, rcond=None)[0]
            if diagnostics is not None:
                diagnostics.flags.append(("singular_lsfd", k))
        a[k, idx] = sol
    return a


def sinr(stats: LsfdStats, k: int, a_k: np.ndarray, eta: np.ndarray, sigma2: float) -> float:
    """Use-and-then-forget SINR of user ``k`` for weight vector ``a_k`` (length L)."""
    idx = stats.serving[k]
    if idx.size == 0:
        return 0.0
    a = np.asarray(a_k)[idx]
    gk = stats.g[k, idx]
    eta = np.asarray(eta, dtype=float)
    signal = eta[k] * abs(np.vdot(a, gk)) ** 2
    M = (_interference_matrix(stats, k, eta, np.arange(len(eta))) - eta[k] * np.outer(gk, gk.conj())
         + sigma2 * np.diag(stats.upsilon2[k, idx]))
    denom = np.real(np.vdot(a, M @ a))
    if denom <= 0:
        return 0.0
    return max(signal / denom, 0.0)


def prelog(tau_p: int, tau_c: int) -> float:
    return 1.0 - tau_p / tau_c


def sinr_se(stats: LsfdStats, a: np.ndarray, eta: np.ndarray, sigma2: float, tau_p: int, tau_c: int):
    """Per-user SINR and spectral efficiency (bit/s/Hz)."""
    K = stats.g.shape[0]
    s = np.array([sinr(stats, k, a[k], eta, sigma2) for k in range(K)])
    return s, prelog(tau_p, tau_c) * np.log2(1.0 + s)


def cpu_combine(x_hat: np.ndarray, a: np.ndarray, d: np.ndarray) -> np.ndarray:
    """``x_tilde_k = sum_l d_kl conj(a_kl) x_hat_kl``; ``x_hat`` is (K, L, T)."""
    return np.einsum("kl,klt->kt", np.asarray(d) * np.conj(a), x_hat)


# ---------------------------------------------------------------- outer loop

@dataclass
class IddResult:
    info_bits: np.ndarray  # (K, k_info) decisions after the final outer iteration
    hard_per_iter: list  # per outer iteration, (K, n) decoder hard decisions
    llr_per_iter: list  # per outer iteration, (K, n) detector extrinsic LLRs
    x_tilde: np.ndarray  # (K, T) combined stream of the last iteration
    alpha: np.ndarray  # (K, T)
    gamma2: np.ndarray  # (K, T)


def _collect(outputs: list[LocalOutput], K: int, L: int, T: int):
    x_hat = np.zeros((K, L, T), dtype=complex)
    alpha = np.zeros((K, L, T), dtype=complex)
    cross = np.zeros((K, L, T, K), dtype=complex)
    floor = np.zeros((K, L, T))
    for l, out in enumerate(outputs):
        s = out.served
        x_hat[s, l] = out.x_hat
        alpha[s, l] = out.alpha
        cross[s, l] = out.cross
        floor[s, l] = out.floor
    return x_hat, alpha, cross, floor


def combined_awgn_params(a: np.ndarray, d: np.ndarray, alpha: np.ndarray, cross: np.ndarray,
                         floor: np.ndarray, eta: np.ndarray, soft_var: np.ndarray | None):
    """Gain and noise variance of the combined stream, per user and symbol.

    The residual of user ``i`` at AP ``l`` has variance ``v_i`` if AP ``l``
    cancels ``i`` (i.e. serves it) and 1 otherwise; residuals of the same
    symbol are correlated across APs, noise and estimation errors are not.
    """
    K, L, T = alpha.shape
    eta = np.asarray(eta, dtype=float)
    w = np.asarray(d) * np.conj(a)  # (K, L)
    alpha_t = np.einsum("kl,klt->kt", w, alpha)
    proj = np.einsum("kl,klti->kti", w, cross)  # sum_l conj(a) u_il
    if soft_var is None:
        var = np.ones((K, T))
        cancelled = np.zeros((K, L), dtype=bool)
    else:
        var = soft_var  # (K, T) of interferer i
        cancelled = np.asarray(d, dtype=bool)  # cancelled[i, l]
    # part of the projection from APs that do not cancel user i
    keep = (~cancelled).T.astype(float)  # (L, i)
    proj_unc = np.einsum("kl,klti,li->kti", w, cross, keep)
    v = var.T[None, :, :]  # (1, T, i)
    resid = v * np.abs(proj) ** 2 + (1.0 - v) * np.abs(proj_unc) ** 2
    resid = resid * eta[None, None, :] / eta[:, None, None]
    resid[np.arange(K), :, np.arange(K)] = 0.0
    gamma2 = resid.sum(axis=-1) + np.einsum("kl,klt->kt", np.abs(w) ** 2, floor)
    return alpha_t, np.maximum(gamma2, GAMMA2_FLOOR)


def run_idd(code: codec.LdpcCode, Y: np.ndarray, h_hat: np.ndarray, C: np.ndarray, eta: np.ndarray,
            sigma2: float, d: np.ndarray, a: np.ndarray, n_outer: int = 3, max_inner: int = 20,
            soft_ic: bool = True, own_error_cov: bool = False) -> IddResult:
    """Detect and decode every user's frame at the CPU.

    Each outer iteration: per-AP filtering (with soft cancellation from the
    previous decoder output when ``soft_ic``), LSFD combining, combined-link
    LLRs with the current priors, LDPC decoding, extrinsic feedback.  The
    first iteration runs with zero priors.
    """
    K, L = d.shape
    T = Y.shape[1]
    n = code.n
    d = np.asarray(d, dtype=bool)
    lc = np.zeros((K, n))
    hard_hist, llr_hist = [], []
    cached = None
    for it in range(n_outer):
        use_ic = soft_ic and it > 0
        if use_ic:
            xbar, var = soft_statistics(lc)
        if use_ic or cached is None:
            outputs = []
            for l in range(L):
                served = np.flatnonzero(d[:, l])
                outputs.append(detect_at_ap(
                    Y[l], h_hat[:, l], C[:, l], eta, sigma2, served,
                    soft_mean=xbar[served] if use_ic else None,
                    soft_var=var[served] if use_ic else None,
                    own_error_cov=own_error_cov))
            x_hat, alpha, cross, floor = _collect(outputs, K, L, T)
            x_t = cpu_combine(x_hat, a, d)
            alpha_t, gamma2_t = combined_awgn_params(a, d, alpha, cross, floor, eta,
                                                     var if use_ic else None)
            cached = (x_t, alpha_t, gamma2_t)
        x_t, alpha_t, gamma2_t = cached
        lg = apfrontend.bit_llr(x_t, alpha_t, gamma2_t, lc.reshape(K, T, 2)).reshape(K, n)
        dec = codec.decode(code, lg, max_inner)
        lc = dec.extrinsic
        llr_hist.append(lg)
        hard_hist.append(dec.hard_bits)
    return IddResult(info_bits=hard_hist[-1][:, :code.k_info], hard_per_iter=hard_hist,
                     llr_per_iter=llr_hist, x_tilde=x_t, alpha=alpha_t, gamma2=gamma2_t)
