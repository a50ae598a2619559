"""Stage-one processing at each access point.

Local MMSE filtering over the AP's served users, an AWGN-equivalent model of
each filter output, and extrinsic bit LLRs for Gray QPSK.  With decoder
priors available, the served users' soft symbols are cancelled before
filtering (soft interference cancellation); with zero priors this reduces to
the plain local MMSE receiver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec
from .codec import LLR_CLAMP, QPSK_BITS, QPSK_POINTS

GAMMA2_FLOOR = 1e-12

# bit labels b in {0, 1} -> state {-1, +1}, shape (4, 2)
_STATES = 2.0 * QPSK_BITS - 1.0


def hermitian_solve(Z: np.ndarray, b: np.ndarray, psd_hint: bool = True) -> np.ndarray:
    """Solve ``Z x = b`` for batched Hermitian PSD ``Z``; pseudoinverse when singular."""
    try:
        x = np.linalg.solve(Z, b)
        if np.all(np.isfinite(x)):
            return x
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(Z)
    tol = 1e-12 * np.abs(np.trace(Z, axis1=-2, axis2=-1))[..., None]
    inv = np.where(w > tol, 1.0 / np.where(w > tol, w, 1.0), 0.0)
    return (V * inv[..., None, :]) @ (np.swapaxes(V, -1, -2).conj() @ b)


def local_mmse_filters(h_hat: np.ndarray, C: np.ndarray, eta: np.ndarray, sigma2: float,
                       served: np.ndarray, soft_var: np.ndarray | None = None,
                       own_error_cov: bool = False) -> np.ndarray:
    """Local MMSE receive filters for the served users of one AP.

    Parameters
    ----------
    h_hat : (..., K, N) channel estimates at this AP for every user.
    C : (K, N, N) estimation error covariances at this AP.
    eta : (K,) transmit powers.
    served : (S,) indices of the users the AP serves.
    soft_var : (..., S) residual symbol variances after soft cancellation.
        ``None`` means no cancellation (all ones).  The target user's own
        variance is always taken as one.
    own_error_cov : use the target user's error covariance for every term of
        the sum instead of each interferer's own.

    Returns
    -------
    (..., S, N) filters ``w = eta_k Z_k^-1 h_hat_k``.
    """
    served = np.asarray(served, dtype=int)
    S = served.size
    N = h_hat.shape[-1]
    hs = h_hat[..., served, :]
    es = np.asarray(eta, dtype=float)[served]
    batch = hs.shape[:-2]
    if S == 0:
        return np.zeros(batch + (0, N), dtype=complex)
    v = np.ones(batch + (S,)) if soft_var is None else np.broadcast_to(soft_var, batch + (S,))
    outer = hs[..., :, :, None] * hs[..., :, None, :].conj()  # (..., S, N, N)
    G = np.einsum("...s,...smn->...mn", es * v, outer)
    eye = np.eye(N)
    if own_error_cov:
        base = es.sum() * C[served] + sigma2 * eye  # (S, N, N)
        Z = G[..., None, :, :] + base
    else:
        base = np.einsum("s,smn->mn", es, C[served]) + sigma2 * eye
        Z = np.broadcast_to((G + base)[..., None, :, :], batch + (S, N, N))
    # the target user's own symbol is never cancelled
    Z = Z + (es * (1.0 - v))[..., None, None] * outer
    x = hermitian_solve(Z, hs[..., None])[..., 0]
    return es[:, None] * x


def local_mmse_filter(h_hat_served: np.ndarray, C_served: np.ndarray, eta_served: np.ndarray,
                      sigma2: float, target: int) -> np.ndarray:
    """Single filter ``w_kl`` for ``target`` (an index into the served users).

    ``C_served`` is either the (S, N, N) per-user error covariances or one
    (N, N) matrix used in every term of the sum.
    """
    h = np.asarray(h_hat_served, dtype=complex)
    eta_served = np.asarray(eta_served, dtype=float)
    C_served = np.asarray(C_served)
    N = h.shape[-1]
    Z = np.einsum("s,sm,sn->mn", eta_served, h, h.conj()) + sigma2 * np.eye(N)
    if C_served.ndim == 2:
        Z = Z + eta_served.sum() * C_served
    else:
        Z = Z + np.einsum("s,smn->mn", eta_served, C_served)
    return eta_served[target] * hermitian_solve(Z, h[target][:, None])[:, 0]


def local_soft_estimate(w_kl: np.ndarray, y_l: np.ndarray, d_kl=1) -> np.ndarray:
    """``d_kl w^H y`` for one observation (N,) or a frame (T, N)."""
    return d_kl * (np.asarray(y_l) @ np.asarray(w_kl).conj())


def awgn_params(w_kl: np.ndarray, h_hat_kl: np.ndarray, psi: np.ndarray, eta_k: float = 1.0):
    """Effective gain and noise variance of a filter output.

    ``alpha = w^H h_hat`` and ``gamma2 = w^H psi w / eta_k - |alpha|^2`` (floored),
    where ``psi`` is the received-signal covariance; ``eta_k`` normalizes the
    output to a unit-energy symbol.
    """
    w = np.asarray(w_kl)
    alpha = np.vdot(w, h_hat_kl)
    power = np.real(np.vdot(w, psi @ w)) / eta_k
    return alpha, max(power - abs(alpha) ** 2, GAMMA2_FLOOR)


def received_covariance(h_hat_l: np.ndarray, C_l: np.ndarray, eta: np.ndarray, sigma2: float,
                        users=None) -> np.ndarray:
    """``sum_i eta_i (h_hat_i h_hat_i^H + C_i) + sigma2 I`` over ``users`` (default all)."""
    idx = np.arange(h_hat_l.shape[0]) if users is None else np.asarray(users, dtype=int)
    h = h_hat_l[idx]
    N = h.shape[-1]
    eta = np.asarray(eta, dtype=float)[idx]
    return (np.einsum("i,im,in->mn", eta, h, h.conj()) + np.einsum("i,imn->mn", eta, C_l[idx])
            + sigma2 * np.eye(N))


# ---------------------------------------------------------------- LLRs

def prior_from_llr(lc: np.ndarray) -> np.ndarray:
    """A-priori probabilities (..., 4) of the QPSK points from bit LLRs (..., 2)."""
    lc = np.clip(np.asarray(lc, dtype=float), -LLR_CLAMP, LLR_CLAMP)
    return np.exp(_log_prior(lc))


def _log_prior(lc):
    # log prod_i [1 + exp(-state_i * Lc_i)]^-1
    return -np.logaddexp(0.0, -(lc[..., None, :] * _STATES)).sum(axis=-1)


def bit_llr(x_hat, alpha, gamma2, lc=None) -> np.ndarray:
    """Extrinsic bit LLRs (..., 2) of a soft estimate under the Gaussian output model.

    Exact log-sum-exp over the two hypotheses per bit, minus the prior LLR.
    Inputs broadcast; ``lc`` defaults to zero priors.
    """
    x_hat = np.asarray(x_hat, dtype=complex)
    alpha = np.asarray(alpha, dtype=complex)
    gamma2 = np.maximum(np.asarray(gamma2, dtype=float), GAMMA2_FLOOR)
    shape = np.broadcast_shapes(x_hat.shape, alpha.shape, gamma2.shape)
    if lc is None:
        lc = np.zeros(shape + (2,))
    lc = np.clip(np.asarray(lc, dtype=float), -LLR_CLAMP, LLR_CLAMP)
    dist = np.abs(x_hat[..., None] - alpha[..., None] * QPSK_POINTS) ** 2
    metric = -dist / gamma2[..., None] + _log_prior(lc)  # (..., 4)
    out = np.empty(np.broadcast_shapes(shape, lc.shape[:-1]) + (2,))
    for i in range(2):
        one = QPSK_BITS[:, i] == 1
        num = np.logaddexp.reduce(metric[..., one], axis=-1)
        den = np.logaddexp.reduce(metric[..., ~one], axis=-1)
        out[..., i] = num - den - lc[..., i]
    return np.clip(out, -LLR_CLAMP, LLR_CLAMP)


# ---------------------------------------------------------------- per-AP detection

@dataclass
class LocalOutput:
    """Stage-one outputs of one AP for its served users over a frame.

    Soft estimates are normalized by ``sqrt(eta_k)`` so that ``alpha`` is the
    gain on a unit-energy symbol.  ``cross[s, t, i] = w^H h_hat_i`` and ``floor`` is the estimation-error-plus-noise part of ``gamma2``; both
    feed the CPU-side combined noise model.
    """

    served: np.ndarray  # (S,)
    x_hat: np.ndarray  # (S, T)
    alpha: np.ndarray  # (S, T)
    gamma2: np.ndarray  # (S, T)
    cross: np.ndarray  # (S, T, K)
    floor: np.ndarray  # (S, T)


def detect_at_ap(y: np.ndarray, h_hat: np.ndarray, C: np.ndarray, eta: np.ndarray, sigma2: float,
                 served: np.ndarray, soft_mean: np.ndarray | None = None,
                 soft_var: np.ndarray | None = None, own_error_cov: bool = False) -> LocalOutput:
    """Filter a frame ``y`` (T, N) at one AP.

    ``soft_mean``/``soft_var`` are (S, T) decoder-prior statistics of the served
    users.  When given, each user's filter sees the other served users'
    soft symbols subtracted and their residual variance in its covariance.
    Users the AP does not serve stay as uncancelled interference.
    """
    served = np.asarray(served, dtype=int)
    T, N = y.shape
    K = h_hat.shape[0]
    S = served.size
    eta = np.asarray(eta, dtype=float)
    if S == 0:
        z = np.zeros((0, T))
        return LocalOutput(served, z.astype(complex), z.astype(complex), z, np.zeros((0, T, K), complex), z)

    ic = soft_mean is not None
    if ic:
        W = local_mmse_filters(np.broadcast_to(h_hat, (T, K, N)), C, eta, sigma2, served,
                               soft_var=soft_var.T, own_error_cov=own_error_cov)  # (T, S, N)
        W = np.swapaxes(W, 0, 1)  # (S, T, N)
    else:
        W = np.broadcast_to(local_mmse_filters(h_hat, C, eta, sigma2, served,
                                               own_error_cov=own_error_cov)[:, None, :], (S, T, N))

    sq = np.sqrt(eta)
    if ic:
        # y - sum_{i in D_l, i != k} sqrt(eta_i) h_hat_i xbar_i, per target k
        contrib = (sq[served][:, None] * soft_mean)[:, :, None] * h_hat[served][:, None, :]  # (S, T, N)
        total = contrib.sum(axis=0)
        y_ic = y[None] - total[None] + contrib  # (S, T, N)
    else:
        y_ic = np.broadcast_to(y, (S, T, N))
    x_raw = np.einsum("stn,stn->st", W.conj(), y_ic)

    norm = sq[served][:, None]
    x_hat = x_raw / norm
    cross = np.einsum("stn,in->sti", W.conj(), h_hat)
    err_cov = np.einsum("i,imn->mn", eta, C) + sigma2 * np.eye(N)
    floor = np.real(np.einsum("stm,mn,stn->st", W.conj(), err_cov, W)) / eta[served][:, None]

    alpha = cross[np.arange(S), :, served]  # (S, T)
    resid = np.ones((S, T, K))
    if ic:
        resid[:, :, served] = soft_var.T[None]
    gain2 = (eta[None, None, :] * resid * np.abs(cross) ** 2)
    gain2[np.arange(S), :, served] = 0.0
    gamma2 = gain2.sum(axis=-1) / eta[served][:, None] + floor
    return LocalOutput(served, x_hat, alpha, np.maximum(gamma2, GAMMA2_FLOOR), cross, floor)


def soft_statistics(lc: np.ndarray):
    """Per-symbol soft mean and variance (..., T) from coded-bit priors (..., 2T)."""
    lc = np.asarray(lc, dtype=float)
    return codec.qpsk_soft_symbol(lc.reshape(*lc.shape[:-1], -1, 2))


def local_idd(code, Y: np.ndarray, h_hat: np.ndarray, C: np.ndarray, eta: np.ndarray, sigma2: float,
              d: np.ndarray, n_outer: int = 3, max_inner: int = 20, soft_ic: bool = True,
              own_error_cov: bool = False) -> np.ndarray:
    """Run the detector/decoder loop independently at every AP.

    ``Y`` is (L, T, N), ``h_hat`` (K, L, N), ``C`` (K, L, N, N), ``d`` (K, L).
    Returns the (K, L) mean absolute detector extrinsic LLR over the frame at
    the final outer iteration; zero where ``d_kl = 0``.
    """
    K, L = d.shape
    T = Y.shape[1]
    links = [(k, l) for l in range(L) for k in np.flatnonzero(d[:, l])]
    if not links:
        return np.zeros((K, L))
    lc = np.zeros((len(links), 2 * T))
    row_of = {link: r for r, link in enumerate(links)}
    mean_abs = np.zeros((K, L))
    for it in range(n_outer):
        use_ic = soft_ic and it > 0
        lg = np.empty_like(lc)
        if use_ic:
            xbar, var = soft_statistics(lc)
        for l in range(L):
            served = np.flatnonzero(d[:, l])
            if served.size == 0:
                continue
            rows = [row_of[(k, l)] for k in served]
            out = detect_at_ap(Y[l], h_hat[:, l], C[:, l], eta, sigma2, served,
                               soft_mean=xbar[rows] if use_ic else None,
                               soft_var=var[rows] if use_ic else None,
                               own_error_cov=own_error_cov)
            prior = lc[rows].reshape(len(rows), T, 2)
            lg[rows] = bit_llr(out.x_hat, out.alpha, out.gamma2, prior).reshape(len(rows), 2 * T)
        if it + 1 < n_outer:
            lc = codec.decode(code, lg, max_inner).extrinsic
    for (k, l), r in row_of.items():
        mean_abs[k, l] = np.mean(np.abs(lg[r]))
    return mean_abs
