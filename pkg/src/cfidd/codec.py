"""Rate-1/2 LDPC coding and Gray QPSK mapping.

LLRs use the convention ``L = log P(b=1) / P(b=0)`` everywhere, so a positive
LLR favours bit 1.  The decoder works internally in the usual
``log P(0)/P(1)`` domain and flips signs at its boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

LLR_CLAMP = 30.0
OUTPUT_CLAMP = 100.0
SQRT1_2 = math.sqrt(0.5)

# symbol index s = 2*b1 + b2; b1 sets the real sign, b2 the imaginary sign (1 -> +)
QPSK_BITS = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.int8)
QPSK_POINTS = SQRT1_2 * ((2 * QPSK_BITS[:, 0] - 1) + 1j * (2 * QPSK_BITS[:, 1] - 1))


class ConstructionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LdpcCode:
    """Sparse parity-check code with a systematic encoder.

    Columns of ``H`` are ordered ``[info | parity]`` so the first ``k_info``
    codeword bits are the information bits.
    """

    H: np.ndarray  # (m, n) uint8
    parity_map: np.ndarray  # (m, k_info) uint8, parity = parity_map @ info mod 2
    seed: int

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def k_info(self) -> int:
        return self.n - self.m

    @property
    def rate(self) -> float:
        return self.k_info / self.n

    @property
    def check_adjacency(self) -> list[np.ndarray]:
        return [np.flatnonzero(row) for row in self.H]

    @property
    def var_adjacency(self) -> list[np.ndarray]:
        return [np.flatnonzero(col) for col in self.H.T]

    def syndrome(self, bits: np.ndarray) -> np.ndarray:
        # float matmul is exact here (counts <= n) and goes through BLAS
        counts = np.asarray(bits, dtype=np.float64) @ self._Ht
        return (counts.astype(np.int64) % 2).astype(np.uint8)

    def __post_init__(self):
        object.__setattr__(self, "_graph", _TannerGraph(self.H))
        object.__setattr__(self, "_Ht", self.H.T.astype(np.float64))


# ---------------------------------------------------------------- construction

def _peg(n: int, m: int, dv: int, dc: int, rng: np.random.Generator) -> np.ndarray | None:
    """Progressive edge growth with a hard check-degree cap ``dc``."""
    check_nbrs: list[list[int]] = [[] for _ in range(m)]
    var_nbrs: list[list[int]] = [[] for _ in range(n)]
    deg = np.zeros(m, dtype=int)
    for v in rng.permutation(n):
        for e in range(dv):
            open_checks = deg < dc
            open_checks[var_nbrs[v]] = False
            if not open_checks.any():
                return None
            if e == 0:
                candidates = np.flatnonzero(open_checks)
            else:
                candidates = _farthest_checks(v, var_nbrs, check_nbrs, open_checks, m)
            low = candidates[deg[candidates] == deg[candidates].min()]
            c = int(rng.choice(low))
            check_nbrs[c].append(int(v))
            var_nbrs[v].append(c)
            deg[c] += 1
    H = np.zeros((m, n), dtype=np.uint8)
    for c, vs in enumerate(check_nbrs):
        H[c, vs] = 1
    return H


def _farthest_checks(v, var_nbrs, check_nbrs, open_checks, m):
    """Open checks not reachable from ``v``, or else those first reached at the deepest level."""
    reached = np.zeros(m, dtype=bool)
    frontier = list(var_nbrs[v])
    reached[frontier] = True
    seen_vars = {v}
    while True:
        unreached = open_checks & ~reached
        new = []
        for c in frontier:
            for u in check_nbrs[c]:
                if u in seen_vars:
                    continue
                seen_vars.add(u)
                for c2 in var_nbrs[u]:
                    if not reached[c2]:
                        reached[c2] = True
                        new.append(c2)
        if not new or not (open_checks & ~reached).any():
            return np.flatnonzero(unreached if unreached.any() else open_checks)
        frontier = new


def gf2_systematic(H: np.ndarray):
    """Row-reduce H over GF(2).

    Returns ``(pivots, parity_map, order)`` where ``order`` puts non-pivot
    (information) columns first, or ``None`` when H is rank deficient.
    """
    A = (np.asarray(H) % 2).astype(np.uint8).copy()
    m, n = A.shape
    pivots = []
    row = 0
    for col in range(n):
        if row == m:
            break
        hits = np.flatnonzero(A[row:, col])
        if hits.size == 0:
            continue
        p = row + hits[0]
        if p != row:
            A[[row, p]] = A[[p, row]]
        others = np.flatnonzero(A[:, col])
        others = others[others != row]
        A[others] ^= A[row]
        pivots.append(col)
        row += 1
    if len(pivots) < m:
        return None
    info = np.setdiff1d(np.arange(n), pivots)
    order = np.concatenate([info, pivots])
    # reduced form: A[:, pivots] = I, so parity_j = sum_i A[j, info_i] * u_i
    parity_map = A[:, info]
    return np.asarray(pivots), parity_map, order


def build_code(n: int = 256, rate: float = 0.5, seed: int = 0, dv: int = 3) -> LdpcCode:
    """Regular (dv, dv/(1-rate)) PEG code, deterministic per ``seed``."""
    if n % 2:
        raise ValueError("codeword length must be even")
    m = int(round(n * (1 - rate)))
    dc_exact = n * dv / m
    if dc_exact != int(dc_exact):
        raise ValueError(f"no regular code with n={n}, m={m}, dv={dv}")
    dc = int(dc_exact)
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        H = _peg(n, m, dv, dc, rng)
        if H is None:
            continue
        reduced = gf2_systematic(H)
        if reduced is None:
            continue
        _, parity_map, order = reduced
        return LdpcCode(H=H[:, order], parity_map=parity_map, seed=seed)
    raise ConstructionError(f"PEG construction failed 100 times for n={n}, seed={seed}")


def code_from_H(H: np.ndarray, seed: int = -1) -> LdpcCode:
    reduced = gf2_systematic(H)
    if reduced is None:
        raise ValueError("parity-check matrix is rank deficient")
    _, parity_map, order = reduced
    return LdpcCode(H=np.asarray(H, dtype=np.uint8)[:, order], parity_map=parity_map, seed=seed)


def count_4cycles(H: np.ndarray) -> int:
    """Number of length-4 cycles: pairs of checks sharing two or more variables."""
    Hi = np.asarray(H, dtype=np.int64)
    overlap = Hi @ Hi.T
    iu = np.triu_indices_from(overlap, k=1)
    o = overlap[iu]
    return int(np.sum(o * (o - 1) // 2))


def encode(code: LdpcCode, info_bits: np.ndarray) -> np.ndarray:
    """Systematic encoding; accepts ``(k_info,)`` or a batch ``(B, k_info)``."""
    u = np.asarray(info_bits, dtype=np.uint8)
    if u.shape[-1] != code.k_info:
        raise ValueError(f"expected {code.k_info} info bits, got {u.shape[-1]}")
    parity = (u.astype(np.int64) @ code.parity_map.T.astype(np.int64)) % 2
    return np.concatenate([u, parity.astype(np.uint8)], axis=-1)


# ---------------------------------------------------------------- decoding

class _TannerGraph:
    def __init__(self, H: np.ndarray):
        checks, variables = np.nonzero(H)  # row-major: edges grouped by check
        self.m, self.n = H.shape
        self.edge_check = checks
        self.edge_var = variables
        self.check_starts = np.searchsorted(checks, np.arange(self.m))
        self.by_var = np.argsort(variables, kind="stable")
        self.var_starts = np.searchsorted(variables[self.by_var], np.arange(self.n))


def _phi(x):
    # -log tanh(x/2), self-inverse on x > 0
    x = np.clip(x, 1e-12, 60.0)
    return np.log1p(2.0 / np.expm1(x))


class DecodeResult(NamedTuple):
    posterior: np.ndarray
    extrinsic: np.ndarray
    hard_bits: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray


def decode(code: LdpcCode, channel_llrs: np.ndarray, max_inner: int = 20) -> DecodeResult:
    """Log-domain sum-product decoding with a flooding schedule.

    ``channel_llrs`` is ``(n,)`` or a batch ``(B, n)``.  Each frame stops once
    its syndrome is zero (checked before the first iteration too); frames that
    converge are frozen.  ``extrinsic = posterior - clamped input``.
    """
    g: _TannerGraph = code._graph
    llr_in = np.clip(np.asarray(channel_llrs, dtype=float), -LLR_CLAMP, LLR_CLAMP)
    single = llr_in.ndim == 1
    lin = np.atleast_2d(llr_in)
    B = lin.shape[0]
    ch = -lin  # internal domain: log P(0)/P(1)

    posterior = ch.copy()
    hard = (posterior < 0).astype(np.uint8)
    iters = np.zeros(B, dtype=int)
    done = ~code.syndrome(hard).any(axis=1)

    v2c = ch[:, g.edge_var]
    for it in range(1, max_inner + 1):
        if done.all():
            break
        # plain slices while every frame is still running, fancy indexing after
        act = slice(None) if not done.any() else np.flatnonzero(~done)
        m_v2c = v2c[act]
        mag = _phi(np.abs(m_v2c))
        neg = (m_v2c < 0).astype(np.int64)
        tot = np.add.reduceat(mag, g.check_starts, axis=1)[:, g.edge_check]
        parity = np.add.reduceat(neg, g.check_starts, axis=1)[:, g.edge_check]
        sign = 1.0 - 2.0 * ((parity - neg) % 2)
        c2v = sign * _phi(tot - mag)
        post = ch[act] + np.add.reduceat(c2v[:, g.by_var], g.var_starts, axis=1)
        v2c[act] = post[:, g.edge_var] - c2v
        posterior[act] = post
        h = (post < 0).astype(np.uint8)
        hard[act] = h
        iters[act] = it
        done[act] = ~code.syndrome(h).any(axis=1)

    post_out = -np.clip(posterior, -OUTPUT_CLAMP, OUTPUT_CLAMP)
    ext = post_out - lin
    out = DecodeResult(post_out, ext, hard, done, iters)
    if single:
        out = DecodeResult(*(a[0] for a in out))
    return out


# ---------------------------------------------------------------- QPSK

def qpsk_map(bits: np.ndarray) -> np.ndarray:
    """Map bit pairs (..., 2) to unit-energy Gray QPSK symbols (...)."""
    b = np.asarray(bits)
    return SQRT1_2 * ((2.0 * b[..., 0] - 1.0) + 1j * (2.0 * b[..., 1] - 1.0))


def bits_to_symbols(codeword: np.ndarray) -> np.ndarray:
    """Bits 2i, 2i+1 form symbol i."""
    cw = np.asarray(codeword)
    return qpsk_map(cw.reshape(*cw.shape[:-1], -1, 2))


def qpsk_soft_symbol(lc: np.ndarray):
    """Mean and variance of a QPSK symbol under bit priors ``lc`` (..., 2)."""
    lc = np.clip(np.asarray(lc, dtype=float), -LLR_CLAMP, LLR_CLAMP)
    t = np.tanh(0.5 * lc)
    mean = SQRT1_2 * (t[..., 0] + 1j * t[..., 1])
    var = np.clip(1.0 - np.abs(mean) ** 2, 0.0, 1.0)
    return mean, var


# ---------------------------------------------------------------- alist I/O

def to_alist(H: np.ndarray) -> str:
    H = np.asarray(H)
    m, n = H.shape
    cols = [np.flatnonzero(H[:, j]) + 1 for j in range(n)]
    rows = [np.flatnonzero(H[i]) + 1 for i in range(m)]
    max_col = max(len(c) for c in cols)
    max_row = max(len(r) for r in rows)

    def pad(idx, width):
        return " ".join(str(int(x)) for x in list(idx) + [0] * (width - len(idx)))

    lines = [f"{n} {m}", f"{max_col} {max_row}",
             " ".join(str(len(c)) for c in cols), " ".join(str(len(r)) for r in rows)]
    lines += [pad(c, max_col) for c in cols]
    lines += [pad(r, max_row) for r in rows]
    return "\n".join(lines) + "\n"


def from_alist(text: str) -> np.ndarray:
    lines = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
    n, m = int(lines[0][0]), int(lines[0][1])
    H = np.zeros((m, n), dtype=np.uint8)
    for j, line in enumerate(lines[4:4 + n]):
        for idx in map(int, line):
            if idx:
                H[idx - 1, j] = 1
    return H
