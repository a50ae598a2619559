"""AP selection strategies and fronthaul / FLOP accounting."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class Strategy(str, enum.Enum):
    RANDOM = "Random"
    LLSF = "LLSF"
    LECG = "LECG"
    LLR_LLSF = "LLR_LLSF"
    LLR_LECG = "LLR_LECG"
    LLR_M = "LLR_M"
    ALL_APS = "AllAPs"

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        key = name.strip().replace("-", "_").lower()
        for s in cls:
            if s.value.lower() == key or s.name.lower() == key:
                return s
        raise ValueError(f"unknown strategy {name!r}; choose from {[s.value for s in cls]}")

    @property
    def uses_llrs(self) -> bool:
        return self in (Strategy.LLR_LLSF, Strategy.LLR_LECG, Strategy.LLR_M)


class SelectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ServiceMap:
    d: np.ndarray  # (K, L) bool

    @property
    def K(self) -> int:
        return self.d.shape[0]

    @property
    def L(self) -> int:
        return self.d.shape[1]

    @property
    def D(self) -> list[np.ndarray]:
        """Users served by each AP."""
        return [np.flatnonzero(self.d[:, l]) for l in range(self.L)]

    @property
    def M(self) -> list[np.ndarray]:
        """APs serving each user."""
        return [np.flatnonzero(self.d[k]) for k in range(self.K)]

    @property
    def B(self) -> list[np.ndarray]:
        share = (self.d.astype(int) @ self.d.T.astype(int)) > 0
        np.fill_diagonal(share, True)
        return [np.flatnonzero(row) for row in share]

    def cardinalities(self) -> np.ndarray:
        return self.d.sum(axis=1)

    def validate(self, tau_p: int) -> None:
        if np.any(self.d.sum(axis=0) > tau_p):
            raise SelectionError(f"an AP serves more than tau_p={tau_p} users")
        if np.any(self.d.sum(axis=1) < 1):
            raise SelectionError("a user is served by no AP")

    def to_json(self) -> str:
        return json.dumps({
            "d": self.d.astype(int).tolist(),
            "D": [s.tolist() for s in self.D],
            "M": [s.tolist() for s in self.M],
            "B": [s.tolist() for s in self.B],
        })

    @classmethod
    def from_json(cls, text: str) -> "ServiceMap":
        return cls(np.asarray(json.loads(text)["d"], dtype=bool))


def _rank_desc(values: np.ndarray) -> np.ndarray:
    """Indices by decreasing value; ties go to the lower index."""
    return np.lexsort((np.arange(values.size), -values))


def mean_test(metric: np.ndarray) -> np.ndarray:
    """d_kl = 1 iff metric_kl >= mean over users of metric_.l (per AP column).

    Near-ties are settled in exact rational arithmetic, so equal entries
    always pass and the outcome does not depend on rounding of the mean.
    """
    metric = np.asarray(metric, dtype=float)
    K = metric.shape[0]
    total = metric.sum(axis=0, keepdims=True)
    gap = K * metric - total
    out = gap >= 0
    close = np.abs(gap) <= 1e-9 * np.abs(metric).sum(axis=0, keepdims=True)
    for k, l in zip(*np.nonzero(close)):
        col = [Fraction(float(v)) for v in metric[:, l]]
        out[k, l] = K * col[k] >= sum(col)
    return out


def enforce_constraints(d: np.ndarray, beta: np.ndarray, tau_p: int) -> np.ndarray:
    """Guarantee each user an AP and cap every AP at ``tau_p`` users.

    Order of precedence: masters (strongest AP of each user; strongest first
    if an AP is master for more than ``tau_p`` users), then users left
    without any AP, placed at their strongest AP with a free slot, then the
    remaining requested links by decreasing beta.  Ties go to the lower index.
    """
    beta = np.asarray(beta, dtype=float)
    K, L = beta.shape
    d = np.asarray(d, dtype=bool)
    master = np.argmax(beta, axis=1)
    out = np.zeros((K, L), dtype=bool)
    for l in range(L):
        cand = np.flatnonzero(master == l)
        out[cand[_rank_desc(beta[cand, l])][:tau_p], l] = True
    load = out.sum(axis=0)
    for k in np.flatnonzero(~out.any(axis=1)):
        for l in _rank_desc(beta[k]):
            if load[l] < tau_p:
                out[k, l] = True
                load[l] += 1
                break
        else:
            raise SelectionError("not enough pilot slots to serve every user")
    for l in range(L):
        cand = np.flatnonzero(d[:, l] & ~out[:, l])
        free = tau_p - load[l]
        if free > 0 and cand.size:
            out[cand[_rank_desc(beta[cand, l])][:free], l] = True
    return out


def initial_access(beta: np.ndarray, tau_p: int) -> ServiceMap:
    """Largest-large-scale-fading access: the per-AP mean test on beta."""
    return ServiceMap(enforce_constraints(mean_test(beta), beta, tau_p))


def effective_gain(h_hat: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """``eta_k ||h_hat_kl||^2``, (K, L)."""
    return np.asarray(eta, dtype=float)[:, None] * np.sum(np.abs(h_hat) ** 2, axis=-1)


def lecg_map(h_hat: np.ndarray, eta: np.ndarray, beta: np.ndarray, tau_p: int) -> ServiceMap:
    return ServiceMap(enforce_constraints(mean_test(effective_gain(h_hat, eta)), beta, tau_p))


def strongest_map(beta: np.ndarray, tau_p: int) -> ServiceMap:
    """Every AP takes its ``tau_p`` strongest users (all users when K <= tau_p)."""
    return ServiceMap(enforce_constraints(np.ones_like(beta, dtype=bool), beta, tau_p))


def random_map(beta: np.ndarray, tau_p: int, rng: np.random.Generator) -> ServiceMap:
    """Each AP serves a uniformly random user subset as large as its LLSF set."""
    K, L = beta.shape
    sizes = mean_test(beta).sum(axis=0)
    d = np.zeros((K, L), dtype=bool)
    for l in range(L):
        d[rng.choice(K, size=min(int(sizes[l]), tau_p), replace=False), l] = True
    return ServiceMap(enforce_constraints(d, beta, tau_p))


def llr_refine(prior: ServiceMap, llr_means: np.ndarray, beta: np.ndarray, tau_p: int) -> ServiceMap:
    """Keep k at AP l iff its mean |LLR| is at least the mean over the AP's served users."""
    d = prior.d
    llr_means = np.asarray(llr_means, dtype=float)
    keep = np.zeros_like(d)
    for l in range(d.shape[1]):
        served = np.flatnonzero(d[:, l])
        if served.size:
            vals = llr_means[served, l]
            keep[served[vals >= vals.mean()], l] = True
    return ServiceMap(enforce_constraints(keep, beta, tau_p))


def initializer(strategy: Strategy) -> Strategy | None:
    """The map an LLR-based strategy refines (``None`` for the capped full map)."""
    return {Strategy.LLR_LLSF: Strategy.LLSF, Strategy.LLR_LECG: Strategy.LECG,
            Strategy.LLR_M: None}.get(strategy, strategy)


def select(strategy: Strategy | str, beta: np.ndarray, tau_p: int, *, h_hat=None, eta=None,
           prior: ServiceMap | None = None, llr_means=None, rng=None) -> ServiceMap:
    """Build the service map of ``strategy``.

    LLR-based strategies need ``prior`` (the initializer's map) and
    ``llr_means`` computed under it; see :func:`initializer`.
    """
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    beta = np.asarray(beta, dtype=float)
    if strategy is Strategy.ALL_APS:
        return ServiceMap(np.ones(beta.shape, dtype=bool))
    if strategy is Strategy.LLSF:
        return initial_access(beta, tau_p)
    if strategy is Strategy.LECG:
        if h_hat is None or eta is None:
            raise SelectionError("LECG needs channel estimates and powers")
        return lecg_map(h_hat, eta, beta, tau_p)
    if strategy is Strategy.RANDOM:
        if rng is None:
            raise SelectionError("Random selection needs an rng")
        return random_map(beta, tau_p, rng)
    if llr_means is None or prior is None:
        raise SelectionError(f"{strategy.value} needs local LLRs computed under its initial map")
    return llr_refine(prior, llr_means, beta, tau_p)


# ---------------------------------------------------------------- accounting

def fronthaul_load(K, m):
    """Complex scalars over the fronthaul: ``K m + (m^2 K^2 + K m) / 2``.

    Exact: an ``int`` when the value is integral, otherwise a float.
    """
    if K < 0 or m < 0:
        raise ValueError("K and m must be non-negative")
    K = Fraction(K)
    m = Fraction(m).limit_denominator(10**9) if isinstance(m, float) else Fraction(m)
    value = K * m + (m * m * K * K + K * m) / 2
    return int(value) if value.denominator == 1 else float(value)


FLOP_SCHEMES = ("proposed", "soft_ic", "mbdf", "jed", "llr", "llr_selection")


def flop_count(scheme: str, L: int = 1, N: int = 1, K: int = 1, M_c: int = 2, m=1, B: int = 8,
               n: int = 256) -> float:
    """Operation counts per scheme.

    Big-O terms are evaluated with unit constants; the LLR and LLR-selection
    costs are exact expressions.
    """
    LN = L * N
    if scheme == "proposed":
        return float(L * N**3)
    if scheme == "soft_ic":
        return float(LN**3)
    if scheme == "mbdf":
        return float(B * LN**3)
    if scheme == "jed":
        return float((2 * K) ** 3 + 6 * K * LN**2 + 4 * K * LN * n - 2 * K + 1)
    if scheme == "llr":
        return float(2 * M_c + 2 * 2**M_c + 4)
    if scheme == "llr_selection":
        m = float(m)
        return (K / 2) * (m**2 + m) + (m**3 - m) / 3 + m**2 + 2 * (M_c + 2**M_c) + 4
    raise ValueError(f"unknown scheme {scheme!r}; choose from {FLOP_SCHEMES}")


def accounting_rows(K: int, L: int, N: int, m, M_c: int = 2, B: int = 8, n: int = 256) -> list[dict]:
    """One row per scheme: fronthaul load at ``m`` serving APs and the FLOP count."""
    rows = []
    for scheme in FLOP_SCHEMES:
        rows.append({"scheme": scheme, "K": K, "L": L, "N": N, "m": m,
                     "fronthaul": fronthaul_load(K, m),
                     "flops": flop_count(scheme, L, N, K, M_c, m, B, n)})
    return rows
