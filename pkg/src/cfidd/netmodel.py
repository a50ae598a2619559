"""Scenario generation and per-AP MMSE channel estimation.

Arrays follow a fixed axis order throughout the package: user ``k`` first,
AP ``l`` second, antenna last.  So ``beta`` is ``(K, L)``, ``R`` is
``(K, L, N, N)`` and channels are ``(K, L, N)``; Monte Carlo batches add a
leading realization axis.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


def db2pow(x):
    return 10.0 ** (np.asarray(x, dtype=float) / 10.0)


def pow2db(x):
    return 10.0 * np.log10(x)


@dataclass(frozen=True)
class ScenarioConfig:
    L: int = 16
    N: int = 2
    K: int = 8
    area_side: float = 1000.0
    ap_user_height_delta: float = 10.0
    carrier_hz: float = 2e9
    bandwidth_hz: float = 2e7
    noise_psd_dbm_hz: float = -174.0
    noise_figure_db: float = 5.0
    tau_c: int = 140
    tau_u: int = 128
    asd_deg: float = 15.0
    shadow_std_db: float = 4.0
    p_max_mw: float = 100.0
    fpc_exponent: float = 0.5

    def __post_init__(self):
        for name in ("L", "N", "K"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tau_p <= 0:
            raise ValueError(f"tau_c ({self.tau_c}) must exceed tau_u ({self.tau_u})")
        if self.area_side <= 0:
            raise ValueError("area_side must be positive")
        if self.p_max_mw <= 0 or self.bandwidth_hz <= 0:
            raise ValueError("powers and bandwidth must be positive")
        if self.asd_deg < 0 or self.shadow_std_db < 0:
            raise ValueError("asd_deg and shadow_std_db must be non-negative")

    @property
    def tau_p(self) -> int:
        return int(self.tau_c) - int(self.tau_u)

    @property
    def noise_power_mw(self) -> float:
        """Thermal noise power over the band, in mW (about -96 dBm by default)."""
        dbm = self.noise_psd_dbm_hz + 10 * math.log10(self.bandwidth_hz) + self.noise_figure_db
        return float(db2pow(dbm))

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ScenarioConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown scenario key: {key!r}")
            kwargs[key] = int(raw) if types[key] == "int" else float(raw)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class NetworkRealization:
    """One coherence setup.  Later stages fill fields via ``dataclasses.replace``."""

    cfg: ScenarioConfig
    ap_positions: np.ndarray
    user_positions: np.ndarray
    pilot_of: np.ndarray
    beta: np.ndarray | None = None
    R: np.ndarray | None = None
    eta: np.ndarray | None = None
    sigma2: float | None = None
    H_true: np.ndarray | None = None
    H_hat: np.ndarray | None = None
    C: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict, compare=False)

    def replace(self, **changes) -> "NetworkRealization":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- geometry

def ap_grid(L: int, side: float) -> np.ndarray | None:
    root = math.isqrt(L)
    if root * root != L:
        return None
    centers = (np.arange(root) + 0.5) * side / root
    xx, yy = np.meshgrid(centers, centers, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def build_layout(cfg: ScenarioConfig, rng_seed) -> NetworkRealization:
    """Place APs and users and assign pilots.

    APs sit on a square grid when ``L`` is a perfect square and are uniform in
    the area otherwise.  User ``k`` gets pilot ``k mod tau_p``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    aps = ap_grid(cfg.L, cfg.area_side)
    if aps is None:
        aps = rng.uniform(0.0, cfg.area_side, size=(cfg.L, 2))
    users = rng.uniform(0.0, cfg.area_side, size=(cfg.K, 2))
    pilot_of = np.arange(cfg.K) % cfg.tau_p
    return NetworkRealization(cfg=cfg, ap_positions=aps, user_positions=users, pilot_of=pilot_of)


def link_distances(layout: NetworkRealization) -> np.ndarray:
    """3-D user-to-AP distances, shape (K, L)."""
    diff = layout.user_positions[:, None, :] - layout.ap_positions[None, :, :]
    horiz2 = np.sum(diff**2, axis=-1)
    return np.sqrt(horiz2 + layout.cfg.ap_user_height_delta**2)


def pathloss_db(distance_m) -> np.ndarray:
    return -30.5 - 36.7 * np.log10(np.asarray(distance_m, dtype=float))


def large_scale_fading(layout: NetworkRealization, rng: np.random.Generator) -> np.ndarray:
    """Linear-scale beta (K, L): 3GPP-style pathloss plus i.i.d. log-normal shadowing."""
    dist = link_distances(layout)
    shadow = layout.cfg.shadow_std_db * rng.standard_normal(dist.shape)
    return db2pow(pathloss_db(dist) + shadow)


def nominal_angles(layout: NetworkRealization) -> np.ndarray:
    """Azimuth of each user as seen from each AP, radians, (K, L)."""
    diff = layout.user_positions[:, None, :] - layout.ap_positions[None, :, :]
    return np.arctan2(diff[..., 1], diff[..., 0])


def spatial_correlation(beta_kl: float, nominal_angle: float, asd: float, N: int) -> np.ndarray:
    """Gaussian local scattering correlation for a half-wavelength ULA.

    Uses the small-angular-spread closed form
    ``beta * exp(j pi d sin th) * exp(-asd^2/2 (pi d cos th)^2)`` with
    ``d = m - n``.  The diagonal equals ``beta`` so ``tr(R) = N beta``.
    """
    if asd < 0:
        raise ValueError("angular standard deviation must be non-negative")
    d = np.subtract.outer(np.arange(N), np.arange(N))
    R = (
        beta_kl
        * np.exp(1j * np.pi * d * np.sin(nominal_angle))
        * np.exp(-0.5 * asd**2 * (np.pi * d * np.cos(nominal_angle)) ** 2)
    )
    R = 0.5 * (R + R.conj().T)
    if N > 1:
        w, V = np.linalg.eigh(R)
        if w.min() < 0:
            w = np.where(w < -1e-12 * np.trace(R).real, 0.0, np.maximum(w, 0.0))
            R = (V * w) @ V.conj().T
            # restore the exact diagonal (trace) after clipping
            scale = N * beta_kl / np.trace(R).real
            R = 0.5 * (R + R.conj().T) * scale
    return R


def correlation_matrices(layout: NetworkRealization, beta: np.ndarray) -> np.ndarray:
    cfg = layout.cfg
    theta = nominal_angles(layout)
    asd = math.radians(cfg.asd_deg)
    R = np.empty((cfg.K, cfg.L, cfg.N, cfg.N), dtype=complex)
    for k in range(cfg.K):
        for l in range(cfg.L):
            R[k, l] = spatial_correlation(beta[k, l], theta[k, l], asd, cfg.N)
    return R


# ---------------------------------------------------------------- channels

def correlation_sqrt(R: np.ndarray) -> np.ndarray:
    """Batched square-root factors S with S S^H = R (Cholesky, eigen fallback)."""
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(R)
    return V * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def draw_channels(realization: NetworkRealization, rng: np.random.Generator, size: int | None = None,
                  sqrt_R: np.ndarray | None = None) -> np.ndarray:
    """h_kl ~ CN(0, R_kl), independent over (k, l); optional leading batch of ``size``."""
    S = correlation_sqrt(realization.R) if sqrt_R is None else sqrt_R
    K, L, N, _ = S.shape
    shape = (K, L, N) if size is None else (size, K, L, N)
    z = complex_normal(rng, shape)
    return np.einsum("klmn,...kln->...klm", S, z)


@dataclass(frozen=True)
class Estimator:
    """Precomputed MMSE estimator for a fixed large-scale setup.

    ``A[k, l]`` maps the pilot observation of user ``k``'s pilot at AP ``l`` to
    the estimate; ``C[k, l]`` is the error covariance.
    """

    A: np.ndarray
    C: np.ndarray
    pilot_gain: np.ndarray  # sqrt(p_k tau_p), (K,)
    pilot_of: np.ndarray
    tau_p: int
    sigma2: float
    regularized: bool = False

    def observe(self, H: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Pilot observations, (..., tau_p, L, N)."""
        K = H.shape[-3]
        S = np.zeros((self.tau_p, K))
        S[self.pilot_of, np.arange(K)] = self.pilot_gain
        Y = np.einsum("tk,...kln->...tln", S, H)
        return Y + math.sqrt(self.sigma2) * complex_normal(rng, Y.shape)

    def estimate(self, Y_pilot: np.ndarray) -> np.ndarray:
        Yk = Y_pilot[..., self.pilot_of, :, :]
        return np.einsum("klmn,...kln->...klm", self.A, Yk)


def build_estimator(R: np.ndarray, pilot_of: np.ndarray, pilot_power: np.ndarray, tau_p: int,
                    sigma2: float) -> Estimator:
    K, L, N, _ = R.shape
    pilot_of = np.asarray(pilot_of)
    pilot_power = np.asarray(pilot_power, dtype=float)
    eye = np.eye(N)
    Phi = np.broadcast_to(sigma2 * eye, (tau_p, L, N, N)).copy().astype(complex)
    for k in range(K):
        Phi[pilot_of[k]] += tau_p * pilot_power[k] * R[k]
    # regularize (near-)singular Phi, e.g. sigma2 = 0 with rank-deficient R
    tr = np.trace(Phi, axis1=-2, axis2=-1).real
    min_eig = np.linalg.eigvalsh(Phi)[..., 0]
    singular = min_eig <= 1e-12 * np.maximum(tr, np.finfo(float).tiny) / N
    if np.any(singular):
        bump = 1e-12 * np.where(tr > 0, tr, 1.0) / N
        Phi = Phi + (singular * bump)[..., None, None] * eye
        log.debug("regularized %d singular pilot covariance(s)", int(singular.sum()))
    gain = np.sqrt(pilot_power * tau_p)
    Phi_k = Phi[pilot_of]  # (K, L, N, N)
    RPhiinv = np.swapaxes(np.linalg.solve(Phi_k, R), -1, -2).conj()  # R Phi^-1 (both Hermitian)
    A = gain[:, None, None, None] * RPhiinv
    C = R - gain[:, None, None, None] * (A @ R)
    C = 0.5 * (C + np.swapaxes(C, -1, -2).conj())
    return Estimator(A=A, C=C, pilot_gain=gain, pilot_of=pilot_of, tau_p=tau_p, sigma2=float(sigma2),
                     regularized=bool(np.any(singular)))


def mmse_estimate(realization: NetworkRealization, rng: np.random.Generator,
                  estimator: Estimator | None = None):
    """Return ``(H_hat, C)`` for the realization's true channels.

    Pilot powers equal the data powers ``eta``.
    """
    cfg = realization.cfg
    if estimator is None:
        estimator = build_estimator(realization.R, realization.pilot_of, realization.eta, cfg.tau_p,
                                    realization.sigma2)
    if estimator.regularized:
        realization.diagnostics["regularized_phi"] = True
    Y = estimator.observe(realization.H_true, rng)
    return estimator.estimate(Y), estimator.C


# ---------------------------------------------------------------- snapshots

def _encode(a):
    if a is None:
        return None
    a = np.asarray(a)
    if np.iscomplexobj(a):
        return {"shape": list(a.shape), "re": a.real.ravel().tolist(), "im": a.imag.ravel().tolist()}
    return {"shape": list(a.shape), "re": a.ravel().tolist()}


def _decode(obj):
    if obj is None:
        return None
    re = np.asarray(obj["re"], dtype=float)
    a = re + 1j * np.asarray(obj["im"], dtype=float) if "im" in obj else re
    return a.reshape(obj["shape"])


_ARRAY_FIELDS = ("ap_positions", "user_positions", "pilot_of", "beta", "R", "eta", "H_true", "H_hat", "C")


def realization_to_json(r: NetworkRealization) -> str:
    doc = {"version": SNAPSHOT_VERSION, "cfg": r.cfg.to_dict(), "sigma2": r.sigma2}
    doc.update({name: _encode(getattr(r, name)) for name in _ARRAY_FIELDS})
    return json.dumps(doc)


def realization_from_json(text: str) -> NetworkRealization:
    doc = json.loads(text)
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
    arrays = {name: _decode(doc[name]) for name in _ARRAY_FIELDS}
    arrays["pilot_of"] = arrays["pilot_of"].astype(int)
    return NetworkRealization(cfg=ScenarioConfig(**doc["cfg"]), sigma2=doc["sigma2"], **arrays)
