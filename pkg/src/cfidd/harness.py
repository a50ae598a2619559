"""Monte Carlo experiment driver.

A work unit is one ``(strategy, snr_db, trial_index)`` triple.  Every unit
rebuilds its scenario from per-stage random streams keyed by the master seed
and trial index, so units are independent, can run in any order on any
worker, and different strategies/SNR points of one trial index share the
same geometry, channels and noise.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import functools
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, apfrontend, codec, cpu, netmodel, selection
from ._rng import stage_rng
from .netmodel import ScenarioConfig
from .selection import ServiceMap, Strategy

log = logging.getLogger(__name__)

EMIT_KINDS = ("ber", "se_cdf", "fronthaul", "flops", "cardinality")
ENV_PREFIX = "CFIDD_"
BITS_PER_SYMBOL = 2
R_LDPC = 0.5

PROFILES = {
    "desk": {"scenario": {"L": 16, "N": 2, "K": 8}, "trials": 200},
    "paper": {"scenario": {"L": 100, "N": 4, "K": 100}, "trials": 10_000},
}


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    strategies: tuple = (Strategy.LLR_M,)
    snr_points_db: tuple = (0.0, 5.0, 10.0)
    trials: int = 200
    n_outer: int = 3
    n_inner: int = 20
    n_stat: int = 500
    master_seed: int = 1
    code_seed: int = 0
    soft_ic: bool = True
    own_error_cov: bool = False
    workers: int = 1
    output_path: str = "out"
    emit: tuple = EMIT_KINDS

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.snr_points_db:
            raise ValueError("snr_points_db must be non-empty")
        if self.n_outer < 1 or self.n_inner < 0 or self.n_stat < 1:
            raise ValueError("n_outer and n_stat must be >= 1, n_inner >= 0")
        bad = set(self.emit) - set(EMIT_KINDS)
        if bad:
            raise ValueError(f"unknown emit kinds {sorted(bad)}")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def echo(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["scenario"] = self.scenario.to_dict()
        doc["strategies"] = [s.value for s in self.strategies]
        doc["snr_points_db"] = list(self.snr_points_db)
        doc["emit"] = list(self.emit)
        doc.pop("workers")
        doc.pop("output_path")
        return doc


@dataclass
class TrialMetrics:
    strategy: str
    snr_db: float
    trial_index: int
    bit_errors: int
    bits_total: int
    bit_errors_per_iter: list
    frame_errors_per_iter: list
    per_user_se: list
    fronthaul: float
    flops: float
    selected_aps_per_user: list

    def __post_init__(self):
        if not 0 <= self.bit_errors <= self.bits_total:
            raise ValueError("bit_errors out of range")


# ---------------------------------------------------------------- power and SNR

def assign_powers_fpc(beta: np.ndarray, service_map: ServiceMap, p_max: float, exponent: float) -> np.ndarray:
    """Fractional power control on the aggregate gain over each user's serving APs."""
    agg = np.sum(np.asarray(beta) * service_map.d, axis=1)
    if np.any(agg <= 0):
        raise ValueError("a user has zero aggregate channel gain")
    rel = agg ** (-float(exponent))
    return p_max * rel / rel.max()


def calibrate_snr(beta: np.ndarray, eta: np.ndarray, r_ldpc: float, target_snr_db: float) -> float:
    """Noise power that makes the mean over APs of ``sum_i beta_il eta_i R / sigma2`` hit the target."""
    received = np.asarray(beta).T @ np.asarray(eta)  # (L,)
    return float(np.mean(received) * r_ldpc / 10.0 ** (target_snr_db / 10.0))


# ---------------------------------------------------------------- one trial

@functools.lru_cache(maxsize=8)
def get_code(n: int, seed: int) -> codec.LdpcCode:
    return codec.build_code(n, 0.5, seed=seed)


@dataclass
class TrialState:
    """Everything shared by the strategies of one trial at one SNR point."""

    realization: netmodel.NetworkRealization
    estimator: netmodel.Estimator
    code: codec.LdpcCode
    info_bits: np.ndarray
    Y: np.ndarray  # (L, T, N)
    llsf_map: ServiceMap


def build_trial(config: ExperimentConfig, trial_index: int, snr_db: float | None) -> TrialState:
    cfg = config.scenario
    seed = config.master_seed
    layout = netmodel.build_layout(cfg, stage_rng(seed, trial_index, "layout"))
    beta = netmodel.large_scale_fading(layout, stage_rng(seed, trial_index, "shadowing"))
    R = netmodel.correlation_matrices(layout, beta)
    llsf = selection.initial_access(beta, cfg.tau_p)
    eta = assign_powers_fpc(beta, llsf, cfg.p_max_mw, cfg.fpc_exponent)
    sigma2 = cfg.noise_power_mw if snr_db is None else calibrate_snr(beta, eta, R_LDPC, snr_db)
    real = layout.replace(beta=beta, R=R, eta=eta, sigma2=sigma2)
    H = netmodel.draw_channels(real, stage_rng(seed, trial_index, "channels"))
    real = real.replace(H_true=H)
    est = netmodel.build_estimator(R, real.pilot_of, eta, cfg.tau_p, sigma2)
    H_hat, C = netmodel.mmse_estimate(real, stage_rng(seed, trial_index, "pilot_noise"), est)
    real = real.replace(H_hat=H_hat, C=C)

    code = get_code(BITS_PER_SYMBOL * cfg.tau_u, config.code_seed)
    data_rng = stage_rng(seed, trial_index, "data")
    info = data_rng.integers(0, 2, size=(cfg.K, code.k_info), dtype=np.uint8)
    x = codec.bits_to_symbols(codec.encode(code, info))  # (K, T)
    noise = netmodel.complex_normal(stage_rng(seed, trial_index, "data_noise"), (cfg.L, cfg.tau_u, cfg.N))
    Y = np.einsum("k,kln,kt->ltn", np.sqrt(eta), H, x) + math.sqrt(sigma2) * noise
    return TrialState(real, est, code, info, Y, llsf)


def select_for_trial(config: ExperimentConfig, state: TrialState, strategy: Strategy,
                     trial_index: int) -> ServiceMap:
    r = state.realization
    tau_p = r.cfg.tau_p
    kwargs = dict(h_hat=r.H_hat, eta=r.eta)
    if strategy is Strategy.RANDOM:
        kwargs["rng"] = stage_rng(config.master_seed, trial_index, "selection")
    if not strategy.uses_llrs:
        return selection.select(strategy, r.beta, tau_p, **kwargs)
    init = selection.initializer(strategy)
    prior = (selection.strongest_map(r.beta, tau_p) if init is None
             else selection.select(init, r.beta, tau_p, **kwargs))
    llr_means = apfrontend.local_idd(state.code, state.Y, r.H_hat, r.C, r.eta, r.sigma2, prior.d,
                                     n_outer=config.n_outer, max_inner=config.n_inner,
                                     soft_ic=config.soft_ic, own_error_cov=config.own_error_cov)
    return selection.select(strategy, r.beta, tau_p, prior=prior, llr_means=llr_means)


def run_trial(config: ExperimentConfig, trial_index: int, strategy: Strategy | str | None = None,
              snr_db: float | None = None, state: TrialState | None = None) -> TrialMetrics:
    """Simulate one trial end to end and extract its metrics."""
    strategy = config.strategies[0] if strategy is None else strategy
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    try:
        if state is None:
            state = build_trial(config, trial_index, snr_db)
        return _run_trial(config, trial_index, strategy, snr_db, state)
    except Exception as exc:
        raise RuntimeError(f"trial {trial_index} ({strategy.value}, snr={snr_db}) failed: {exc}") from exc


def _run_trial(config, trial_index, strategy, snr_db, state: TrialState) -> TrialMetrics:
    r = state.realization
    cfg = r.cfg
    smap = select_for_trial(config, state, strategy, trial_index)
    smap.validate(cfg.tau_p)
    d = smap.d

    sqrt_R = netmodel.correlation_sqrt(r.R)
    stats = cpu.estimate_lsfd_stats(sqrt_R, state.estimator, r.eta, r.sigma2, d, config.n_stat,
                                    stage_rng(config.master_seed, trial_index, "lsfd"),
                                    own_error_cov=config.own_error_cov)
    a = cpu.lsfd_weights(stats, smap.B, r.eta, r.sigma2)
    _, se = cpu.sinr_se(stats, a, r.eta, r.sigma2, cfg.tau_p, cfg.tau_c)

    res = cpu.run_idd(state.code, state.Y, r.H_hat, r.C, r.eta, r.sigma2, d, a,
                      n_outer=config.n_outer, max_inner=config.n_inner, soft_ic=config.soft_ic,
                      own_error_cov=config.own_error_cov)
    k_info = state.code.k_info
    errs = [int(np.sum(h[:, :k_info] != state.info_bits)) for h in res.hard_per_iter]
    frames = [int(np.sum(np.any(h[:, :k_info] != state.info_bits, axis=1))) for h in res.hard_per_iter]

    card = smap.cardinalities()
    m = float(card.mean())
    flops = selection.flop_count("proposed", cfg.L, cfg.N)
    if strategy.uses_llrs:
        flops += selection.flop_count("llr_selection", cfg.L, cfg.N, cfg.K, BITS_PER_SYMBOL, m)
    return TrialMetrics(
        strategy=strategy.value, snr_db=float("nan") if snr_db is None else float(snr_db),
        trial_index=int(trial_index), bit_errors=errs[-1], bits_total=int(state.info_bits.size),
        bit_errors_per_iter=errs, frame_errors_per_iter=frames,
        per_user_se=[float(v) for v in se], fronthaul=selection.fronthaul_load(cfg.K, m),
        flops=float(flops), selected_aps_per_user=[int(c) for c in card])


def run_selection(config: ExperimentConfig, trial_index: int, strategy: Strategy | str,
                  snr_db: float | None = None) -> ServiceMap:
    """Only the AP-selection part of a trial (no LSFD statistics, no CPU decoding)."""
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    state = build_trial(config, trial_index, snr_db)
    return select_for_trial(config, state, strategy, trial_index)


# ---------------------------------------------------------------- execution

def work_units(config: ExperimentConfig) -> list[tuple]:
    return [(s, snr, t) for s in config.strategies for snr in config.snr_points_db
            for t in range(config.trials)]


def _trial_group(config: ExperimentConfig, snr_db: float, trial_index: int, strategies) -> list[TrialMetrics]:
    state = build_trial(config, trial_index, snr_db)
    return [run_trial(config, trial_index, s, snr_db, state=state) for s in strategies]


def _run_group(args):
    return _trial_group(*args)


def run_experiment(config: ExperimentConfig, workers: int | None = None) -> list[TrialMetrics]:
    """All units, returned in canonical (strategy, snr, trial) order regardless of workers."""
    workers = config.workers if workers is None else workers
    groups = [(config, snr, t, config.strategies) for snr in config.snr_points_db
              for t in range(config.trials)]
    if workers <= 1:
        results = [_run_group(g) for g in groups]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_group, groups, chunksize=max(1, len(groups) // (4 * workers))))
    by_key = {(m.strategy, m.snr_db, m.trial_index): m for group in results for m in group}
    return [by_key[(s.value, float(snr), t)] for s, snr, t in work_units(config)]


# ---------------------------------------------------------------- aggregation

def _ber_row(ms: list[TrialMetrics], errors_of) -> dict:
    errors = sum(errors_of(m) for m in ms)
    bits = sum(m.bits_total for m in ms)
    per_trial = np.array([errors_of(m) / m.bits_total for m in ms])
    half = float(1.96 * per_trial.std(ddof=1) / math.sqrt(len(ms))) if len(ms) > 1 else float("inf")
    ber = errors / bits
    return {"ber": ber, "errors": errors, "bits": bits, "trials": len(ms),
            "ci_low": max(ber - half, 0.0), "ci_high": ber + half}


def aggregate(metrics: list[TrialMetrics]) -> dict:
    """Fold trial metrics into the output tables (pure; order of groups is first appearance)."""
    groups: dict = {}
    for m in metrics:
        groups.setdefault((m.strategy, m.snr_db), []).append(m)
    ber, ber_iter, se_cdf, card, acct = [], [], [], [], []
    for (strategy, snr), ms in groups.items():
        ms = sorted(ms, key=lambda m: m.trial_index)
        row = _ber_row(ms, lambda m: m.bit_errors)
        ber.append({"snr_db": snr, "strategy": strategy, **row})
        for it in range(len(ms[0].bit_errors_per_iter)):
            r = _ber_row(ms, lambda m, it=it: m.bit_errors_per_iter[it])
            ber_iter.append({"snr_db": snr, "strategy": strategy, "iteration": it + 1, "ber": r["ber"],
                             "frame_errors": sum(m.frame_errors_per_iter[it] for m in ms),
                             "frames": sum(len(m.per_user_se) for m in ms)})
        se = np.sort(np.concatenate([m.per_user_se for m in ms]))
        n = se.size
        se_cdf += [{"snr_db": snr, "strategy": strategy, "se": float(v), "cdf": (i + 1) / n}
                   for i, v in enumerate(se)]
        cards = np.concatenate([m.selected_aps_per_user for m in ms])
        card.append({"snr_db": snr, "strategy": strategy, "mean_selected_aps": float(cards.mean()),
                     "trials": len(ms)})
        acct.append({"snr_db": snr, "strategy": strategy,
                     "fronthaul": float(np.mean([m.fronthaul for m in ms])),
                     "flops": float(np.mean([m.flops for m in ms])), "trials": len(ms)})
    return {"ber": ber, "ber_iterations": ber_iter, "se_cdf": se_cdf, "cardinality": card,
            "accounting": acct}


def _fmt(v):
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\r\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def config_digest(config: ExperimentConfig) -> str:
    blob = json.dumps(config.echo(), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def aggregate_and_emit(metrics: list[TrialMetrics], config: ExperimentConfig,
                       out_dir: str | os.PathLike | None = None) -> list[Path]:
    """Write the requested CSV tables plus ``summary.json``; returns the paths."""
    if not metrics:
        raise ValueError("nothing to aggregate")
    out = Path(config.output_path if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = aggregate(metrics)
    files = {}
    if "ber" in config.emit:
        files["ber.csv"] = tables["ber"]
        files["ber_iterations.csv"] = tables["ber_iterations"]
    if "se_cdf" in config.emit:
        files["se_cdf.csv"] = tables["se_cdf"]
    if "cardinality" in config.emit:
        files["cardinality.csv"] = tables["cardinality"]
    if "fronthaul" in config.emit or "flops" in config.emit:
        files["accounting.csv"] = tables["accounting"]
        cfg = config.scenario
        m_all = cfg.L
        files["accounting_schemes.csv"] = selection.accounting_rows(cfg.K, cfg.L, cfg.N, m_all)
    written = []
    for name, rows in files.items():
        path = out / name
        path.write_bytes(to_csv(rows).encode())
        written.append(path)
    summary = {
        "run": {"package": "cfidd", "version": __version__, "config_sha256": config_digest(config),
                "units": len(metrics)},
        "config": config.echo(),
        "ber": tables["ber"],
        "cardinality": tables["cardinality"],
    }
    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    written.append(path)
    return written


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Strategy):
        return o.value
    raise TypeError(type(o))


# ---------------------------------------------------------------- configuration

_EXPERIMENT_KEYS = {"strategy", "strategies", "snr", "trials", "n_outer", "n_inner", "n_stat", "seed",
                    "master_seed", "code_seed", "soft_ic", "own_error_cov", "workers", "out",
                    "output_path", "emit", "profile"}


def parse_snr(text: str) -> tuple:
    """``"0,5,10"`` or an inclusive range ``"start:step:stop"``."""
    text = str(text).strip()
    if ":" in text:
        start, step, stop = (float(p) for p in text.split(":"))
        if step <= 0:
            raise ValueError("SNR step must be positive")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + i * step, 10) for i in range(count))
    return tuple(float(p) for p in text.replace(" ", "").split(",") if p)


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def read_flat_config(path: str | os.PathLike) -> dict:
    """Flat ``key = value`` file (``#`` comments); section headers are optional."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string("[__flat__]\n" + text)
    values = {}
    for section in parser.sections():
        values.update(parser[section])
    return values


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    return {k[len(ENV_PREFIX):].lower(): v for k, v in environ.items()
            if k.startswith(ENV_PREFIX) and k != ENV_PREFIX + "LOG"}


def build_config(*layers: dict) -> ExperimentConfig:
    """Merge flat key/value layers (later wins) onto the selected profile."""
    merged: dict = {}
    for layer in layers:
        merged.update({k: v for k, v in layer.items() if v is not None})
    scenario_keys = {f.name.lower(): f.name for f in dataclasses.fields(ScenarioConfig)}
    profile = PROFILES[str(merged.get("profile", "desk"))]
    scen = dict(profile["scenario"])
    exp: dict = {"trials": profile["trials"]}
    for key, value in merged.items():
        if key.lower() in scenario_keys:
            scen[scenario_keys[key.lower()]] = value
        elif key not in _EXPERIMENT_KEYS:
            raise KeyError(f"unknown configuration key {key!r}")
    for key in ("strategy", "strategies"):
        if key in merged:
            names = merged[key] if isinstance(merged[key], (list, tuple)) else str(merged[key]).split(",")
            exp["strategies"] = tuple(Strategy.parse(n) for n in names if str(n).strip())
    if "snr" in merged:
        exp["snr_points_db"] = parse_snr(merged["snr"])
    for key in ("trials", "n_outer", "n_inner", "n_stat", "code_seed", "workers"):
        if key in merged:
            exp[key] = int(merged[key])
    for src in ("seed", "master_seed"):
        if src in merged:
            exp["master_seed"] = int(merged[src])
    for src in ("out", "output_path"):
        if src in merged:
            exp["output_path"] = str(merged[src])
    for key in ("soft_ic", "own_error_cov"):
        if key in merged:
            exp[key] = _parse_bool(merged[key])
    if "emit" in merged:
        e = merged["emit"]
        exp["emit"] = tuple(e) if isinstance(e, (list, tuple)) else tuple(
            p.strip() for p in str(e).split(",") if p.strip())
    return ExperimentConfig(scenario=ScenarioConfig.from_mapping(scen), **exp)
