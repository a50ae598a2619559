import numpy as np
import pytest

from cfidd import codec, harness, netmodel


@pytest.fixture(scope="session")
def code():
    return codec.build_code(256, 0.5, seed=0)


@pytest.fixture(scope="session")
def desk_config():
    return harness.build_config({"trials": 4, "snr": "10", "n_stat": 100})


@pytest.fixture(scope="session")
def small_setup():
    """A fixed small network with estimates, for module-level tests."""
    cfg = netmodel.ScenarioConfig(L=4, N=2, K=5, tau_u=136)  # tau_p = 4, so pilots are shared
    layout = netmodel.build_layout(cfg, 7)
    rng = np.random.default_rng(8)
    beta = netmodel.large_scale_fading(layout, rng)
    R = netmodel.correlation_matrices(layout, beta)
    eta = np.full(cfg.K, 100.0)
    sigma2 = cfg.noise_power_mw
    real = layout.replace(beta=beta, R=R, eta=eta, sigma2=sigma2)
    real = real.replace(H_true=netmodel.draw_channels(real, rng))
    est = netmodel.build_estimator(R, real.pilot_of, eta, cfg.tau_p, sigma2)
    H_hat, C = netmodel.mmse_estimate(real, rng, est)
    return real.replace(H_hat=H_hat, C=C), est


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line; printed again in the terminal summary."""
    def _report(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)
