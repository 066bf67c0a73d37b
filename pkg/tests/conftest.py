import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from aoimec.config import PROFILES, SimConfig
from aoimec.env import Action

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Records one PASS/FAIL line for an acceptance criterion."""
    def _report(ok: bool, label: str, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'} {label}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_action(rng, cfg: SimConfig) -> Action:
    frac = rng.random((3, cfg.n_wds))
    return Action(frac[0] * cfg.max_freq, frac[1] * cfg.max_power,
                  frac[2] / frac[2].sum() * cfg.bs_bandwidth)


def fd_check(net, x, up, h=1e-6):
    """Worst relative error of backprop vs central differences (params and input)."""
    net.forward(x, "train", update_stats=False)
    grads, dx = net.backward(up)
    g = np.concatenate([a.ravel() for a in grads])
    base = net.get_flat()

    def loss(flat, xx):
        net.set_flat(flat)
        return float((net.forward(xx, "train", update_stats=False) * up).sum())

    worst = 0.0
    for k in range(base.size):
        e = np.zeros_like(base)
        e[k] = h
        num = (loss(base + e, x) - loss(base - e, x)) / (2 * h)
        worst = max(worst, abs(num - g[k]) / max(1.0, abs(num)))
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = (loss(base, xp) - loss(base, xm)) / (2 * h)
        worst = max(worst, abs(num - dx[idx]) / max(1.0, abs(num)))
    net.set_flat(base)
    return worst


@pytest.fixture
def cfg5():
    return SimConfig(n_wds=5, rng_seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_RUNS: dict = {}


@pytest.fixture(scope="session")
def run_cell():
    """Memoized full-length harness run: (profile, policy, seed, lambda_init, budget multiplier)."""
    from aoimec.harness import simulate

    def _run(profile: str, policy: str, seed: int, lambda_init: float | None = None, mult: float = 1.0):
        key = (profile, policy, seed, lambda_init, mult)
        if key not in _RUNS:
            cfg = PROFILES[profile]()
            cfg.run.budget_multiplier = mult
            if lambda_init is not None:
                cfg.agent.lambda_init = lambda_init
            _RUNS[key] = simulate(cfg, policy, seed)
        return _RUNS[key]
    return _run
