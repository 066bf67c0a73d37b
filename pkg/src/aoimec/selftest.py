"""Fast oracle and gradient checks runnable from an installed package."""
from __future__ import annotations

import numpy as np

from .config import AgentConfig, SimConfig
from .cost import ArrivalEstimates, LagrangeMultipliers, action_cost, cost_grad_action, update_lambda
from .env import Action, MecEnv, offload_energy, tx_rate
from .neural import BatchNorm, Dense, Mlp, actor_sizes, flop_count, value_sizes
from .pds_tabular import pds_learn, rvi_oracle, two_state_queue_mdp


def aoi_replay(arrivals, finishes, n_wds: int, slots: int) -> np.ndarray:
    """AoI per (slot, device) rebuilt from (wd, gen) arrivals and (wd, gen, finish) records.

    A task generated during slot g is queued from slot g+1 and leaves after
    its finish slot; AoI is t minus the oldest queued generation slot.
    """
    done = {(w, g): f for w, g, f in finishes}
    out = np.zeros((slots, n_wds), dtype=np.int64)
    for w, g in arrivals:
        f = done.get((w, g), slots)
        lo, hi = g + 1, min(f, slots - 1)
        if lo > hi:
            continue
        cur = out[lo:hi + 1, w]
        age = np.arange(lo, hi + 1) - g
        out[lo:hi + 1, w] = np.maximum(cur, age)
    return out


def check_aoi_oracle(slots: int = 2000, seed: int = 3) -> bool:
    cfg = SimConfig(n_wds=5, rng_seed=seed)
    env = MecEnv(cfg, seed=seed, record=True)
    rng = np.random.default_rng(seed)
    seen = np.zeros((slots, cfg.n_wds), dtype=np.int64)
    for t in range(slots):
        seen[t] = env.state.aoi
        frac = rng.random((3, cfg.n_wds))
        env.step(Action(frac[0] * cfg.max_freq, frac[1] * cfg.max_power,
                        frac[2] / frac[2].sum() * cfg.bs_bandwidth))
    return bool(np.array_equal(seen, aoi_replay(env.arrival_log, env.finish_log, cfg.n_wds, slots)))


def check_duality(n: int = 2000, seed: int = 0) -> bool:
    cfg = SimConfig(n_wds=1)
    rng = np.random.default_rng(seed)
    p = rng.uniform(1e-3, 1.0, n)
    w = rng.uniform(1e4, 2e7, n)
    h = 10.0 ** rng.uniform(-13, -7, n)
    e = offload_energy(tx_rate(p, w, h, cfg) * cfg.slot_seconds, w, h, cfg)
    return bool(np.max(np.abs(e / (p * cfg.slot_seconds) - 1)) < 1e-10)


def check_net_gradients(seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    net = Mlp([Dense(4, 8, "relu", rng), BatchNorm(8), Dense(8, 6, "sigmoid", rng, [(3, 6)])])
    x = rng.normal(size=(5, 4))
    up = rng.normal(size=(5, 6))
    net.forward(x, "train")
    grads, dx = net.backward(up)
    g = np.concatenate([a.ravel() for a in grads])
    base = net.get_flat()

    def loss(flat, xx):
        net.set_flat(flat)
        return float((net.forward(xx, "train", update_stats=False) * up).sum())

    worst = 0.0
    for k in range(base.size):
        e = np.zeros_like(base)
        e[k] = 1e-6
        num = (loss(base + e, x) - loss(base - e, x)) / 2e-6
        worst = max(worst, abs(num - g[k]) / max(1.0, abs(num)))
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += 1e-6
            xm[i, j] -= 1e-6
            num = (loss(base, xp) - loss(base, xm)) / 2e-6
            worst = max(worst, abs(num - dx[i, j]) / max(1.0, abs(num)))
    return worst < 1e-4


def check_cost_gradient(seed: int = 0) -> bool:
    cfg = SimConfig(n_wds=3, rng_seed=seed)
    rng = np.random.default_rng(seed)
    est = ArrivalEstimates(cfg)
    lam = LagrangeMultipliers(rng.uniform(0, 1e4, 3))
    gain = 1e-3 * cfg.distances ** -cfg.pathloss_exp * rng.exponential(size=3)
    f, p, w = rng.uniform(0.1, 0.9, 3) * 2e9, rng.uniform(0.1, 0.9, 3), rng.uniform(1e5, 5e6, 3)
    aoi = np.arange(3.0)
    grads = cost_grad_action(gain, f, p, w, lam, est, cfg)
    worst = 0.0
    for k, (arr, step) in enumerate(((f, 1e-6 * 2e9), (p, 1e-6), (w, 1e-6 * 5e6))):
        for i in range(3):
            hi, lo = [f.copy(), p.copy(), w.copy()], [f.copy(), p.copy(), w.copy()]
            hi[k][i] += step
            lo[k][i] -= step
            num = (action_cost(aoi, gain, *hi, lam, est, cfg) - action_cost(aoi, gain, *lo, lam, est, cfg)) / (2 * step)
            worst = max(worst, abs(num - grads[k][i]) / max(abs(num), 1e-300))
    return worst < 1e-6


def check_flops() -> bool:
    return all(flop_count(actor_sizes(n)) == 1792 * n + 32768 and flop_count(value_sizes(n)) == 1024 * n + 33024
               for n in range(1, 201))


def check_tabular(steps: int = 100_000) -> bool:
    mdp = two_state_queue_mdp()
    ref = rvi_oracle(mdp.transition(), mdp.cost)
    table, _, _ = pds_learn(mdp, steps, seed=0)
    return abs(table.avg_cost / ref.gain - 1) < 0.05


def check_projection(n: int = 10_000, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    lam = LagrangeMultipliers(np.zeros(3), lambda_max=1e4)
    ok = True
    for t in range(1, n + 1):
        lam = update_lambda(lam, rng.normal(0, 10, 3), t, 0.0)
        ok &= bool(np.all((lam.values >= 0) & (lam.values <= 1e4)))
    return ok


CHECKS = {
    "aoi_event_log_oracle": check_aoi_oracle,
    "rate_energy_duality": check_duality,
    "network_gradients": check_net_gradients,
    "cost_gradient": check_cost_gradient,
    "flop_closed_forms": check_flops,
    "tabular_pds_vs_rvi": check_tabular,
    "lambda_projection": check_projection,
}


def run_all(out=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        res = bool(fn())
        ok &= res
        out(f"{'PASS' if res else 'FAIL'} {name}")
    return ok
