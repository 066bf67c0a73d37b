"""Seeded experiment runs, metric accumulation, CSV output and sweeps.

A run writes ``trace.csv`` (one row per block of ``stride`` slots, holding
block means plus cumulative averages) and ``summary.csv`` (one row).  Block
rows carry their slot count so the summary can be recomputed from them.
"""
from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import BUDGET_MULTIPLIERS, POLICIES, DdpgAgent, MyopicAgent
from .config import Config, ConfigError, dump_config
from .dpds import DpdsAgent
from .env import MecEnv

TRACE_FIELDS = ("slot", "n_slots", "aoi", "energy", "queue_len", "completions", "lambda", "v_avg",
                "critic_loss", "actor_grad", "clamped", "aoi_avg", "energy_avg")
SUMMARY_FIELDS = ("policy", "seed", "n_wds", "slots", "budget_multiplier", "energy_budget", "lambda_init",
                  "aoi_mean", "energy_mean", "aoi_final", "energy_final", "violation_frac", "clamped_total")
FINAL_FRACTION = 0.2


def effective_config(cfg: Config, policy: str) -> Config:
    """Copies ``cfg`` with the policy's energy-budget multipliers applied."""
    if policy not in POLICIES:
        raise ConfigError(f"policy: unknown policy {policy!r} (choose from {', '.join(POLICIES)})")
    mult = cfg.run.budget_multiplier * BUDGET_MULTIPLIERS.get(policy, 1.0)
    sim = cfg.sim.with_updates(energy_budget=cfg.sim.energy_budget * mult)
    run = dataclasses.replace(cfg.run, policy=policy)
    return Config(sim, dataclasses.replace(cfg.agent), run)


def make_agent(cfg: Config, policy: str, seed: int):
    if policy == "dpds":
        return DpdsAgent(cfg.sim, cfg.agent, seed)
    if policy == "dpl":
        return DpdsAgent(cfg.sim, cfg.agent, seed, kind="delay")
    if policy in ("lpo", "coo"):
        return MyopicAgent(cfg.sim, policy, cfg.agent, cfg.run.grid_points, cfg.run.fixed_max)
    if policy == "addpg":
        return DdpgAgent(cfg.sim, cfg.agent, seed, discounted=False)
    if policy == "dddpg":
        return DdpgAgent(cfg.sim, cfg.agent, seed, discounted=True)
    raise ConfigError(f"policy: unknown policy {policy!r}")


@dataclass
class RunMetrics:
    """Per-slot series (device means) plus the run summary."""

    policy: str
    seed: int
    aoi: np.ndarray
    energy: np.ndarray
    queue_len: np.ndarray
    completions: np.ndarray
    lam: np.ndarray
    v_avg: np.ndarray
    critic_loss: np.ndarray
    actor_grad: np.ndarray
    clamped: np.ndarray
    energy_per_wd: np.ndarray
    energy_budget: np.ndarray
    summary: dict = field(default_factory=dict)

    @property
    def slots(self) -> int:
        return len(self.aoi)

    def final_window(self, series) -> float:
        n = len(series)
        if n == 0:
            return float("nan")
        k = max(1, int(round(n * FINAL_FRACTION)))
        return float(np.mean(series[n - k:]))

    def trace_rows(self, stride: int) -> list[dict]:
        rows = []
        n = self.slots
        c_aoi = np.cumsum(self.aoi)
        c_en = np.cumsum(self.energy)
        for lo in range(0, n, stride):
            hi = min(lo + stride, n)
            sl = slice(lo, hi)
            rows.append({
                "slot": hi, "n_slots": hi - lo,
                "aoi": float(np.mean(self.aoi[sl])), "energy": float(np.mean(self.energy[sl])),
                "queue_len": float(np.mean(self.queue_len[sl])),
                "completions": int(np.sum(self.completions[sl])),
                "lambda": float(self.lam[hi - 1]), "v_avg": float(self.v_avg[hi - 1]),
                "critic_loss": float(np.nanmean(self.critic_loss[sl])) if np.any(np.isfinite(self.critic_loss[sl])) else float("nan"),
                "actor_grad": float(np.nanmean(self.actor_grad[sl])) if np.any(np.isfinite(self.actor_grad[sl])) else float("nan"),
                "clamped": int(np.sum(self.clamped[sl])),
                "aoi_avg": float(c_aoi[hi - 1] / hi), "energy_avg": float(c_en[hi - 1] / hi),
            })
        return rows


def summarize(m: RunMetrics, cfg: Config) -> dict:
    n = m.slots
    if n:
        per_wd = m.energy_per_wd / n
        viol = float(np.mean(per_wd > m.energy_budget * 1.05))
    else:
        viol = float("nan")
    return {
        "policy": m.policy, "seed": m.seed, "n_wds": cfg.sim.n_wds, "slots": n,
        "budget_multiplier": cfg.run.budget_multiplier,
        "energy_budget": float(np.mean(m.energy_budget)),
        "lambda_init": cfg.agent.lambda_init,
        "aoi_mean": float(np.mean(m.aoi)) if n else float("nan"),
        "energy_mean": float(np.mean(m.energy)) if n else float("nan"),
        "aoi_final": m.final_window(m.aoi), "energy_final": m.final_window(m.energy),
        "violation_frac": viol, "clamped_total": int(np.sum(m.clamped)),
    }


def simulate(cfg: Config, policy: str | None = None, seed: int | None = None, slots: int | None = None,
             progress=None) -> RunMetrics:
    """Runs one (config, policy, seed) cell in memory."""
    policy = cfg.run.policy if policy is None else policy
    seed = cfg.run.seed if seed is None else seed
    eff = effective_config(cfg, policy)
    if slots is None:
        slots = cfg.run.slots if cfg.run.slots is not None else cfg.sim.horizon_slots
    slots = int(slots)
    if slots < 0:
        raise ConfigError("slots must be >= 0")
    env = MecEnv(eff.sim, seed=seed)
    agent = make_agent(eff, policy, seed)
    n = eff.sim.n_wds
    cols = {k: np.zeros(slots) for k in ("aoi", "energy", "queue_len", "lam", "v_avg")}
    completions = np.zeros(slots, dtype=np.int64)
    clamped = np.zeros(slots, dtype=np.int64)
    closs = np.full(slots, np.nan)
    agrad = np.full(slots, np.nan)
    e_wd = np.zeros(n)
    for t in range(slots):
        agent.last = {}
        res = agent.train_step(env)
        mt = res.metrics
        cols["aoi"][t] = mt.aoi.mean()
        cols["energy"][t] = mt.energy.mean()
        cols["queue_len"][t] = mt.queue_len.mean()
        cols["lam"][t] = agent.lam.values.mean()
        cols["v_avg"][t] = getattr(agent, "v_avg", 0.0)
        completions[t] = mt.completions.sum()
        clamped[t] = mt.clamped
        closs[t] = agent.last.get("critic_loss", np.nan)
        agrad[t] = agent.last.get("actor_grad", np.nan)
        e_wd += mt.energy
        if progress is not None and (t + 1) % 1000 == 0:
            progress(t + 1, slots)
    m = RunMetrics(policy, seed, cols["aoi"], cols["energy"], cols["queue_len"], completions, cols["lam"],
                   cols["v_avg"], closs, agrad, clamped, e_wd, eff.sim.energy_budget.copy())
    m.summary = summarize(m, eff)
    return m


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in fields])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_experiment(cfg: Config, policy: str | None = None, seed: int | None = None, out_dir=None,
                   slots: int | None = None, progress=None) -> RunMetrics:
    """Runs one cell and, when ``out_dir`` is given, writes trace/summary CSVs and the config."""
    m = simulate(cfg, policy, seed, slots, progress)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.csv").write_text(csv_text(m.trace_rows(max(1, cfg.run.stride)), TRACE_FIELDS))
        (out / "summary.csv").write_text(csv_text([m.summary], SUMMARY_FIELDS))
        (out / "config.txt").write_text(dump_config(effective_config(cfg, m.policy)))
    return m


def summary_from_trace(rows) -> dict:
    """Recomputes time averages from trace rows (block means weighted by slot count)."""
    n = np.array([float(r["n_slots"]) for r in rows])
    if n.sum() == 0:
        return {"aoi_mean": float("nan"), "energy_mean": float("nan")}
    aoi = np.array([float(r["aoi"]) for r in rows])
    en = np.array([float(r["energy"]) for r in rows])
    return {"aoi_mean": float((aoi * n).sum() / n.sum()), "energy_mean": float((en * n).sum() / n.sum())}


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

CELL_FIELDS = ("sweep", "value") + SUMMARY_FIELDS
AGG_FIELDS = ("sweep", "value", "policy", "n_seeds", "aoi_median", "energy_median", "aoi_final_median")


def _aggregate(cells, sweep: str) -> list[dict]:
    out = []
    keys = sorted({(c["value"], c["policy"]) for c in cells}, key=lambda k: (k[0], k[1]))
    for v, p in keys:
        sel = [c for c in cells if c["value"] == v and c["policy"] == p]
        out.append({"sweep": sweep, "value": v, "policy": p, "n_seeds": len(sel),
                    "aoi_median": float(np.median([c["aoi_mean"] for c in sel])),
                    "energy_median": float(np.median([c["energy_mean"] for c in sel])),
                    "aoi_final_median": float(np.median([c["aoi_final"] for c in sel]))})
    return out


def _write_sweep(out_dir, name, cells, agg):
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}_cells.csv").write_text(csv_text(cells, CELL_FIELDS))
    (out / f"{name}.csv").write_text(csv_text(agg, AGG_FIELDS))


def sweep_n(cfg: Config, ns, policies, seeds, out_dir=None, slots=None, progress=None) -> list[dict]:
    """Per-(N, policy) median rows; positions are resampled for each N."""
    cells = []
    for n in ns:
        sim = cfg.sim.with_updates(n_wds=int(n))
        c = Config(sim, cfg.agent, cfg.run)
        for p in policies:
            for s in seeds:
                m = simulate(c, p, s, slots, progress)
                cells.append({"sweep": "n_wds", "value": int(n), **m.summary})
    agg = _aggregate(cells, "n_wds")
    _write_sweep(out_dir, "sweep_n", cells, agg)
    return agg


def sweep_budget(cfg: Config, multipliers, policies, seeds, out_dir=None, slots=None, progress=None) -> list[dict]:
    cells = []
    for mult in multipliers:
        c = Config(cfg.sim, cfg.agent, dataclasses.replace(cfg.run, budget_multiplier=float(mult)))
        for p in policies:
            for s in seeds:
                m = simulate(c, p, s, slots, progress)
                cells.append({"sweep": "budget", "value": float(mult), **m.summary})
    agg = _aggregate(cells, "budget")
    _write_sweep(out_dir, "sweep_budget", cells, agg)
    return agg


def max_pairwise_deviation(values) -> float:
    """max |x - y| / min(x, y) over pairs; the N-invariance measure for LPO."""
    v = np.asarray(values, dtype=np.float64)
    return float((v.max() - v.min()) / v.min())


def non_increasing(values, tol: float = 0.0) -> bool:
    v = np.asarray(values, dtype=np.float64)
    return bool(np.all(np.diff(v) <= tol * np.abs(v[:-1])))
