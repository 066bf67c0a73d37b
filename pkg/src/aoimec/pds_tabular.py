"""Tabular average-cost learners and a relative value iteration oracle.

Two levels live here.  ``PdsMdp`` is an explicit finite MDP whose transition
is factored through post-decision states (cost[s, a], post[s, a] and
p_u[pds, s']).  The learners and the oracle run on it through the kernels
in ``_kernels``.  ``Discretization`` and ``EnvPdsLearner`` map the live
environment onto a coarse joint table for tiny configurations (N <= 2).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import _kernels
from .config import SimConfig
from .cost import LagrangeMultipliers, lagrangian_cost, update_lambda
from .env import Action, StateBatch, SystemState, channel_gain

_MAGIC = b"AOITAB1\n"


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Explicit MDPs
# ---------------------------------------------------------------------------

@dataclass
class PdsMdp:
    """Finite MDP with transition p(s'|s,a) = p_u(s' | post[s, a])."""

    cost: np.ndarray
    post: np.ndarray
    pu: np.ndarray

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=np.float64)
        self.post = np.asarray(self.post, dtype=np.int64)
        self.pu = np.asarray(self.pu, dtype=np.float64)
        if self.cost.shape != self.post.shape:
            raise ValueError("cost and post must both be (S, A)")
        if self.pu.shape[1] != self.cost.shape[0]:
            raise ValueError("p_u rows must be distributions over the S states")
        if not np.allclose(self.pu.sum(axis=1), 1.0, atol=1e-12) or np.any(self.pu < 0):
            raise ValueError("p_u rows must be probability vectors")
        if self.post.min() < 0 or self.post.max() >= self.pu.shape[0]:
            raise ValueError("post index out of range")

    @property
    def n_states(self) -> int:
        return self.cost.shape[0]

    @property
    def n_actions(self) -> int:
        return self.cost.shape[1]

    @property
    def n_pds(self) -> int:
        return self.pu.shape[0]

    def transition(self) -> np.ndarray:
        """Composite (S, A, S) kernel."""
        return self.pu[self.post]


def two_state_queue_mdp(arrival: float = 0.7, expiry: float = 0.1, energy_price: float = 0.2) -> PdsMdp:
    """Two-state freshness toy: state 0 is fresh (cost 1), state 1 stale (cost 2).

    Action 1 serves the pending update for ``energy_price`` and lands in the
    fresh post-decision state; a fresh device turns stale with probability
    ``arrival`` and a stale one recovers on its own with probability
    ``expiry``, so both post-decision states stay reachable under any policy.
    """
    cost = np.array([[1.0, 1.0 + energy_price], [2.0, 2.0 + energy_price]])
    post = np.array([[0, 0], [1, 0]])
    pu = np.array([[1 - arrival, arrival], [expiry, 1 - expiry]])
    return PdsMdp(cost, post, pu)


@dataclass
class RviResult:
    gain: float
    values: np.ndarray
    policy: np.ndarray
    q: np.ndarray
    sweeps: int


def rvi_oracle(P, C, ref: int = 0, tol: float = 1e-10, max_sweeps: int = 1_000_000) -> RviResult:
    """Relative value iteration; stops when the span of h' - h drops below ``tol``.

    ``P`` is (S, A, S) and ``C`` is (S, A).  Raises ConvergenceError if the
    span test has not passed after ``max_sweeps`` sweeps (periodic chains
    can oscillate forever).
    """
    P = np.ascontiguousarray(P, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    if P.shape != C.shape + (C.shape[0],):
        raise ValueError("P must be (S, A, S) matching C (S, A)")
    gain, h, q, sweeps = _kernels.rvi(P, C, int(ref), float(tol), int(max_sweeps))
    if sweeps < 0:
        raise ConvergenceError(f"relative value iteration did not converge in {max_sweeps} sweeps")
    return RviResult(float(gain), np.asarray(h), np.argmin(q, axis=1), np.asarray(q), int(sweeps))


def pds_fixed_point(mdp: PdsMdp, res: RviResult) -> np.ndarray:
    """V~*(pds) = sum_s' p_u(s'|pds) V*(s')."""
    return mdp.pu @ res.values


# ---------------------------------------------------------------------------
# Tables and single-step updates
# ---------------------------------------------------------------------------

def beta_schedule(t: int, exponent: float = 0.5) -> float:
    return 1.0 / float(t) ** exponent


@dataclass
class PdsTable:
    value: np.ndarray
    avg_cost: float = 0.0
    visits: np.ndarray | None = None
    t: int = 1
    beta_exp: float = 0.5

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.visits is None:
            self.visits = np.zeros(self.value.shape, dtype=np.int64)

    @classmethod
    def zeros(cls, n_pds: int, beta_exp: float = 0.5) -> "PdsTable":
        return cls(np.zeros(n_pds), beta_exp=beta_exp)

    def beta(self) -> float:
        return beta_schedule(self.t, self.beta_exp)


@dataclass
class QTable:
    q: np.ndarray
    avg_cost: float = 0.0
    t: int = 1
    beta_exp: float = 0.5
    eps_min: float = 0.01

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)

    @classmethod
    def zeros(cls, n_states: int, n_actions: int, **kw) -> "QTable":
        return cls(np.zeros((n_states, n_actions)), **kw)

    def epsilon(self) -> float:
        return max(self.eps_min, 1.0 / np.sqrt(self.t))


def _pds_update(table: PdsTable, pds: int, cost: float, vs: float, vs_next: float, beta: float):
    table.value[pds] = (1.0 - beta) * table.value[pds] + beta * vs_next
    table.avg_cost = (1.0 - beta) * table.avg_cost + beta * (cost + vs_next - vs)
    table.visits[pds] += 1
    table.t += 1


def relative_value(mdp: PdsMdp, table: PdsTable, s: int) -> tuple[float, int]:
    """(V(s), greedy action) with V(s) = min_a {C + V~(post)} - v."""
    q = mdp.cost[s] + table.value[mdp.post[s]]
    a = int(np.argmin(q))
    return float(q[a] - table.avg_cost), a


def pds_learn_step(mdp: PdsMdp, table: PdsTable, s: int, s_next: int, action: int | None = None,
                   beta: float | None = None) -> PdsTable:
    """One PDS stochastic-approximation step on an observed transition s -> s_next.

    ``action`` defaults to the greedy one; ``beta`` overrides the schedule.
    """
    vs, greedy = relative_value(mdp, table, s)
    a = greedy if action is None else action
    vs_next, _ = relative_value(mdp, table, s_next)
    b = table.beta() if beta is None else beta
    _pds_update(table, int(mdp.post[s, a]), float(mdp.cost[s, a]), vs, vs_next, b)
    return table


def q_learn_step(qt: QTable, s: int, a: int, s_next: int, cost: float, beta: float | None = None) -> QTable:
    """Average-cost Q-learning: Q(s,a) toward C - v + min Q(s', .), v toward C + min Q(s') - min Q(s)."""
    b = beta_schedule(qt.t, qt.beta_exp) if beta is None else beta
    min_s = qt.q[s].min()
    min_next = qt.q[s_next].min()
    qt.q[s, a] = (1.0 - b) * qt.q[s, a] + b * (cost - qt.avg_cost + min_next)
    qt.avg_cost = (1.0 - b) * qt.avg_cost + b * (cost + min_next - min_s)
    qt.t += 1
    return qt


def _cdf(rows):
    c = np.cumsum(rows, axis=-1)
    c[..., -1] = 1.0
    return np.ascontiguousarray(c)


def pds_learn(mdp: PdsMdp, steps: int, seed: int = 0, table: PdsTable | None = None,
              s0: int = 0) -> tuple[PdsTable, np.ndarray, int]:
    """Runs greedy PDS learning for ``steps`` slots.  Returns (table, v trace, last state)."""
    table = PdsTable.zeros(mdp.n_pds) if table is None else table
    rng = np.random.default_rng(seed)
    u = rng.random(steps)
    value, v, trace, s = _kernels.pds_run(np.ascontiguousarray(mdp.cost), np.ascontiguousarray(mdp.post),
                                          _cdf(mdp.pu), u, int(s0), table.value, float(table.avg_cost),
                                          int(table.t), float(table.beta_exp))
    table.value = value
    table.avg_cost = float(v)
    table.t += steps
    return table, trace, int(s)


def q_learn(mdp: PdsMdp, steps: int, seed: int = 0, qt: QTable | None = None, s0: int = 0,
            explore: bool = True) -> tuple[QTable, np.ndarray, int]:
    qt = QTable.zeros(mdp.n_states, mdp.n_actions) if qt is None else qt
    rng = np.random.default_rng(seed)
    u = rng.random((steps, 3))
    q, v, trace, s = _kernels.q_run(np.ascontiguousarray(mdp.cost), _cdf(mdp.transition()), u, explore,
                                    int(s0), qt.q, float(qt.avg_cost), int(qt.t), float(qt.beta_exp),
                                    float(qt.eps_min))
    qt.q = q
    qt.avg_cost = float(v)
    qt.t += steps
    return qt, trace, int(s)


# ---------------------------------------------------------------------------
# Discretized environment
# ---------------------------------------------------------------------------

@dataclass
class Discretization:
    """Per-device bins; joint index is row-major over devices.

    Remaining HOL bits use ``d_edges`` (interior edges), AoI and queue length
    are clipped at their caps, and the channel is binned on the fading
    factor h / h_mean with ``h_edges``.  Action grids are fractions of the
    per-device maxima; bandwidth fractions are renormalized to sum to W^max.
    """

    d_edges: np.ndarray
    a_cap: int
    q_cap: int
    h_edges: np.ndarray
    f_grid: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.5, 1.0]))
    p_grid: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.5, 1.0]))
    w_grid: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.5, 1.0]))

    def __post_init__(self):
        self.d_edges = np.asarray(self.d_edges, dtype=np.float64)
        self.h_edges = np.asarray(self.h_edges, dtype=np.float64)
        for name in ("d_edges", "h_edges"):
            e = getattr(self, name)
            if np.any(np.diff(e) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
        if self.a_cap < 1 or self.q_cap < 1:
            raise ValueError("caps must be >= 1")
        for name in ("f_grid", "p_grid", "w_grid"):
            g = np.asarray(getattr(self, name), dtype=np.float64)
            if g.min() != 0.0 or g.max() != 1.0:
                raise ValueError(f"{name} must include 0 and 1")
            setattr(self, name, g)

    @classmethod
    def toy(cls, cfg: SimConfig, d_bins: int = 3, h_bins: int = 3, a_cap: int = 4, q_cap: int = 2,
            grid=(0.0, 0.5, 1.0)) -> "Discretization":
        d_edges = np.linspace(0.0, cfg.task_bits_max, d_bins + 1)[1:-1]
        # equal-mass bins of the unit-mean exponential fading factor
        h_edges = -np.log(1.0 - np.arange(1, h_bins) / h_bins)
        g = np.asarray(grid, dtype=np.float64)
        return cls(d_edges, a_cap, q_cap, h_edges, g, g.copy(), g.copy())

    @property
    def wd_dims(self) -> tuple[int, int, int, int]:
        return (len(self.d_edges) + 1, self.a_cap + 1, self.q_cap + 1, len(self.h_edges) + 1)

    @property
    def n_wd_states(self) -> int:
        return int(np.prod(self.wd_dims))

    def n_states(self, n_wds: int) -> int:
        return self.n_wd_states ** n_wds

    def wd_index(self, hol, aoi, queue_len, gain, mean_gain):
        nd, na, nq, nh = self.wd_dims
        d = np.digitize(hol, self.d_edges)
        a = np.minimum(aoi, self.a_cap)
        q = np.minimum(queue_len, self.q_cap)
        h = np.digitize(np.asarray(gain) / mean_gain, self.h_edges)
        return ((d * na + a) * nq + q) * nh + h

    def joint_index(self, hol, aoi, queue_len, gain, cfg: SimConfig):
        """Joint index for arrays shaped (..., N)."""
        per = self.wd_index(hol, aoi, queue_len, gain, mean_gain(cfg))
        idx = np.zeros(per.shape[:-1], dtype=np.int64)
        for i in range(per.shape[-1]):
            idx = idx * self.n_wd_states + per[..., i]
        return idx

    def state_index(self, s, cfg: SimConfig) -> int:
        """Index of a SystemState or PostDecisionState."""
        return int(self.joint_index(s.hol_remaining, s.aoi, s.queue_len, s.gain, cfg))

    def joint_actions(self, cfg: SimConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All grid actions as (K, N) arrays of freq, power, bandwidth."""
        n = cfg.n_wds
        per = list(product(range(len(self.f_grid)), range(len(self.p_grid)), range(len(self.w_grid))))
        combos = np.array(list(product(range(len(per)), repeat=n)), dtype=np.int64).reshape(-1, n)
        idx = np.array(per)[combos]  # (K, N, 3)
        f = self.f_grid[idx[..., 0]] * cfg.max_freq
        p = self.p_grid[idx[..., 1]] * cfg.max_power
        w = self.w_grid[idx[..., 2]]
        tot = w.sum(axis=1, keepdims=True)
        bw = np.where(tot > 0, w / np.where(tot > 0, tot, 1.0), 0.0) * cfg.bs_bandwidth
        return f, p, bw


def mean_gain(cfg: SimConfig) -> np.ndarray:
    """Gain with unit fading, i.e. the per-device mean channel gain."""
    return channel_gain(cfg.distances, np.ones(cfg.n_wds), cfg)


def wd_pu_row(disc: Discretization, hol: float, aoi: int, queue_len: int, cfg: SimConfig, i: int) -> np.ndarray:
    """Distribution of device i's next discretized tuple given its post-decision tuple."""
    nd, na, nq, nh = disc.wd_dims
    p = float(cfg.arrival_rate[i])
    lo = np.concatenate(([0.0], disc.h_edges))
    hi = np.concatenate((disc.h_edges, [np.inf]))
    h_mass = np.exp(-lo) - np.exp(-hi)
    row = np.zeros((nd, na, nq, nh))
    if queue_len > 0:
        d = np.digitize(hol, disc.d_edges)
        a = min(aoi + 1, disc.a_cap)
        row[d, a, min(queue_len, disc.q_cap), :] += (1 - p) * h_mass
        row[d, a, min(queue_len + 1, disc.q_cap), :] += p * h_mass
    else:
        row[0, 0, 0, :] += (1 - p) * h_mass
        # new task size ~ U[min, max]; mass per remaining-bits bin
        edges = np.concatenate(([-np.inf], disc.d_edges, [np.inf]))
        lo_b = np.clip(edges[:-1], cfg.task_bits_min, cfg.task_bits_max)
        hi_b = np.clip(edges[1:], cfg.task_bits_min, cfg.task_bits_max)
        span = cfg.task_bits_max - cfg.task_bits_min
        d_mass = (hi_b - lo_b) / span if span > 0 else (np.digitize(cfg.task_bits_min, disc.d_edges)
                                                        == np.arange(nd)).astype(float)
        row[:, 1, 1, :] += p * np.outer(d_mass, h_mass)
    return row.ravel()


def joint_pu_row(disc: Discretization, pds, cfg: SimConfig) -> np.ndarray:
    """Analytic p_u(. | pds) over joint discretized states (product over devices)."""
    hol, aoi, q = pds.hol_remaining, pds.aoi, pds.queue_len
    row = np.ones(1)
    for i in range(cfg.n_wds):
        row = np.kron(row, wd_pu_row(disc, float(hol[i]), int(aoi[i]), int(q[i]), cfg, i))
    return row


class EnvPdsLearner:
    """Greedy PDS learning on the live environment over a joint discretized table.

    Meant for N <= 2: the table has (per-device states)^N entries and the
    greedy step enumerates the joint action grid.
    """

    def __init__(self, cfg: SimConfig, disc: Discretization, lam: LagrangeMultipliers | None = None,
                 beta_exp: float = 0.5):
        if cfg.n_wds > 2:
            raise ValueError("the joint table is only tractable for N <= 2")
        self.cfg, self.disc = cfg, disc
        self.table = PdsTable.zeros(disc.n_states(cfg.n_wds), beta_exp)
        self.lam = lam if lam is not None else LagrangeMultipliers.constant(cfg.n_wds, 0.0)
        self.actions = disc.joint_actions(cfg)

    def evaluate(self, s: SystemState):
        """Costs, PDS indices and post-decision dicts for every grid action."""
        f, p, w = self.actions
        k = f.shape[0]
        rep = StateBatch([s] * k)
        out = rep.post_decision(f, p, w, self.cfg)
        cost = lagrangian_cost(np.tile(s.aoi, (k, 1)), out["energy"], self.lam, self.cfg.energy_budget)
        idx = self.disc.joint_index(out["hol_remaining"], out["aoi"], out["queue_len"], out["gain"], self.cfg)
        return cost, idx

    def greedy(self, s: SystemState) -> tuple[int, float, float]:
        """(action index, its cost, V(s))."""
        cost, idx = self.evaluate(s)
        q = cost + self.table.value[idx]
        a = int(np.argmin(q))
        return a, float(cost[a]), float(q[a] - self.table.avg_cost)

    def action(self, k: int) -> Action:
        f, p, w = self.actions
        return Action(f[k].copy(), p[k].copy(), w[k].copy())

    def learn_step(self, s: SystemState, a: int, s_next: SystemState) -> None:
        cost, idx = self.evaluate(s)
        q = cost + self.table.value[idx]
        vs = float(q.min() - self.table.avg_cost)
        _, _, vs_next = self.greedy(s_next)
        _pds_update(self.table, int(idx[a]), float(cost[a]), vs, vs_next, self.table.beta())

    def update_lambda(self, energy, slot: int) -> None:
        self.lam = update_lambda(self.lam, energy, slot, self.cfg.energy_budget)


def greedy_action_pds(s: SystemState, table: PdsTable, lam, disc: Discretization, cfg: SimConfig) -> Action:
    """argmin over the grid of C(s, a) + V~(f_k(s, a)); ties go to the lowest grid index."""
    learner = EnvPdsLearner.__new__(EnvPdsLearner)
    learner.cfg, learner.disc, learner.table = cfg, disc, table
    learner.lam = lam if isinstance(lam, LagrangeMultipliers) else LagrangeMultipliers(np.asarray(lam, float))
    learner.actions = disc.joint_actions(cfg)
    k, _, _ = learner.greedy(s)
    return learner.action(k)


# ---------------------------------------------------------------------------
# Table persistence
# ---------------------------------------------------------------------------

def table_to_bytes(table: PdsTable | QTable, disc: Discretization | None = None) -> bytes:
    if isinstance(table, PdsTable):
        arrays = [table.value, table.visits.astype(np.float64)]
        head = {"kind": "pds", "shape": list(table.value.shape)}
    else:
        arrays = [table.q]
        head = {"kind": "q", "shape": list(table.q.shape)}
    head.update(avg_cost=table.avg_cost, t=table.t, beta_exp=table.beta_exp)
    if disc is not None:
        head["disc"] = {"d_edges": disc.d_edges.tolist(), "a_cap": disc.a_cap, "q_cap": disc.q_cap,
                        "h_edges": disc.h_edges.tolist(), "f_grid": disc.f_grid.tolist(),
                        "p_grid": disc.p_grid.tolist(), "w_grid": disc.w_grid.tolist()}
    raw = json.dumps(head).encode()
    body = np.concatenate([a.ravel() for a in arrays]).astype("<f8").tobytes()
    return _MAGIC + struct.pack("<I", len(raw)) + raw + body


def table_from_bytes(data: bytes):
    """Returns (table, discretization or None)."""
    if not data.startswith(_MAGIC):
        raise ValueError("not a table dump")
    k = len(_MAGIC)
    (n,) = struct.unpack("<I", data[k:k + 4])
    head = json.loads(data[k + 4:k + 4 + n])
    flat = np.frombuffer(data[k + 4 + n:], dtype="<f8").copy()
    shape = tuple(head["shape"])
    size = int(np.prod(shape))
    if head["kind"] == "pds":
        if flat.size != 2 * size:
            raise ValueError("table body does not match its header")
        table = PdsTable(flat[:size].reshape(shape), head["avg_cost"], flat[size:].astype(np.int64),
                         head["t"], head["beta_exp"])
    else:
        if flat.size != size:
            raise ValueError("table body does not match its header")
        table = QTable(flat.reshape(shape), head["avg_cost"], head["t"], head["beta_exp"])
    disc = Discretization(**head["disc"]) if "disc" in head else None
    return table, disc


def save_table(path, table, disc: Discretization | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(table_to_bytes(table, disc))


def load_table(path):
    with open(path, "rb") as fh:
        return table_from_bytes(fh.read())
