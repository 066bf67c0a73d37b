"""Comparison schedulers: single-path myopic policies and plain DDPG agents.

LPO (local only) and COO (offload only) pick magnitudes each slot by
minimizing the per-slot Lagrangian with the expected-AoI-reduction credit
capped at the queued bits.  The 1-D search evaluates a uniform grid plus the
two analytic breakpoints (the stationary point of the smooth objective and
the level that exactly clears the queue), so the optimum on the grid's hull
is found exactly.  DPL is ``DpdsAgent(kind='delay')``; A-DDPG and D-DDPG
are critic-on-(s, a) DDPG agents.
"""
from __future__ import annotations

import numpy as np

from .config import AgentConfig, SimConfig
from .cost import ArrivalEstimates, LagrangeMultipliers, update_lambda
from .dpds import DeepAgent, DpdsAgent, denormalize, n_features
from .env import LN2, Action, MecEnv, StateBatch, SystemState, action_terms, local_energy
from .neural import actor_sizes, build_mlp, soft_update

POLICIES = ("dpds", "lpo", "coo", "dpl", "addpg", "dddpg")
BUDGET_MULTIPLIERS = {"lpo": 3.0, "coo": 2.0}


def queued_bits(s: SystemState) -> np.ndarray:
    seg = np.repeat(np.arange(s.n_wds), s.queue_len)
    return np.bincount(seg, weights=s.task_rem, minlength=s.n_wds)


def _pick(cands, costs):
    """Per-device argmin over candidate rows; ties go to the smaller value."""
    order = np.lexsort((cands, costs), axis=0)[0]
    return np.take_along_axis(cands, order[None, :], axis=0)[0]


def lpo_policy(s: SystemState, lam, est: ArrivalEstimates, cfg: SimConfig, grid_points: int = 21,
               fixed_max: bool = False) -> Action:
    """Local processing only: P = 0, W = 0, per-device frequency by 1-D search."""
    n = cfg.n_wds
    lam_v = lam.values if isinstance(lam, LagrangeMultipliers) else np.asarray(lam, dtype=np.float64)
    backlog = queued_bits(s)
    busy = backlog > 0
    if fixed_max:
        return Action(np.where(busy, cfg.max_freq, 0.0), np.zeros(n), np.zeros(n))
    scale = est.bits_per_aoi
    dt, kappa, gamma = cfg.slot_seconds, cfg.cycles_per_bit, cfg.energy_eff
    f_clear = np.minimum(backlog * kappa / dt, cfg.max_freq)
    with np.errstate(divide="ignore"):
        f_stat = np.sqrt(1.0 / (kappa * scale * 3.0 * gamma * lam_v))
    f_stat = np.minimum(f_stat, cfg.max_freq)
    cands = np.vstack([np.linspace(0.0, 1.0, grid_points)[:, None] * cfg.max_freq, f_clear, f_stat])
    bits = np.minimum(cands * dt / kappa, backlog)
    costs = -bits / scale + lam_v * local_energy(cands * dt / kappa, cfg)
    f = _pick(cands, costs)
    return Action(np.where(busy, f, 0.0), np.zeros(n), np.zeros(n))


def coo_policy(s: SystemState, lam, est: ArrivalEstimates, cfg: SimConfig, grid_points: int = 21,
               fixed_max: bool = False) -> Action:
    """Offloading only: f = 0, equal bandwidth shares over busy devices, power by 1-D search."""
    n = cfg.n_wds
    lam_v = lam.values if isinstance(lam, LagrangeMultipliers) else np.asarray(lam, dtype=np.float64)
    backlog = queued_bits(s)
    busy = backlog > 0
    if not busy.any():
        return Action.zeros(n)
    w = np.where(busy, cfg.bs_bandwidth / busy.sum(), 0.0)
    if fixed_max:
        return Action(np.zeros(n), np.where(busy, cfg.max_power, 0.0), w)
    dt, h, sigma2 = cfg.slot_seconds, s.gain, cfg.noise_power
    scale = est.bits_per_aoi
    w_safe = np.where(busy, w, 1.0)
    p_clear = np.minimum(np.expm1(backlog / (w_safe * dt) * LN2) * sigma2 / h, cfg.max_power)
    with np.errstate(divide="ignore"):
        p_stat = w_safe / (lam_v * LN2 * scale) - sigma2 / h
    p_stat = np.clip(p_stat, 0.0, cfg.max_power)
    cands = np.vstack([np.linspace(0.0, 1.0, grid_points)[:, None] * cfg.max_power, p_clear, p_stat])
    bits = np.minimum(w_safe * dt * np.log1p(cands * h / sigma2) / LN2, backlog)
    costs = -bits / scale + lam_v * cands * dt
    p = _pick(cands, costs)
    return Action(np.zeros(n), np.where(busy, p, 0.0), w)


class MyopicAgent:
    """LPO / COO with their own multipliers on the long-term energy budget.

    The multiplier starts at ``lambda_init`` (0 by default) and follows the
    unscaled step-size schedule, which pulls time-average energy onto the
    budget within a few hundred slots.
    """

    def __init__(self, cfg: SimConfig, kind: str, agent: AgentConfig | None = None, grid_points: int = 21,
                 fixed_max: bool = False, lambda_init: float = 0.0):
        if kind not in ("lpo", "coo"):
            raise ValueError("kind must be 'lpo' or 'coo'")
        a = agent if agent is not None else AgentConfig()
        self.cfg, self.kind = cfg, kind
        self.policy_fn = lpo_policy if kind == "lpo" else coo_policy
        self.grid_points, self.fixed_max = grid_points, fixed_max
        self.lam = LagrangeMultipliers.constant(cfg.n_wds, lambda_init, lambda_max=a.lambda_max,
                                                eta_base=a.eta_base, eta_scale=1.0)
        self.est = ArrivalEstimates(cfg, a.estimate_decay)
        self.t = 0
        self.last = {}

    def select_action(self, s: SystemState) -> Action:
        return self.policy_fn(s, self.lam, self.est, self.cfg, self.grid_points, self.fixed_max)

    def train_step(self, env: MecEnv):
        res = env.step(self.select_action(env.state))
        self.t += 1
        self.est.observe(res.events.arrivals, res.events.new_task_bits)
        self.lam = update_lambda(self.lam, res.metrics.energy, self.t, self.cfg.energy_budget)
        return res


def dpl_agent(cfg: SimConfig, agent: AgentConfig | None = None, seed: int = 0) -> DpdsAgent:
    return DpdsAgent(cfg, agent, seed, kind="delay")


class DdpgAgent(DeepAgent):
    """Actor + action-value critic Q(s, a) on normalized actions.

    ``discounted=False`` is the average-reward variant (target C - v_T +
    Q_T(s', pi_T(s'))); ``True`` uses C + gamma_d Q_T(s', pi_T(s')).
    Gaussian noise on the normalized action drives exploration.
    """

    def __init__(self, cfg: SimConfig, agent: AgentConfig | None = None, seed: int = 0,
                 discounted: bool = False, kind: str = "aoi"):
        super().__init__(cfg, agent, seed, kind)
        a = self.acfg
        if discounted and not 0.0 <= a.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        self.discounted = discounted
        nf = n_features(a)
        self.actor = build_mlp(actor_sizes(self.n, a.hidden, nf), "sigmoid", self.rng,
                               momentum=a.bn_momentum, eps=a.bn_eps, softmax_groups=self.head_groups())
        self.critic = build_mlp([nf * self.n + 3 * self.n, a.hidden, a.hidden, 1], "identity", self.rng,
                                momentum=a.bn_momentum, eps=a.bn_eps)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.v_avg = 0.0
        self.v_avg_target = 0.0

    def _nets(self):
        return {"actor": self.actor, "critic": self.critic, "actor_target": self.actor_target,
                "critic_target": self.critic_target}

    def _scalars(self):
        return {"v_avg": self.v_avg, "v_avg_target": self.v_avg_target}

    def select_action(self, s: SystemState, explore: bool = True):
        na = self.actor.forward(self.state_features(s), "infer")[0]
        if explore and self.acfg.explore_std > 0:
            na = np.clip(na + self.acfg.explore_std * self.rng.standard_normal(na.shape), 0.0, 1.0)
        f, p, w = denormalize(na, self.cfg, self.acfg.bandwidth_head)
        return na, Action(f[0], p[0], w[0])

    def batch_cost(self, sb: StateBatch, na) -> np.ndarray:
        f, p, w = denormalize(na, self.cfg, self.acfg.bandwidth_head)
        return self.cost(sb, sb.post_decision(f, p, w, self.cfg))

    def q_values(self, net, feats, na, mode="infer") -> np.ndarray:
        return net.forward(np.concatenate([feats, na], axis=1), mode)[:, 0]

    def target(self, sb: StateBatch, na, sb_next: StateBatch) -> np.ndarray:
        c = self.batch_cost(sb, na)
        x_next = self.batch_features(sb_next)
        q_next = self.q_values(self.critic_target, x_next, self.actor_target.forward(x_next, "infer"))
        if self.discounted:
            return c + self.acfg.discount * q_next
        return c - self.v_avg_target + q_next

    def critic_update(self, batch) -> float:
        states, na, next_states = batch
        sb = StateBatch(states)
        y = self.target(sb, na, StateBatch(next_states))
        pred = self.q_values(self.critic, self.batch_features(sb), na, "train")
        err = pred - y
        grads, _ = self.critic.backward((2.0 / len(err)) * err[:, None])
        self.critic.adam_step(grads, self.acfg.value_lr)
        return float(np.mean(err ** 2))

    def actor_update(self, batch) -> float:
        x = self.batch_features(StateBatch(batch[0]))
        na = self.actor.forward(x, "train")
        b = na.shape[0]
        self.q_values(self.critic, x, na, "infer")
        _, dx = self.critic.backward(np.full((b, 1), 1.0 / b))
        grads, _ = self.actor.backward(dx[:, x.shape[1]:])
        self.actor.adam_step(grads, self.acfg.actor_lr)
        return float(np.sqrt(sum((g * g).sum() for g in grads)))

    def avg_reward_update(self, s, na, s_next, beta: float | None = None) -> float:
        beta = 1.0 / np.sqrt(max(self.t, 1)) if beta is None else beta
        sb = StateBatch([s, s_next])
        x = self.batch_features(sb)
        q_pi = self.q_values(self.critic, x, self.actor.forward(x, "infer"))
        c = self.batch_cost(StateBatch([s]), np.atleast_2d(na))[0]
        self.v_avg = (1.0 - beta) * self.v_avg + beta * (c + q_pi[1] - q_pi[0])
        return self.v_avg

    def soft_update_targets(self, omega: float | None = None) -> None:
        w = self.acfg.omega if omega is None else omega
        soft_update(self.actor_target, self.actor, w)
        soft_update(self.critic_target, self.critic, w)
        self.v_avg_target = w * self.v_avg + (1.0 - w) * self.v_avg_target

    def train_step(self, env: MecEnv):
        s = env.state
        na, action = self.select_action(s)
        res = env.step(action)
        self.t += 1
        self.observe(s, na, res)
        if len(self.buffer) >= max(self.acfg.warmup, 1):
            batch = self.buffer.sample(self.rng, self.acfg.batch_size)
            self.last["critic_loss"] = self.critic_update(batch)
            self.last["actor_grad"] = self.actor_update(batch)
            if not self.discounted:
                self.avg_reward_update(s, na, res.next_state)
            self.soft_update_targets()
            self.updates += 1
        self.finish_slot(res.metrics, self.t)
        return res


def addpg_agent(cfg: SimConfig, agent: AgentConfig | None = None, seed: int = 0) -> DdpgAgent:
    return DdpgAgent(cfg, agent, seed, discounted=False)


def dddpg_agent(cfg: SimConfig, agent: AgentConfig | None = None, seed: int = 0) -> DdpgAgent:
    return DdpgAgent(cfg, agent, seed, discounted=True)
