"""Deep post-decision-state agent: actor + PDS value network with targets.

The actor maps scaled state features to sigmoid outputs (f^, p^, w^) in
[0, 1]^{3N}.  ``denormalize`` scales frequency and power by their maxima and,
with the default ``sigmoid_softmax`` head, turns w^ into bandwidth shares with
a softmax; that bounds the share ratio between two devices by e, which keeps
every device served.  The ``softmax`` head puts a softmax group over the w^
logits instead, so the network emits unconstrained shares directly.  The value network
scores post-decision states; its input gradient, chained through the
straight-through Jacobian of f_k, supplies the actor's learning signal next
to the analytic cost gradient.
"""
from __future__ import annotations

import pickle
from dataclasses import dataclass

import numpy as np

from .config import AgentConfig, SimConfig
from .cost import (ArrivalEstimates, LagrangeMultipliers, cost_grad_action, delay_cost,
                   redesigned_cost, update_lambda)
from .env import LN2, Action, MecEnv, StateBatch, StepMetrics, SystemState, action_terms
from .neural import Mlp, actor_sizes, build_mlp, soft_update, softmax, value_sizes
from .pds_tabular import mean_gain

# moments of ln(rho) for rho ~ Exp(1)
_LOG_FADE_MEAN = -0.5772156649015329
_LOG_FADE_STD = np.pi / np.sqrt(6.0)


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------

def split_normalized(na, n: int):
    na = np.atleast_2d(na)
    return na[:, :n], na[:, n:2 * n], na[:, 2 * n:3 * n]


BANDWIDTH_HEADS = ("softmax", "sigmoid_softmax")


def _shares(wh, head: str):
    if head == "sigmoid_softmax":
        return softmax(wh, axis=1)
    if head != "softmax":
        raise ValueError(f"unknown bandwidth head {head!r}")
    # head output already sums to 1; renormalizing keeps clipped exploration noise feasible
    tot = wh.sum(axis=1, keepdims=True)
    n = wh.shape[1]
    return np.where(tot > 0, wh / np.where(tot > 0, tot, 1.0), 1.0 / n)


def denormalize(na, cfg: SimConfig, head: str = "sigmoid_softmax"):
    """(B, 3N) normalized actions -> (freq, power, bandwidth), each (B, N)."""
    fh, ph, wh = split_normalized(na, cfg.n_wds)
    return fh * cfg.max_freq, ph * cfg.max_power, cfg.bs_bandwidth * _shares(wh, head)


def denormalize_action(na, cfg: SimConfig, head: str = "sigmoid_softmax") -> Action:
    f, p, w = denormalize(na, cfg, head)
    return Action(f[0], p[0], w[0])


def denormalize_grad(na, g_f, g_p, g_w, cfg: SimConfig, head: str = "sigmoid_softmax"):
    """Pulls (f, P, W) gradients back to the normalized action."""
    _, _, wh = split_normalized(na, cfg.n_wds)
    if head == "sigmoid_softmax":
        sm = softmax(wh, axis=1)
        g_wh = cfg.bs_bandwidth * sm * (g_w - (g_w * sm).sum(axis=1, keepdims=True))
    else:
        tot = wh.sum(axis=1, keepdims=True)
        g_wh = cfg.bs_bandwidth * (g_w - (g_w * wh).sum(axis=1, keepdims=True) / tot) / tot
    return np.concatenate([g_f * cfg.max_freq, g_p * cfg.max_power, g_wh], axis=1)


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def features(hol, aoi, queue_len, gain, cfg: SimConfig, agent: AgentConfig, mgain=None):
    """Blocks [d^r, a, q, log-gain (, empty)] of (B, N) arrays -> (B, 4N or 5N)."""
    mgain = mean_gain(cfg) if mgain is None else mgain
    blocks = [np.asarray(hol, dtype=np.float64) / cfg.task_bits_max,
              np.asarray(aoi, dtype=np.float64) / agent.aoi_scale,
              np.asarray(queue_len, dtype=np.float64) / agent.queue_scale,
              (np.log(np.asarray(gain) / mgain) - _LOG_FADE_MEAN) / _LOG_FADE_STD]
    if not agent.strict_paper_arch:
        blocks.append((np.asarray(queue_len) == 0).astype(np.float64))
    return np.concatenate([np.atleast_2d(b) for b in blocks], axis=1)


def n_features(agent: AgentConfig) -> int:
    return 4 if agent.strict_paper_arch else 5


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

@dataclass
class Experience:
    state: SystemState
    norm_action: np.ndarray
    next_state: SystemState


class ReplayBuffer:
    """Fixed-capacity FIFO ring of (s, normalized action, s') records."""

    def __init__(self, capacity: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.states: list = [None] * self.capacity
        self.next_states: list = [None] * self.capacity
        self.actions = np.zeros((self.capacity, action_dim))
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s: SystemState, na, s_next: SystemState) -> None:
        k = self.cursor
        self.states[k] = s
        self.actions[k] = na
        self.next_states[k] = s_next
        self.cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def get(self, k: int) -> Experience:
        if not 0 <= k < self.size:
            raise IndexError(k)
        return Experience(self.states[k], self.actions[k].copy(), self.next_states[k])

    def sample(self, rng: np.random.Generator, batch: int):
        idx = rng.integers(0, self.size, size=batch)
        return self.batch(idx)

    def batch(self, idx):
        return ([self.states[k] for k in idx], self.actions[idx].copy(), [self.next_states[k] for k in idx])


# ---------------------------------------------------------------------------
# Shared deep-agent plumbing
# ---------------------------------------------------------------------------

class DeepAgent:
    """State common to the deep agents: λ, estimates, replay and RNG."""

    def __init__(self, cfg: SimConfig, agent: AgentConfig | None = None, seed: int = 0, kind: str = "aoi"):
        if kind not in ("aoi", "delay"):
            raise ValueError("kind must be 'aoi' or 'delay'")
        self.cfg = cfg
        self.acfg = agent if agent is not None else AgentConfig()
        self.kind = kind
        if self.acfg.bandwidth_head not in BANDWIDTH_HEADS:
            raise ValueError(f"bandwidth_head must be one of {BANDWIDTH_HEADS}")
        if self.acfg.reduction_credit not in ("nominal", "backlog"):
            raise ValueError("reduction_credit must be 'nominal' or 'backlog'")
        self.rng = np.random.default_rng([int(seed), 0xD9D5])
        self.n = cfg.n_wds
        self.mgain = mean_gain(cfg)
        a = self.acfg
        self.lam = LagrangeMultipliers.constant(self.n, a.lambda_init, lambda_max=a.lambda_max,
                                                eta_base=a.eta_base, eta_scale=a.eta_scale)
        self.est = ArrivalEstimates(cfg, a.estimate_decay)
        self.buffer = ReplayBuffer(a.buffer_capacity, 3 * self.n)
        self.t = 0
        self.updates = 0
        self.last = {}

    def head_groups(self):
        """Softmax group over the w^ block when the head emits shares directly."""
        return [(2 * self.n, 3 * self.n)] if self.acfg.bandwidth_head == "softmax" else []

    @property
    def in_dim(self) -> int:
        return n_features(self.acfg) * self.n

    def state_features(self, states) -> np.ndarray:
        if isinstance(states, SystemState):
            states = [states]
        return features(np.stack([s.hol_remaining for s in states]), np.stack([s.aoi for s in states]),
                        np.stack([s.queue_len for s in states]), np.stack([s.gain for s in states]),
                        self.cfg, self.acfg, self.mgain)

    def batch_features(self, sb: StateBatch) -> np.ndarray:
        return features(sb.hol_remaining, sb.aoi, sb.queue_len, sb.gain, self.cfg, self.acfg, self.mgain)

    def pds_features(self, out: dict) -> np.ndarray:
        return features(out["hol_remaining"], out["aoi"], out["queue_len"], out["gain"], self.cfg,
                        self.acfg, self.mgain)

    def cost(self, sb: StateBatch, out: dict, lam=None):
        """Per-row cost of the actions behind ``out`` from states ``sb``."""
        lam = self.lam if lam is None else lam
        bits = out["local_bits"] + out["offload_bits"]
        cap = self.credit_cap(out)
        if self.kind == "aoi":
            return redesigned_cost(sb.aoi, bits, out["energy"], lam, self.est, self.cfg.energy_budget, cap)
        return delay_cost(sb.queue_len, bits, out["energy"], lam, self.est, self.cfg.energy_budget, cap)

    def credit_cap(self, out: dict):
        """Backlog bound on the credited bits, or None when every processed bit counts.

        Under the carry-over drain, capacity beyond the queue is wasted; with
        ``reduction_credit='backlog'`` it also earns no reduction credit.
        """
        return out["backlog"] if self.acfg.reduction_credit == "backlog" else None

    def observe(self, s: SystemState, na, res) -> None:
        self.buffer.add(s, na, res.next_state)
        self.est.observe(res.events.arrivals, res.events.new_task_bits)

    def finish_slot(self, metrics: StepMetrics, slot: int) -> None:
        self.lam = update_lambda(self.lam, metrics.energy, slot, self.cfg.energy_budget)

    # persistence --------------------------------------------------------------
    def _nets(self) -> dict:
        return {}

    def _scalars(self) -> dict:
        return {}

    def checkpoint(self, with_buffer: bool = False) -> bytes:
        blob = {
            "class": type(self).__name__, "kind": self.kind, "t": self.t, "updates": self.updates,
            "nets": {k: v.to_bytes() for k, v in self._nets().items()},
            "scalars": self._scalars(),
            "lam": self.lam.values.copy(),
            "est": self.est.copy(),
            "rng": self.rng.bit_generator.state,
            "buffer_meta": {"cursor": self.buffer.cursor, "size": self.buffer.size},
            "buffer": self.buffer if with_buffer else None,
        }
        return pickle.dumps(blob, protocol=pickle.HIGHEST_PROTOCOL)

    def restore(self, data: bytes) -> None:
        blob = pickle.loads(data)
        if blob["class"] != type(self).__name__:
            raise ValueError(f"checkpoint is for {blob['class']}, not {type(self).__name__}")
        self.kind, self.t, self.updates = blob["kind"], blob["t"], blob["updates"]
        for k, raw in blob["nets"].items():
            setattr(self, k, Mlp.from_bytes(raw))
        for k, v in blob["scalars"].items():
            setattr(self, k, v)
        self.lam = LagrangeMultipliers(blob["lam"], self.lam.lambda_max, self.lam.eta_base, self.lam.eta_scale)
        self.est = blob["est"]
        self.rng.bit_generator.state = blob["rng"]
        if blob["buffer"] is not None:
            self.buffer = blob["buffer"]

    def save(self, path, with_buffer: bool = False) -> None:
        with open(path, "wb") as fh:
            fh.write(self.checkpoint(with_buffer))

    def load(self, path) -> None:
        with open(path, "rb") as fh:
            self.restore(fh.read())


# ---------------------------------------------------------------------------
# DPDS
# ---------------------------------------------------------------------------

class DpdsAgent(DeepAgent):
    """DDPG-style deep PDS learner; ``kind='delay'`` gives the delay-objective variant."""

    def __init__(self, cfg: SimConfig, agent: AgentConfig | None = None, seed: int = 0, kind: str = "aoi"):
        super().__init__(cfg, agent, seed, kind)
        a = self.acfg
        nf = n_features(a)
        self.actor = build_mlp(actor_sizes(self.n, a.hidden, nf), "sigmoid", self.rng,
                               momentum=a.bn_momentum, eps=a.bn_eps, softmax_groups=self.head_groups())
        self.value = build_mlp(value_sizes(self.n, a.hidden, nf), "identity", self.rng,
                               momentum=a.bn_momentum, eps=a.bn_eps)
        self.actor_target = self.actor.copy()
        self.value_target = self.value.copy()
        self.v_avg = 0.0
        self.v_avg_target = 0.0

    def _nets(self):
        return {"actor": self.actor, "value": self.value, "actor_target": self.actor_target,
                "value_target": self.value_target}

    def _scalars(self):
        return {"v_avg": self.v_avg, "v_avg_target": self.v_avg_target}

    # acting -------------------------------------------------------------------
    def policy(self, states, target: bool = False) -> np.ndarray:
        net = self.actor_target if target else self.actor
        return net.forward(self.state_features(states), "infer")

    def select_action(self, s: SystemState) -> tuple[np.ndarray, Action]:
        na = self.policy(s)[0]
        return na, denormalize_action(na, self.cfg, self.acfg.bandwidth_head)

    def _post(self, sb: StateBatch, na) -> dict:
        f, p, w = denormalize(na, self.cfg, self.acfg.bandwidth_head)
        out = sb.post_decision(f, p, w, self.cfg)
        out["action"] = (f, p, w)
        return out

    def relative_values(self, states) -> np.ndarray:
        """V(s) = C(s, pi(s)) + V~(f_k(s, pi(s))) - v with the current networks."""
        sb = StateBatch(states)
        out = self._post(sb, self.actor.forward(self.batch_features(sb), "infer"))
        vt = self.value.forward(self.pds_features(out), "infer")[:, 0]
        return self.cost(sb, out) + vt - self.v_avg

    # learning -----------------------------------------------------------------
    def critic_target(self, next_states) -> np.ndarray:
        sb = StateBatch(next_states)
        out = self._post(sb, self.actor_target.forward(self.batch_features(sb), "infer"))
        vt = self.value_target.forward(self.pds_features(out), "infer")[:, 0]
        return self.cost(sb, out) + vt - self.v_avg_target

    def critic_update(self, batch) -> float:
        states, na, next_states = batch
        y = self.critic_target(next_states)
        out = self._post(StateBatch(states), na)
        pred = self.value.forward(self.pds_features(out), "train")[:, 0]
        err = pred - y
        grads, _ = self.value.backward((2.0 / len(err)) * err[:, None])
        self.value.adam_step(grads, self.acfg.value_lr)
        return float(np.mean(err ** 2))

    def actor_objective_grad(self, states):
        """(mean objective, gradient w.r.t. the actor parameters) for a batch of states.

        Objective is C(s, pi(s)) + V~(f_k(s, pi(s))); the remaining-bits
        coordinate of f_k gets derivative -1 per processed bit where the
        queue still holds a task after the drain, everything else is held
        constant.
        """
        cfg = self.cfg
        sb = StateBatch(states)
        na = self.actor.forward(self.batch_features(sb), "train")
        out = self._post(sb, na)
        f, p, w = out["action"]
        b = na.shape[0]
        vt = self.value.forward(self.pds_features(out), "infer")[:, 0]
        _, dx = self.value.backward(np.full((b, 1), 1.0 / b))
        g_hol = dx[:, :self.n] / cfg.task_bits_max
        g_bits = -g_hol * out["alive"]
        g_f, g_p, g_w = cost_grad_action(sb.gain, f, p, w, self.lam, self.est, cfg, self.kind,
                                         self.credit_cap(out))
        g_f = g_f / b + g_bits * (cfg.slot_seconds / cfg.cycles_per_bit)
        h = sb.gain
        g_p = g_p / b + g_bits * (w * cfg.slot_seconds * h / ((cfg.noise_power + p * h) * LN2))
        g_w = g_w / b + g_bits * (cfg.slot_seconds * np.log1p(p * h / cfg.noise_power) / LN2)
        g_na = denormalize_grad(na, g_f, g_p, g_w, cfg, self.acfg.bandwidth_head)
        grads, _ = self.actor.backward(g_na)
        obj = float(np.mean(self.cost(sb, out) + vt))
        return obj, grads

    def actor_update(self, batch) -> float:
        states = batch[0]
        _, grads = self.actor_objective_grad(states)
        self.actor.adam_step(grads, self.acfg.actor_lr)
        return float(np.sqrt(sum((g * g).sum() for g in grads)))

    def avg_reward_update(self, s: SystemState, na, s_next: SystemState, beta: float | None = None) -> float:
        beta = 1.0 / np.sqrt(max(self.t, 1)) if beta is None else beta
        sb = StateBatch([s])
        c = self.cost(sb, self._post(sb, np.atleast_2d(na)))[0]
        vs, vs_next = self.relative_values([s, s_next])
        self.v_avg = (1.0 - beta) * self.v_avg + beta * (c + vs_next - vs)
        return self.v_avg

    def soft_update_targets(self, omega: float | None = None) -> None:
        w = self.acfg.omega if omega is None else omega
        soft_update(self.actor_target, self.actor, w)
        soft_update(self.value_target, self.value, w)
        self.v_avg_target = w * self.v_avg + (1.0 - w) * self.v_avg_target

    def learn(self, s, na, s_next) -> None:
        batch = self.buffer.sample(self.rng, self.acfg.batch_size)
        self.last["critic_loss"] = self.critic_update(batch)
        self.last["actor_grad"] = self.actor_update(batch)
        self.avg_reward_update(s, na, s_next)
        self.soft_update_targets()
        self.updates += 1

    def train_step(self, env: MecEnv):
        """One acting + learning iteration; returns the env StepResult."""
        s = env.state
        na, action = self.select_action(s)
        res = env.step(action)
        self.t += 1
        self.observe(s, na, res)
        if len(self.buffer) >= max(self.acfg.warmup, 1):
            self.learn(s, na, res.next_state)
        self.finish_slot(res.metrics, self.t)
        return res
