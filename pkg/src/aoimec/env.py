"""Slotted MEC cell: N devices with FCFS task queues sharing one base station.

Timing convention: at slot t the scheduler sees ``s(t)``, picks an action,
the action drains queues deterministically (the post-decision state), then
random events happen (arrivals generated *during* slot t carry gen_slot=t,
fresh fading) and ``s(t+1)`` results.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .config import SimConfig

LN2 = np.log(2.0)


class DomainError(ValueError):
    pass


class InfeasibleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Physics
# ---------------------------------------------------------------------------

def local_bits(freq, cfg: SimConfig):
    """Bits processed on the device CPU in one slot."""
    freq = np.asarray(freq, dtype=np.float64)
    if np.any(freq < 0):
        raise DomainError("CPU frequency must be non-negative")
    return freq * cfg.slot_seconds / cfg.cycles_per_bit


def local_energy(bits, cfg: SimConfig):
    """DVFS energy, cubic in the bits processed locally."""
    bits = np.asarray(bits, dtype=np.float64)
    if np.any(bits < 0):
        raise DomainError("local bits must be non-negative")
    return cfg.energy_eff * cfg.cycles_per_bit ** 3 / cfg.slot_seconds ** 2 * bits ** 3


def channel_gain(distance, fading, cfg: SimConfig):
    distance = np.asarray(distance, dtype=np.float64)
    fading = np.asarray(fading, dtype=np.float64)
    if np.any(distance <= 0):
        raise DomainError("distance must be positive")
    if np.any(fading <= 0):
        raise DomainError("fading must be positive")
    return 1e-3 * distance ** (-cfg.pathloss_exp) * fading


def tx_rate(power, bandwidth, gain, cfg: SimConfig):
    """Shannon rate in bits/s; zero bandwidth gives zero rate."""
    power = np.asarray(power, dtype=np.float64)
    bandwidth = np.asarray(bandwidth, dtype=np.float64)
    snr = power * np.asarray(gain, dtype=np.float64) / cfg.noise_power
    return bandwidth * np.log1p(snr) / LN2


def offload_energy(bits, bandwidth, gain, cfg: SimConfig):
    """Transmit energy needed to push ``bits`` through ``bandwidth`` in one slot."""
    bits = np.asarray(bits, dtype=np.float64)
    bandwidth = np.asarray(bandwidth, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if np.any(bits < 0):
        raise DomainError("offloaded bits must be non-negative")
    if np.any((bits > 0) & (bandwidth <= 0)):
        raise InfeasibleError("offloading requires positive bandwidth")
    with np.errstate(divide="ignore", invalid="ignore"):
        expo = np.where(bandwidth > 0, bits / (bandwidth * cfg.slot_seconds), 0.0)
    return np.expm1(LN2 * expo) * cfg.noise_power * cfg.slot_seconds / gain


def action_terms(freq, power, bandwidth, gain, cfg: SimConfig):
    """Elementwise (d_local, d_offload, E_local, E_offload) for any array shape."""
    d_l = local_bits(freq, cfg)
    d_o = tx_rate(power, bandwidth, gain, cfg) * cfg.slot_seconds
    e_l = local_energy(d_l, cfg)
    e_o = offload_energy(d_o, bandwidth, gain, cfg)
    return d_l, d_o, e_l, e_o


# ---------------------------------------------------------------------------
# State types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Task:
    gen_slot: int
    size_bits: float
    remaining_bits: float


@dataclass(frozen=True)
class WDState:
    hol_remaining_bits: float
    aoi_slots: int
    queue_len: int
    channel_gain: float
    task_queue: tuple[Task, ...]


@dataclass(eq=False)
class Action:
    freq: np.ndarray
    power: np.ndarray
    bandwidth: np.ndarray

    def __post_init__(self):
        self.freq = np.asarray(self.freq, dtype=np.float64)
        self.power = np.asarray(self.power, dtype=np.float64)
        self.bandwidth = np.asarray(self.bandwidth, dtype=np.float64)

    @classmethod
    def zeros(cls, n: int) -> "Action":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def copy(self) -> "Action":
        return Action(self.freq.copy(), self.power.copy(), self.bandwidth.copy())


class _Queues:
    """Ragged FCFS queues: WD i owns tasks offsets[i]:offsets[i+1], HOL first."""

    offsets: np.ndarray
    task_gen: np.ndarray
    task_size: np.ndarray
    task_rem: np.ndarray

    @property
    def n_wds(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def queue_len(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def empty(self) -> np.ndarray:
        return self.queue_len == 0

    @property
    def hol_remaining(self) -> np.ndarray:
        q = self.queue_len
        out = np.zeros(q.shape[0])
        idx = self.offsets[:-1][q > 0]
        out[q > 0] = self.task_rem[idx]
        return out

    def hol_gen(self) -> np.ndarray:
        """Generation slot of each HOL task (-1 for empty queues)."""
        q = self.queue_len
        out = np.full(q.shape[0], -1, dtype=np.int64)
        out[q > 0] = self.task_gen[self.offsets[:-1][q > 0]]
        return out

    def tasks(self, i: int) -> tuple[Task, ...]:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return tuple(Task(int(g), float(sz), float(r)) for g, sz, r in
                     zip(self.task_gen[lo:hi], self.task_size[lo:hi], self.task_rem[lo:hi]))


@dataclass(eq=False)
class SystemState(_Queues):
    slot: int
    gain: np.ndarray
    offsets: np.ndarray
    task_gen: np.ndarray
    task_size: np.ndarray
    task_rem: np.ndarray

    @classmethod
    def initial(cls, gain: np.ndarray, slot: int = 0) -> "SystemState":
        n = len(gain)
        return cls(slot, np.asarray(gain, dtype=np.float64), np.zeros(n + 1, dtype=np.int64),
                   np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))

    @classmethod
    def from_queues(cls, slot: int, gain, queues) -> "SystemState":
        """Builds a state from per-device lists of ``Task`` (or (gen, size, rem) tuples)."""
        lens = [len(q) for q in queues]
        offsets = np.concatenate(([0], np.cumsum(lens))).astype(np.int64)
        flat = [Task(*t) if not isinstance(t, Task) else t for q in queues for t in q]
        return cls(int(slot), np.asarray(gain, dtype=np.float64), offsets,
                   np.array([t.gen_slot for t in flat], dtype=np.int64),
                   np.array([t.size_bits for t in flat], dtype=np.float64),
                   np.array([t.remaining_bits for t in flat], dtype=np.float64))

    @property
    def aoi(self) -> np.ndarray:
        g = self.hol_gen()
        return np.where(g >= 0, self.slot - g, 0).astype(np.int64)

    def observation(self) -> np.ndarray:
        """(N, 4) array of (remaining HOL bits, AoI, queue length, channel gain)."""
        return np.column_stack([self.hol_remaining, self.aoi, self.queue_len, self.gain]).astype(np.float64)

    def wd(self, i: int) -> WDState:
        return WDState(float(self.hol_remaining[i]), int(self.aoi[i]), int(self.queue_len[i]),
                       float(self.gain[i]), self.tasks(i))

    @property
    def per_wd(self) -> list[WDState]:
        return [self.wd(i) for i in range(self.n_wds)]


@dataclass(eq=False)
class PostDecisionState(_Queues):
    """State after the action's deterministic effect, before random events.

    ``slot`` is the decision slot t.  ``aoi`` is t minus the new HOL's
    generation slot, 0 for drained queues (``empty`` disambiguates).
    """

    slot: int
    gain: np.ndarray
    offsets: np.ndarray
    task_gen: np.ndarray
    task_size: np.ndarray
    task_rem: np.ndarray
    completions: np.ndarray
    local_bits: np.ndarray
    offload_bits: np.ndarray
    wasted_bits: np.ndarray
    finished_gen: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    finished_wd: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    clamped: int = 0

    @property
    def aoi(self) -> np.ndarray:
        g = self.hol_gen()
        return np.where(g >= 0, self.slot - g, 0).astype(np.int64)

    def observation(self) -> np.ndarray:
        return np.column_stack([self.hol_remaining, self.aoi, self.queue_len, self.gain]).astype(np.float64)


@dataclass(eq=False)
class RandomEvents:
    arrivals: np.ndarray
    new_task_bits: np.ndarray
    fading: np.ndarray


@dataclass(eq=False)
class StepMetrics:
    aoi: np.ndarray
    queue_len: np.ndarray
    energy: np.ndarray
    local_energy: np.ndarray
    offload_energy: np.ndarray
    local_bits: np.ndarray
    offload_bits: np.ndarray
    completions: np.ndarray
    wasted_bits: np.ndarray
    arrivals: np.ndarray
    clamped: int


class StepResult(NamedTuple):
    pds: PostDecisionState
    events: RandomEvents
    next_state: SystemState
    metrics: StepMetrics


# ---------------------------------------------------------------------------
# Transitions
# ---------------------------------------------------------------------------

def clamp_action(action: Action, cfg: SimConfig) -> tuple[Action, int]:
    """Projects onto the box bounds and the bandwidth budget; counts fixes."""
    f = np.clip(action.freq, 0.0, cfg.max_freq)
    p = np.clip(action.power, 0.0, cfg.max_power)
    w = np.maximum(action.bandwidth, 0.0)
    n = int(np.count_nonzero(f != action.freq) + np.count_nonzero(p != action.power)
            + np.count_nonzero(w != action.bandwidth))
    total = w.sum()
    if total > cfg.bs_bandwidth * (1 + 1e-12):
        w = w * (cfg.bs_bandwidth / total)
        n += 1
    if n == 0:
        return action, 0
    return Action(f, p, w), n


def apply_action(s: SystemState, action: Action, cfg: SimConfig) -> PostDecisionState:
    """Deterministic post-decision state f_k(s, action).

    Processed bits first finish the HOL task; with ``drain_mode='carryover'``
    leftover capacity moves on to the next queued task within the same slot
    and capacity beyond the whole queue is wasted.  ``'clamp'`` caps the
    slot's processing at the HOL remainder (at most one completion).
    """
    action, n_clamped = clamp_action(action, cfg)
    d_l = local_bits(action.freq, cfg)
    d_o = tx_rate(action.power, action.bandwidth, s.gain, cfg) * cfg.slot_seconds
    rem, comp, wasted = _kernels.drain(s.offsets, s.task_rem, d_l + d_o, cfg.completion_tol,
                                       cfg.drain_mode == "clamp")
    lens = s.queue_len
    seg = np.repeat(np.arange(s.n_wds), lens)
    pos = np.arange(s.task_rem.shape[0]) - s.offsets[:-1][seg]
    keep = pos >= comp[seg]
    new_lens = lens - comp
    offsets = np.concatenate(([0], np.cumsum(new_lens))).astype(np.int64)
    return PostDecisionState(
        slot=s.slot, gain=s.gain, offsets=offsets,
        task_gen=s.task_gen[keep], task_size=s.task_size[keep], task_rem=rem[keep],
        completions=comp, local_bits=d_l, offload_bits=d_o, wasted_bits=wasted,
        finished_gen=s.task_gen[~keep], finished_wd=seg[~keep], clamped=n_clamped)


def advance(pds: PostDecisionState, ev: RandomEvents, cfg: SimConfig) -> SystemState:
    """Applies arrivals (gen_slot = t) and fading to give s(t+1)."""
    n = pds.n_wds
    arr = np.asarray(ev.arrivals).astype(bool)
    if arr.shape != (n,):
        raise ValueError("events and post-decision state disagree on N")
    lens = pds.queue_len
    new_lens = lens + arr
    offsets = np.concatenate(([0], np.cumsum(new_lens))).astype(np.int64)
    m = offsets[-1]
    gen = np.empty(m, dtype=np.int64)
    size = np.empty(m)
    rem = np.empty(m)
    # old tasks keep their order; an arrival goes to the tail of its queue
    old_pos = np.arange(pds.task_rem.shape[0]) + np.repeat(offsets[:-1] - pds.offsets[:-1], lens)
    gen[old_pos] = pds.task_gen
    size[old_pos] = pds.task_size
    rem[old_pos] = pds.task_rem
    tail = offsets[1:][arr] - 1
    gen[tail] = pds.slot
    size[tail] = ev.new_task_bits[arr]
    rem[tail] = ev.new_task_bits[arr]
    gain = channel_gain(cfg.distances, ev.fading, cfg)
    return SystemState(pds.slot + 1, gain, offsets, gen, size, rem)


def sample_events(rng: np.random.Generator, cfg: SimConfig) -> RandomEvents:
    n = cfg.n_wds
    arrivals = rng.random(n) < cfg.arrival_rate
    bits = rng.uniform(cfg.task_bits_min, cfg.task_bits_max, size=n)
    fading = rng.exponential(1.0, size=n)
    return RandomEvents(arrivals.astype(np.int64), np.where(arrivals, bits, 0.0), fading)


def step_metrics(s: SystemState, pds: PostDecisionState, action: Action, ev: RandomEvents,
                 cfg: SimConfig) -> StepMetrics:
    action, _ = clamp_action(action, cfg)
    e_l = local_energy(pds.local_bits, cfg)
    e_o = offload_energy(pds.offload_bits, action.bandwidth, s.gain, cfg)
    return StepMetrics(aoi=s.aoi, queue_len=s.queue_len, energy=e_l + e_o, local_energy=e_l,
                       offload_energy=e_o, local_bits=pds.local_bits, offload_bits=pds.offload_bits,
                       completions=pds.completions, wasted_bits=pds.wasted_bits,
                       arrivals=np.asarray(ev.arrivals), clamped=pds.clamped)


def step(s: SystemState, action: Action, rng: np.random.Generator, cfg: SimConfig) -> StepResult:
    pds = apply_action(s, action, cfg)
    ev = sample_events(rng, cfg)
    nxt = advance(pds, ev, cfg)
    return StepResult(pds, ev, nxt, step_metrics(s, pds, action, ev, cfg))


class MecEnv:
    """Stateful wrapper: owns the RNG stream and, optionally, an event log.

    The log records ``(wd, gen_slot)`` arrivals and ``(wd, gen_slot,
    finish_slot)`` completions, which is all an AoI replay needs.
    """

    def __init__(self, cfg: SimConfig, seed: int | None = None, record: bool = False):
        self.cfg = cfg
        self.seed = cfg.rng_seed if seed is None else seed
        self.record = record
        self.reset()

    def reset(self) -> SystemState:
        self.rng = np.random.default_rng(self.seed)
        fading = self.rng.exponential(1.0, size=self.cfg.n_wds)
        self.state = SystemState.initial(channel_gain(self.cfg.distances, fading, self.cfg))
        self.clamp_total = 0
        self.arrival_log: list[tuple[int, int]] = []
        self.finish_log: list[tuple[int, int, int]] = []
        return self.state

    def step(self, action: Action) -> StepResult:
        res = step(self.state, action, self.rng, self.cfg)
        self.clamp_total += res.metrics.clamped
        if self.record:
            t = self.state.slot
            self.finish_log.extend((int(w), int(g), t) for w, g in zip(res.pds.finished_wd, res.pds.finished_gen))
            self.arrival_log.extend((int(w), t) for w in np.flatnonzero(res.events.arrivals))
        self.state = res.next_state
        return res

    def get_state(self) -> dict:
        return {"state": self.state, "rng": self.rng.bit_generator.state, "clamp_total": self.clamp_total}

    def set_state(self, snap: dict) -> None:
        self.state = snap["state"]
        self.rng.bit_generator.state = snap["rng"]
        self.clamp_total = snap["clamp_total"]


# ---------------------------------------------------------------------------
# Batched post-decision features (training hot path)
# ---------------------------------------------------------------------------

class StateBatch:
    """Several SystemStates packed into one ragged buffer for batched f_k."""

    def __init__(self, states: list[SystemState]):
        self.states = states
        b = len(states)
        n = states[0].n_wds
        self.size, self.n_wds = b, n
        lens = np.diff(np.stack([s.offsets for s in states]), axis=1).ravel()
        self.offsets = np.concatenate(([0], np.cumsum(lens))).astype(np.int64)
        self.task_gen = np.concatenate([s.task_gen for s in states])
        self.task_rem = np.concatenate([s.task_rem for s in states])
        self.slot = np.array([s.slot for s in states], dtype=np.int64)
        self.gain = np.stack([s.gain for s in states])
        self.queue_len = lens.reshape(b, n)
        first = self.offsets[:-1]
        ne = lens > 0
        hol = np.zeros(b * n)
        hol[ne] = self.task_rem[first[ne]]
        gen = np.zeros(b * n, dtype=np.int64)
        gen[ne] = self.task_gen[first[ne]]
        self.hol_remaining = hol.reshape(b, n)
        self.aoi = np.where(ne.reshape(b, n), self.slot[:, None] - gen.reshape(b, n), 0)

    def post_decision(self, freq, power, bandwidth, cfg: SimConfig) -> dict:
        """Batched f_k summary: PDS tuple arrays plus processing terms.

        ``alive`` marks devices whose queue still holds a task after the
        drain, i.e. where the remaining-bits coordinate moves one-for-one with
        the processed bits.  ``backlog`` is the queued bits before the drain.
        """
        b, n = self.size, self.n_wds
        d_l, d_o, e_l, e_o = action_terms(freq, power, bandwidth, self.gain, cfg)
        seg = np.repeat(np.arange(b * n), np.diff(self.offsets))
        backlog = np.bincount(seg, weights=self.task_rem, minlength=b * n).reshape(b, n)
        rem, comp, _ = _kernels.drain(self.offsets, self.task_rem, (d_l + d_o).ravel(),
                                      cfg.completion_tol, cfg.drain_mode == "clamp")
        lens = np.diff(self.offsets)
        first = self.offsets[:-1] + comp
        alive = comp < lens
        hol = np.zeros(b * n)
        hol[alive] = rem[first[alive]]
        gen = np.zeros(b * n, dtype=np.int64)
        gen[alive] = self.task_gen[first[alive]]
        alive = alive.reshape(b, n)
        return {
            "hol_remaining": hol.reshape(b, n),
            "aoi": np.where(alive, self.slot[:, None] - gen.reshape(b, n), 0),
            "queue_len": (lens - comp).reshape(b, n),
            "gain": self.gain,
            "alive": alive,
            "local_bits": d_l, "offload_bits": d_o,
            "backlog": backlog,
            "energy": e_l + e_o,
        }
