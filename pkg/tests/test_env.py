import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aoimec.config import SimConfig
from aoimec.env import (Action, DomainError, InfeasibleError, MecEnv, RandomEvents, SystemState, Task,
                        advance, apply_action, channel_gain, clamp_action, local_bits, local_energy,
                        offload_energy, step, tx_rate)

from conftest import random_action

CFG = SimConfig(n_wds=1)
# 1e-3 * 50^-3.8 evaluated with 30-digit mpmath, frozen
GAIN_50M = 3.49875863661848978038e-10


# -- physics ---------------------------------------------------------------------

def test_local_bits_examples():
    assert local_bits(2e9, CFG) == pytest.approx(20000, rel=1e-12)
    assert local_bits(0.0, CFG) == 0.0
    assert local_bits(1e9, CFG) == pytest.approx(10000, rel=1e-12)
    with pytest.raises(DomainError):
        local_bits(-1.0, CFG)


def test_local_energy_examples():
    assert local_energy(20000, CFG) == pytest.approx(8e-3, rel=1e-12)
    assert local_energy(0, CFG) == 0.0
    assert local_energy(10000, CFG) == pytest.approx(1e-3, rel=1e-12)
    # equals gamma f^2 * f dt
    f = 1.3e9
    assert local_energy(local_bits(f, CFG), CFG) == pytest.approx(1e-28 * f ** 3 * 0.01, rel=1e-12)


def test_channel_gain_examples():
    assert channel_gain(50.0, 1.0, CFG) == pytest.approx(GAIN_50M, rel=1e-13)
    assert channel_gain(1.0, 1.0, CFG) == pytest.approx(1e-3, rel=1e-15)
    assert channel_gain(50.0, 2.0, CFG) == pytest.approx(2 * GAIN_50M, rel=1e-13)
    with pytest.raises(DomainError):
        channel_gain(0.0, 1.0, CFG)


def test_tx_rate_examples():
    h = CFG.noise_power  # so that P h / sigma^2 = P
    assert tx_rate(0.0, 1e6, h, CFG) == 0.0
    assert tx_rate(1.0, 1e6, h, CFG) == pytest.approx(1e6, rel=1e-14)
    assert tx_rate(3.0, 1e6, h, CFG) == pytest.approx(2e6, rel=1e-14)
    assert tx_rate(1.0, 0.0, h, CFG) == 0.0


def test_offload_energy_examples():
    assert offload_energy(0.0, 1e6, 1e-9, CFG) == 0.0
    p, w, h = 1.0, 1e6, 1e-9
    assert offload_energy(tx_rate(p, w, h, CFG) * 0.01, w, h, CFG) == pytest.approx(0.01, rel=1e-10)
    assert offload_energy(1e6 * 0.01, 1e6, 1e-9, CFG) == pytest.approx(1e-4, rel=1e-12)
    with pytest.raises(InfeasibleError):
        offload_energy(10.0, 0.0, 1e-9, CFG)


@given(st.floats(1e-3, 1.0), st.floats(1e4, 2e7), st.floats(-13, -7))
def test_rate_energy_duality(p, w, log_h):
    h = 10.0 ** log_h
    e = offload_energy(tx_rate(p, w, h, CFG) * CFG.slot_seconds, w, h, CFG)
    assert abs(e / (p * CFG.slot_seconds) - 1) < 1e-10


@given(st.floats(0, 1e5), st.floats(1, 1e5), st.floats(1e5, 2e7), st.floats(-13, -7))
def test_offload_energy_increasing(b, db, w, log_h):
    h = 10.0 ** log_h
    assert offload_energy(b + db, w, h, CFG) > offload_energy(b, w, h, CFG) >= 0


@given(st.floats(0, 5e4), st.floats(0.1, 10))
def test_local_energy_cubic(b, c):
    assert local_energy(c * b, CFG) == pytest.approx(c ** 3 * local_energy(b, CFG), rel=1e-12, abs=1e-300)


# -- transitions -------------------------------------------------------------------

def unit_cfg(n=1, mode="carryover"):
    """Slot of 1 s and 1 cycle/bit, so a frequency of k Hz processes exactly k bits."""
    return SimConfig(n_wds=n, slot_seconds=1.0, cycles_per_bit=1.0, drain_mode=mode)


def state_with(queue, slot=10, gain=1e-9):
    return SystemState.from_queues(slot, [gain], [queue])


def process(bits, n=1):
    return Action(np.full(n, float(bits)), np.zeros(n), np.zeros(n))


def test_apply_action_exact_completion():
    cfg = unit_cfg()
    pds = apply_action(state_with([Task(7, 100, 100)]), process(100), cfg)
    assert pds.queue_len[0] == 0 and pds.hol_remaining[0] == 0 and pds.aoi[0] == 0 and pds.empty[0]


def test_apply_action_carryover():
    cfg = unit_cfg()
    t = 10
    s = state_with([Task(t - 5, 100, 100), Task(t - 3, 50, 50)], slot=t)
    pds = apply_action(s, process(120), cfg)
    assert pds.queue_len[0] == 1
    assert pds.hol_remaining[0] == pytest.approx(30)
    assert pds.aoi[0] == 3
    assert pds.completions[0] == 1


def test_apply_action_partial():
    cfg = unit_cfg()
    s = state_with([Task(6, 100, 100)])
    pds = apply_action(s, process(40), cfg)
    assert pds.queue_len[0] == 1 and pds.hol_remaining[0] == 60 and pds.aoi[0] == s.aoi[0]


def test_apply_action_waste_and_gain_kept():
    cfg = unit_cfg()
    s = state_with([Task(6, 10, 10), Task(8, 10, 10)])
    pds = apply_action(s, process(50), cfg)
    assert pds.completions[0] == 2 and pds.wasted_bits[0] == pytest.approx(30)
    assert np.array_equal(pds.gain, s.gain)


def test_clamp_mode_one_completion():
    cfg = unit_cfg(mode="clamp")
    s = state_with([Task(6, 10, 10), Task(8, 10, 10)])
    pds = apply_action(s, process(50), cfg)
    assert pds.completions[0] == 1 and pds.hol_remaining[0] == 10


def events(arr, bits=0.0, n=1):
    return RandomEvents(np.atleast_1d(np.asarray(arr, dtype=np.int64)), np.full(n, float(bits) * arr),
                        np.ones(n))


def test_advance_examples():
    cfg = unit_cfg()
    t = 10
    empty = apply_action(state_with([], slot=t), process(0), cfg)
    nxt = advance(empty, events(0), cfg)
    assert nxt.aoi[0] == 0 and nxt.queue_len[0] == 0 and nxt.slot == t + 1
    nxt = advance(empty, events(1, 30e3), cfg)
    assert nxt.aoi[0] == 1 and nxt.queue_len[0] == 1 and nxt.hol_remaining[0] == 30e3
    busy = apply_action(state_with([Task(t - 4, 100, 100)], slot=t), process(0), cfg)
    assert advance(busy, events(0), cfg).aoi[0] == 5


def test_clamp_action_counts():
    cfg = SimConfig(n_wds=2)
    a, n = clamp_action(Action([-1.0, 3e9], [0.5, 2.0], [cfg.bs_bandwidth, cfg.bs_bandwidth]), cfg)
    assert n == 4
    assert np.all(a.freq == [0.0, cfg.max_freq[1]]) and a.power[1] == cfg.max_power[1]
    assert a.bandwidth.sum() == pytest.approx(cfg.bs_bandwidth, rel=1e-12)


def test_zero_action_pure_aging(cfg5):
    env = MecEnv(cfg5, seed=4)
    prev = None
    for _ in range(50):
        res = env.step(Action.zeros(cfg5.n_wds))
        assert np.all(res.metrics.energy == 0)
        if prev is not None:
            busy = prev.queue_len > 0
            assert np.all(res.metrics.aoi[busy] == prev.aoi[busy] + 1)
        prev = res.metrics


def test_step_reproducible(cfg5):
    def run():
        env = MecEnv(cfg5, seed=9)
        rng = np.random.default_rng(1)
        out = []
        for _ in range(200):
            m = env.step(random_action(rng, cfg5)).metrics
            out.append(np.concatenate([m.aoi, m.energy, m.queue_len]))
        return np.array(out)
    assert np.array_equal(run(), run())


def test_energy_identity_and_trace_invariants(cfg5, rng):
    env = MecEnv(cfg5, seed=2)
    s = env.state
    for _ in range(2000):
        a = random_action(rng, cfg5)
        res = env.step(a)
        m = res.metrics
        e_l = local_energy(local_bits(a.freq, cfg5), cfg5)
        e_o = offload_energy(tx_rate(a.power, a.bandwidth, s.gain, cfg5) * cfg5.slot_seconds, a.bandwidth,
                             s.gain, cfg5)
        assert np.array_equal(m.energy, e_l + e_o)
        nxt = res.next_state
        # queue conservation
        assert np.array_equal(nxt.queue_len, s.queue_len - m.completions + res.events.arrivals)
        # AoI recurrence when nothing completed and the queue was nonempty
        keep = (m.completions == 0) & (s.queue_len > 0)
        assert np.all(nxt.aoi[keep] == s.aoi[keep] + 1)
        # emptiness triple
        e = nxt.queue_len == 0
        assert np.array_equal(e, nxt.hol_remaining == 0) and np.array_equal(e, nxt.aoi == 0)
        assert np.all(res.pds.queue_len == s.queue_len - m.completions)
        s = nxt


def test_wd_view(cfg5):
    env = MecEnv(cfg5, seed=1)
    for _ in range(30):
        env.step(Action.zeros(cfg5.n_wds))
    s = env.state
    for i, wd in enumerate(s.per_wd):
        assert wd.queue_len == len(wd.task_queue)
        if wd.queue_len:
            assert wd.aoi_slots == s.slot - wd.task_queue[0].gen_slot
            assert all(0 <= t.remaining_bits <= t.size_bits for t in wd.task_queue)


def test_events_in_range(cfg5):
    env = MecEnv(cfg5, seed=5)
    for _ in range(500):
        ev = env.step(Action.zeros(cfg5.n_wds)).events
        b = ev.new_task_bits[ev.arrivals == 1]
        assert np.all((b >= cfg5.task_bits_min) & (b <= cfg5.task_bits_max))
        assert np.all(ev.fading > 0)


def test_get_set_state_resumes(cfg5, rng):
    env = MecEnv(cfg5, seed=3)
    for _ in range(20):
        env.step(random_action(rng, cfg5))
    snap = env.get_state()
    acts = [random_action(rng, cfg5) for _ in range(30)]
    a = [env.step(x).metrics.aoi.copy() for x in acts]
    env.set_state(snap)
    b = [env.step(x).metrics.aoi.copy() for x in acts]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_step_function_matches_env(cfg5, rng):
    env = MecEnv(cfg5, seed=7)
    s0 = env.state
    a = random_action(rng, cfg5)
    r1 = env.step(a)
    # the env draws the initial fading first, so replay that draw before comparing
    g = np.random.default_rng(7)
    g.exponential(1.0, size=cfg5.n_wds)
    r2 = step(s0, a, g, cfg5)
    assert np.array_equal(r1.next_state.gain, r2.next_state.gain)
    assert np.array_equal(r1.next_state.queue_len, r2.next_state.queue_len)
