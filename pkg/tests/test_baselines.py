import numpy as np
import pytest

from aoimec.baselines import (BUDGET_MULTIPLIERS, MyopicAgent, addpg_agent, coo_policy, dddpg_agent, dpl_agent,
                              lpo_policy, queued_bits)
from aoimec.config import AgentConfig, SimConfig
from aoimec.cost import ArrivalEstimates, LagrangeMultipliers, delay_cost
from aoimec.dpds import DpdsAgent
from aoimec.env import MecEnv, StateBatch, SystemState, Task


def busy_state(cfg, queues, slot=20):
    return SystemState.from_queues(slot, np.full(cfg.n_wds, 1e-9), queues)


@pytest.fixture
def cfg3():
    return SimConfig(n_wds=3, rng_seed=1)


def test_queued_bits(cfg3):
    s = busy_state(cfg3, [[Task(1, 10.0, 10.0), Task(2, 5.0, 5.0)], [], [Task(3, 9.0, 7.0)]])
    assert np.array_equal(queued_bits(s), [15.0, 0.0, 7.0])


def test_lpo_examples(cfg3):
    est = ArrivalEstimates(cfg3)
    s = busy_state(cfg3, [[Task(1, 30e3, 30e3)], [], [Task(3, 45e3, 45e3)]])
    a = lpo_policy(s, LagrangeMultipliers([100.0] * 3), est, cfg3)
    assert np.all(a.power == 0) and np.all(a.bandwidth == 0)
    assert a.freq[1] == 0.0 and a.freq[0] > 0 and a.freq[2] > 0
    big = lpo_policy(s, LagrangeMultipliers([1e12] * 3), est, cfg3)
    assert np.all(big.freq < 1e-2 * cfg3.max_freq)
    # without a price, clear as much backlog as the CPU allows
    free = lpo_policy(s, LagrangeMultipliers([0.0] * 3), est, cfg3)
    assert free.freq[0] == pytest.approx(min(30e3 * 1000 / 0.01, 2e9))


def test_coo_examples(cfg3):
    est = ArrivalEstimates(cfg3)
    lam = LagrangeMultipliers([100.0] * 3)
    one = coo_policy(busy_state(cfg3, [[], [Task(1, 30e3, 30e3)], []]), lam, est, cfg3)
    assert np.all(one.freq == 0) and np.array_equal(one.bandwidth, [0.0, cfg3.bs_bandwidth, 0.0])
    none = coo_policy(busy_state(cfg3, [[], [], []]), lam, est, cfg3)
    assert np.all(none.freq == 0) and np.all(none.power == 0) and np.all(none.bandwidth == 0)
    two = coo_policy(busy_state(cfg3, [[Task(1, 3e4, 3e4)], [], [Task(1, 3e4, 3e4)]]), lam, est, cfg3)
    assert np.array_equal(two.bandwidth, [cfg3.bs_bandwidth / 2, 0.0, cfg3.bs_bandwidth / 2])


def test_fixed_max_flag(cfg3):
    est = ArrivalEstimates(cfg3)
    s = busy_state(cfg3, [[Task(1, 3e4, 3e4)], [], []])
    a = lpo_policy(s, [5.0] * 3, est, cfg3, fixed_max=True)
    assert np.array_equal(a.freq, [cfg3.max_freq[0], 0.0, 0.0])
    b = coo_policy(s, [5.0] * 3, est, cfg3, fixed_max=True)
    assert np.array_equal(b.power, [cfg3.max_power[0], 0.0, 0.0])


@pytest.mark.parametrize("kind", ["lpo", "coo"])
def test_single_path_energy_every_slot(kind):
    cfg = SimConfig(n_wds=4, rng_seed=2)
    agent = MyopicAgent(cfg, kind)
    env = MecEnv(cfg, seed=1)
    for _ in range(1000):
        a = agent.select_action(env.state)
        res = agent.train_step(env)
        if kind == "lpo":
            assert np.all(a.power == 0)
        else:
            assert np.all(a.freq == 0)
        assert a.bandwidth.sum() <= cfg.bs_bandwidth * (1 + 1e-12)
        assert res.metrics.clamped == 0
    with pytest.raises(ValueError):
        MyopicAgent(cfg, "dpds")


def test_coo_bandwidth_tight_when_busy():
    cfg = SimConfig(n_wds=4, rng_seed=2)
    agent = MyopicAgent(cfg, "coo")
    env = MecEnv(cfg, seed=3)
    for _ in range(500):
        s = env.state
        a = agent.select_action(s)
        if s.queue_len.sum() > 0:
            assert a.bandwidth.sum() == pytest.approx(cfg.bs_bandwidth, rel=1e-12)
        agent.train_step(env)


def test_budget_multipliers():
    assert BUDGET_MULTIPLIERS == {"lpo": 3.0, "coo": 2.0}


def test_myopic_lambda_tracks_budget():
    cfg = SimConfig(n_wds=3, rng_seed=2, energy_budget=3e-3)
    agent = MyopicAgent(cfg, "lpo")
    env = MecEnv(cfg, seed=0)
    e = [agent.train_step(env).metrics.energy.mean() for _ in range(5000)]
    assert abs(np.mean(e[1000:]) / 3e-3 - 1) < 0.1


# -- DPL ------------------------------------------------------------------------------

def test_delay_cost_examples():
    cfg = SimConfig(n_wds=2)
    est = ArrivalEstimates(cfg)
    assert delay_cost([0, 0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0], est, 1e-3) == 0.0
    lo = delay_cost([3, 1], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0], est, 1e-3)
    hi = delay_cost([4, 1], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0], est, 1e-3)
    assert hi > lo


def test_dpl_agent_uses_delay_cost():
    cfg = SimConfig(n_wds=2, rng_seed=1)
    agent = dpl_agent(cfg, AgentConfig(hidden=8))
    assert isinstance(agent, DpdsAgent) and agent.kind == "delay"
    s = busy_state(cfg, [[Task(1, 3e4, 3e4), Task(2, 3e4, 3e4)], []])
    sb = StateBatch([s])
    out = agent._post(sb, np.zeros((1, 6)))
    # zero processing: cost is the queue-length sum
    assert agent.cost(sb, out)[0] == pytest.approx(2.0)


# -- DDPG variants ----------------------------------------------------------------------

def small_ddpg(discounted, **kw):
    cfg = SimConfig(n_wds=2, rng_seed=1)
    kw = {"hidden": 8, "warmup": 10, "batch_size": 8, **kw}
    a = AgentConfig(**kw)
    agent = (dddpg_agent if discounted else addpg_agent)(cfg, a)
    env = MecEnv(cfg, seed=0)
    for _ in range(30):
        agent.train_step(env)
    return agent


def test_dddpg_zero_discount_target_is_cost():
    agent = small_ddpg(True, discount=0.0)
    states, na, nxt = agent.buffer.batch(np.arange(8))
    sb = StateBatch(states)
    assert np.array_equal(agent.target(sb, na, StateBatch(nxt)), agent.batch_cost(sb, na))


def test_ddpg_critic_zero_loss_when_q_matches(monkeypatch):
    agent = small_ddpg(False, warmup=1000)
    batch = agent.buffer.batch(np.arange(8))
    sb = StateBatch(batch[0])
    pred = agent.critic.forward(np.concatenate([agent.batch_features(sb), batch[1]], axis=1), "train",
                                update_stats=False)[:, 0]
    before = agent.critic.get_flat().copy()
    monkeypatch.setattr(agent, "target", lambda *a: pred.copy())
    assert agent.critic_update(batch) == 0.0
    assert np.array_equal(agent.critic.get_flat(), before)


def test_ddpg_exploration_stays_feasible():
    agent = small_ddpg(False)
    s = SystemState.initial(agent.mgain)
    for _ in range(100):
        na, a = agent.select_action(s)
        assert np.all((na >= 0) & (na <= 1))
        assert a.bandwidth.sum() == pytest.approx(agent.cfg.bs_bandwidth, rel=1e-9)
    na0, _ = agent.select_action(s, explore=False)
    na1, _ = agent.select_action(s, explore=False)
    assert np.array_equal(na0, na1)


def test_ddpg_discount_validation():
    with pytest.raises(ValueError):
        dddpg_agent(SimConfig(n_wds=1), AgentConfig(discount=1.0))


def test_ddpg_average_reward_moves_v():
    agent = small_ddpg(False)
    assert agent.updates == 21 and np.isfinite(agent.v_avg) and agent.v_avg != 0.0
    assert small_ddpg(True).v_avg == 0.0

