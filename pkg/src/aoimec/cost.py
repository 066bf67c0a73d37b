"""Lagrangian costs, multiplier dynamics and analytic action gradients.

All cost functions take per-device arrays with an optional leading batch
axis and return one value per batch row (a float for unbatched input).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SimConfig, eta_schedule
from .env import LN2, Action, action_terms


@dataclass
class LagrangeMultipliers:
    """Per-device multipliers projected onto [0, lambda_max]."""

    values: np.ndarray
    lambda_max: float = 1e6
    eta_base: float = 100.0
    eta_scale: float = 1.0

    def __post_init__(self):
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), 0.0, self.lambda_max)

    @classmethod
    def constant(cls, n: int, value: float, **kw) -> "LagrangeMultipliers":
        return cls(np.full(n, float(value)), **kw)

    def eta(self, slot: int) -> float:
        return eta_schedule(slot, self.eta_base, self.eta_scale)

    def copy(self) -> "LagrangeMultipliers":
        return LagrangeMultipliers(self.values.copy(), self.lambda_max, self.eta_base, self.eta_scale)


def update_lambda(lam: LagrangeMultipliers, energy, slot: int, budget) -> LagrangeMultipliers:
    """Projected subgradient step on the per-device energy constraint."""
    if slot < 1:
        raise ValueError("slot must be >= 1")
    new = lam.values + lam.eta(slot) * (np.asarray(energy) - np.asarray(budget))
    return LagrangeMultipliers(np.clip(new, 0.0, lam.lambda_max), lam.lambda_max, lam.eta_base, lam.eta_scale)


class ArrivalEstimates:
    """Running estimates of per-device arrival rate and mean task size.

    Exponential moving averages seeded from the configured law, so the
    expected-AoI-reduction term is usable from the first slot.
    """

    def __init__(self, cfg: SimConfig, decay: float = 0.999, floor: float = 1e-3):
        self.decay = decay
        self.floor = floor
        self.rate_est = cfg.arrival_rate.astype(np.float64).copy()
        self.mean_bits_est = np.full(cfg.n_wds, cfg.mean_task_bits)
        self.n_slots = 0
        self.n_tasks = np.zeros(cfg.n_wds, dtype=np.int64)

    def observe(self, arrivals, task_bits) -> None:
        arrivals = np.asarray(arrivals).astype(bool)
        d = self.decay
        self.rate_est = np.maximum(d * self.rate_est + (1 - d) * arrivals, self.floor)
        self.mean_bits_est = np.where(arrivals, d * self.mean_bits_est + (1 - d) * np.asarray(task_bits),
                                      self.mean_bits_est)
        self.n_slots += 1
        self.n_tasks += arrivals

    @property
    def bits_per_aoi(self) -> np.ndarray:
        """Processed bits worth one slot of expected AoI reduction: d_bar * p_a."""
        return self.mean_bits_est * self.rate_est

    def copy(self) -> "ArrivalEstimates":
        new = object.__new__(ArrivalEstimates)
        new.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})
        return new


def _lam(lam):
    return lam.values if isinstance(lam, LagrangeMultipliers) else np.asarray(lam, dtype=np.float64)


def lagrangian_cost(aoi, energy, lam, budget):
    """sum_i a_i + sum_i lambda_i (E_i - E_max_i); may be negative."""
    aoi = np.asarray(aoi, dtype=np.float64)
    energy = np.asarray(energy, dtype=np.float64)
    return aoi.sum(axis=-1) + (_lam(lam) * (energy - np.asarray(budget))).sum(axis=-1)


def expected_reduction(bits, est: ArrivalEstimates, queued_bits=None):
    """a^- = processed bits / (d_bar * p_a), optionally counting only queued bits."""
    bits = np.asarray(bits, dtype=np.float64)
    if queued_bits is not None:
        bits = np.minimum(bits, queued_bits)
    return bits / est.bits_per_aoi


def redesigned_cost(aoi, bits, energy, lam, est: ArrivalEstimates, budget, queued_bits=None):
    """sum_i (a_i - a^-_i) + sum_i lambda_i max(0, E_i - E_max_i).

    ``bits`` is d_local + d_offload per device.  ``queued_bits`` caps the
    credited bits at the device's backlog (used by the myopic baselines).
    """
    aoi = np.asarray(aoi, dtype=np.float64)
    red = expected_reduction(bits, est, queued_bits)
    pen = np.maximum(0.0, np.asarray(energy, dtype=np.float64) - np.asarray(budget))
    return (aoi - red).sum(axis=-1) + (_lam(lam) * pen).sum(axis=-1)


def delay_cost(queue_len, bits, energy, lam, est: ArrivalEstimates, budget, queued_bits=None):
    """Queue-length analogue of ``redesigned_cost``: expected completions d/d_bar."""
    q = np.asarray(queue_len, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.float64)
    if queued_bits is not None:
        bits = np.minimum(bits, queued_bits)
    pen = np.maximum(0.0, np.asarray(energy, dtype=np.float64) - np.asarray(budget))
    return (q - bits / est.mean_bits_est).sum(axis=-1) + (_lam(lam) * pen).sum(axis=-1)


def action_cost(aoi, gain, freq, power, bandwidth, lam, est, cfg: SimConfig, kind: str = "aoi",
                queue_len=None, queued_bits=None):
    """Redesigned (``kind='aoi'``) or delay (``'delay'``) cost of an action, batched."""
    d_l, d_o, e_l, e_o = action_terms(freq, power, bandwidth, gain, cfg)
    if kind == "aoi":
        return redesigned_cost(aoi, d_l + d_o, e_l + e_o, lam, est, cfg.energy_budget, queued_bits)
    return delay_cost(queue_len, d_l + d_o, e_l + e_o, lam, est, cfg.energy_budget, queued_bits)


def cost_grad_action(gain, freq, power, bandwidth, lam, est: ArrivalEstimates, cfg: SimConfig,
                     kind: str = "aoi", queued_bits=None):
    """Analytic gradient of the redesigned (or delay) cost w.r.t. (f, P, W).

    Returns three arrays shaped like ``freq``.  The max(0, .) penalty uses
    subgradient 0 at the kink.  Energy enters as E = gamma f^3 dt + P dt.
    With ``queued_bits`` the credit saturates once the slot's bits cover the
    backlog (one-sided derivative 0 at the cap).
    """
    freq = np.asarray(freq, dtype=np.float64)
    power = np.asarray(power, dtype=np.float64)
    bandwidth = np.asarray(bandwidth, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    dt, kappa = cfg.slot_seconds, cfg.cycles_per_bit
    scale = est.bits_per_aoi if kind == "aoi" else est.mean_bits_est
    snr = power * gain / cfg.noise_power
    dbits_df = dt / kappa
    dbits_dp = bandwidth * dt * gain / ((cfg.noise_power + power * gain) * LN2)
    dbits_dw = dt * np.log1p(snr) / LN2
    energy = cfg.energy_eff * freq ** 3 * dt + power * dt
    active = (energy - cfg.energy_budget) > 0
    w = _lam(lam) * active
    credit = 1.0 / scale
    if queued_bits is not None:
        bits = freq * dbits_df + bandwidth * dbits_dw
        credit = np.where(bits < np.asarray(queued_bits), credit, 0.0)
    g_f = -dbits_df * credit + w * 3.0 * cfg.energy_eff * freq ** 2 * dt
    g_p = -dbits_dp * credit + w * dt
    g_w = -dbits_dw * credit
    return g_f, g_p, g_w


def action_energy(action: Action, gain, cfg: SimConfig):
    _, _, e_l, e_o = action_terms(action.freq, action.power, action.bandwidth, gain, cfg)
    return e_l + e_o
