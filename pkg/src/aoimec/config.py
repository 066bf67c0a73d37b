"""Simulation configuration, profiles and the flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Bad or missing configuration value; the message names the key."""


PER_WD_KEYS = ("max_freq", "max_power", "energy_budget", "arrival_rate")


@dataclass
class SimConfig:
    """Physical and stochastic parameters of the MEC cell.

    Per-device fields (``max_freq``, ``max_power``, ``energy_budget``,
    ``arrival_rate``) are arrays of length ``n_wds``; scalars are broadcast by
    ``resolve``.  ``wd_positions`` is sampled from ``layout_seed`` (falling back
    to ``rng_seed``) when left empty.
    """

    n_wds: int = 15
    slot_seconds: float = 0.01
    cycles_per_bit: float = 1000.0
    energy_eff: float = 1e-28
    noise_power: float = 1e-11
    pathloss_exp: float = 3.8
    bs_bandwidth: float = 20e6
    max_freq: np.ndarray | float = 2e9
    max_power: np.ndarray | float = 1.0
    # 0.1 W average power cap expressed per 10 ms slot
    energy_budget: np.ndarray | float = 1e-3
    arrival_rate: np.ndarray | float = 0.3
    task_bits_min: float = 20e3
    task_bits_max: float = 50e3
    area_side: float = 100.0
    wd_positions: np.ndarray | None = None
    bs_position: np.ndarray | None = None
    horizon_slots: int = 100_000
    rng_seed: int = 0
    layout_seed: int | None = None
    drain_mode: str = "carryover"
    completion_tol: float = 1e-6

    def __post_init__(self):
        self.resolve()

    def resolve(self) -> "SimConfig":
        n = int(self.n_wds)
        if n < 1:
            raise ConfigError("n_wds must be >= 1")
        self.n_wds = n
        for key in PER_WD_KEYS:
            val = np.asarray(getattr(self, key), dtype=np.float64)
            if val.ndim == 0:
                val = np.full(n, float(val))
            if val.shape != (n,):
                raise ConfigError(f"{key}: expected {n} values, got {val.size}")
            setattr(self, key, val)
        if self.bs_position is None:
            self.bs_position = np.array([self.area_side / 2, self.area_side / 2])
        self.bs_position = np.asarray(self.bs_position, dtype=np.float64).reshape(2)
        if self.wd_positions is None or np.size(self.wd_positions) == 0:
            seed = self.rng_seed if self.layout_seed is None else self.layout_seed
            rng = np.random.default_rng([int(seed), 0x1a7])
            self.wd_positions = rng.uniform(0.0, self.area_side, size=(n, 2))
        self.wd_positions = np.asarray(self.wd_positions, dtype=np.float64).reshape(-1, 2)
        if self.wd_positions.shape[0] != n:
            raise ConfigError(f"wd_positions: expected {n} positions, got {self.wd_positions.shape[0]}")
        self.validate()
        return self

    def validate(self) -> None:
        for key in ("slot_seconds", "cycles_per_bit", "energy_eff", "noise_power", "pathloss_exp",
                    "bs_bandwidth", "task_bits_min", "task_bits_max", "area_side"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be strictly positive")
        for key in ("max_freq", "max_power", "energy_budget"):
            if not np.all(getattr(self, key) > 0):
                raise ConfigError(f"{key} must be strictly positive")
        if not np.all((self.arrival_rate > 0) & (self.arrival_rate < 1)):
            raise ConfigError("arrival_rate must lie in (0, 1)")
        if self.task_bits_min > self.task_bits_max:
            raise ConfigError("task_bits_min must not exceed task_bits_max")
        if self.horizon_slots < 0:
            raise ConfigError("horizon_slots must be >= 0")
        if self.drain_mode not in ("carryover", "clamp"):
            raise ConfigError("drain_mode must be 'carryover' or 'clamp'")
        if np.any(self.distances <= 0):
            raise ConfigError("wd_positions: a device sits on the base station")

    @property
    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.wd_positions - self.bs_position, axis=1)

    @property
    def mean_task_bits(self) -> float:
        return 0.5 * (self.task_bits_min + self.task_bits_max)

    def with_updates(self, **kw) -> "SimConfig":
        """Copy with fields replaced; positions are kept unless n_wds changes."""
        cur = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        if "n_wds" in kw and kw["n_wds"] != self.n_wds:
            cur["wd_positions"] = None
            for key in PER_WD_KEYS:
                cur[key] = float(np.asarray(cur[key]).flat[0])
        cur.update(kw)
        return SimConfig(**cur)


@dataclass
class AgentConfig:
    """Learning hyper-parameters shared by the deep agents."""

    hidden: int = 128
    actor_lr: float = 1e-3
    value_lr: float = 2e-3
    batch_size: int = 64
    buffer_capacity: int = 100_000
    warmup: int = 1000
    omega: float = 0.005
    lambda_init: float = 5000.0
    lambda_max: float = 1e6
    eta_base: float = 100.0
    eta_scale: float = 0.01
    estimate_decay: float = 0.999
    strict_paper_arch: bool = True
    bandwidth_head: str = "sigmoid_softmax"
    # "nominal": every processed bit earns a^-; "backlog": only bits that drain queued work
    reduction_credit: str = "nominal"
    aoi_scale: float = 50.0
    queue_scale: float = 20.0
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    discount: float = 0.99
    explore_std: float = 0.1


@dataclass
class RunConfig:
    """Harness-level settings for one experiment cell."""

    policy: str = "dpds"
    seed: int = 1
    slots: int | None = None
    stride: int = 10
    budget_multiplier: float = 1.0
    profile: str = "desk"
    fixed_max: bool = False
    grid_points: int = 21


@dataclass
class Config:
    sim: SimConfig = field(default_factory=SimConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    run: RunConfig = field(default_factory=RunConfig)


def paper_profile() -> Config:
    return Config(SimConfig(n_wds=15, horizon_slots=100_000), AgentConfig(), RunConfig(profile="paper"))


def desk_profile() -> Config:
    """N=5, 2e4 slots; bandwidth scaled with N so each device keeps the
    N=15 spectrum share, warm-up scaled to 1% of the horizon."""
    sim = SimConfig(n_wds=5, horizon_slots=20_000, bs_bandwidth=20e6 * 5 / 15)
    return Config(sim, AgentConfig(warmup=200), RunConfig(profile="desk"))


def smoke_profile() -> Config:
    """N=2, 1e4 slots, same per-device spectrum share as the desk profile."""
    sim = SimConfig(n_wds=2, horizon_slots=10_000, bs_bandwidth=20e6 * 2 / 15)
    return Config(sim, AgentConfig(warmup=100), RunConfig(profile="smoke"))


PROFILES = {"paper": paper_profile, "desk": desk_profile, "smoke": smoke_profile}


def _parse_value(key: str, raw: str, template):
    raw = raw.strip()
    try:
        if key == "wd_positions" or key == "bs_position":
            pts = [p for p in raw.replace(";", ",").split(",") if p.strip()]
            vals = [float(x) for p in pts for x in p.split()]
            return np.asarray(vals, dtype=np.float64).reshape(-1, 2) if key == "wd_positions" \
                else np.asarray(vals, dtype=np.float64)
        if key in PER_WD_KEYS:
            vals = [float(x) for x in raw.replace(",", " ").split()]
            return vals[0] if len(vals) == 1 else np.asarray(vals)
        if isinstance(template, bool):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if key == "layout_seed" or key == "slots":
            return None if raw.lower() in ("", "none") else int(raw)
        if isinstance(template, int):
            num = float(raw)  # accepts 1e5
            if not num.is_integer():
                raise ValueError(raw)
            return int(num)
        if isinstance(template, float):
            return float(raw)
        return raw
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: cannot parse value {raw!r}") from exc


def parse_config_text(text: str, base: Config | None = None) -> Config:
    """Parses ``key = value`` lines (``#`` starts a comment) onto a profile.

    A ``profile`` key, if present, selects the starting profile; every other
    key must name a field of SimConfig, AgentConfig or RunConfig.
    """
    pairs: list[tuple[str, str, int]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        pairs.append((key.strip(), val.strip(), lineno))
    profile = next((v for k, v, _ in pairs if k == "profile"), None)
    if base is None:
        name = profile or "desk"
        if name not in PROFILES:
            raise ConfigError(f"profile: unknown profile {name!r}")
        base = PROFILES[name]()
    sim_kw = {f.name: getattr(base.sim, f.name) for f in dataclasses.fields(SimConfig)}
    agent_kw = dataclasses.asdict(base.agent)
    run_kw = dataclasses.asdict(base.run)
    touched_n = False
    for key, val, lineno in pairs:
        if key in sim_kw:
            sim_kw[key] = _parse_value(key, val, sim_kw[key] if sim_kw[key] is not None else "")
            touched_n |= key == "n_wds"
        elif key in agent_kw:
            agent_kw[key] = _parse_value(key, val, agent_kw[key])
        elif key in run_kw:
            run_kw[key] = _parse_value(key, val, run_kw[key] if run_kw[key] is not None else 0)
        else:
            raise ConfigError(f"{key}: unknown configuration key (line {lineno})")
    if touched_n and sim_kw["n_wds"] != base.sim.n_wds:
        given = {k for k, _, _ in pairs}
        if "wd_positions" not in given:
            sim_kw["wd_positions"] = None
        for key in PER_WD_KEYS:
            if key not in given:
                sim_kw[key] = float(np.asarray(sim_kw[key]).flat[0])
    return Config(SimConfig(**sim_kw), AgentConfig(**agent_kw), RunConfig(**run_kw))


def load_config(path: str | Path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    return parse_config_text(path.read_text())


def _fmt(val) -> str:
    if isinstance(val, np.ndarray):
        if val.ndim == 2:
            return ", ".join(f"{x!r} {y!r}" for x, y in val.tolist())
        return ", ".join(repr(float(x)) for x in val.tolist())
    if isinstance(val, float):
        return repr(val)
    return "none" if val is None else str(val)


def dump_config(cfg: Config) -> str:
    """Resolved configuration (including sampled positions) in the input format."""
    lines = ["# resolved configuration"]
    for section, obj in (("sim", cfg.sim), ("agent", cfg.agent), ("run", cfg.run)):
        lines.append(f"# [{section}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def eta_schedule(t: int, base: float = 100.0, scale: float = 1.0) -> float:
    """Lagrange step size base * min(1, 10 / ln(t + 1)), times ``scale``."""
    return scale * base * min(1.0, 10.0 / math.log(t + 1.0))
