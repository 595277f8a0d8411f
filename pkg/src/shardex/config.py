from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .scheduler import Mode


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    n_shards: int = 1
    n_e: int = 1
    f_e: int = 0
    c: int = 2
    K: int = 100  # checkpoint boundary interval; 0 disables checkpointing
    n_sequencers: int = 1
    mode: str = Mode.BASE.value
    transport: str = "sim"  # sim | shuffle | socket
    latency_min: float = 0.0001
    latency_max: float = 0.001
    fault_schedule: str | None = None
    budget: float = 0.0  # sim: simulated seconds before ScenarioTimeout (0 = automatic)
    seed: int = 0
    batch_size: int = 100
    commit_interval: float = 0.0  # seconds between committed batches (0 = all at once)
    # simulated service costs (seconds)
    cost_msg: float = 2e-6
    cost_exec: float = 5e-6
    cost_fib_iter: float = 1e-8
    ckpt_write_time: float = 2e-4
    exec_lanes: int = 1  # sim: VM pool size per worker (1 = execute inline on the protocol task)
    suspicion_delay: float = 2e-3
    slow_rows: dict = field(default_factory=dict)  # row -> service-time multiplier
    wire: bool = False  # sim: push every message through the codec
    checkpoints: bool | None = None  # default: on iff n_e > 1

    def validate(self) -> "RunConfig":
        if self.n_shards < 1 or self.n_sequencers < 1:
            raise ConfigError("n_shards and n_sequencers must be >= 1")
        if self.n_e != 2 * self.f_e + 1:
            raise ConfigError("n_e must equal 2*f_e+1")
        if self.exec_lanes < 1:
            raise ConfigError("exec_lanes must be >= 1")
        if self.c < 2:
            raise ConfigError("c must be >= 2")
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        try:
            Mode(self.mode)
        except ValueError:
            raise ConfigError(f"unknown mode {self.mode!r}") from None
        if self.transport not in ("sim", "shuffle", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.latency_min < 0 or self.latency_max < self.latency_min:
            raise ConfigError("bad latency bounds")
        self.slow_rows = {int(k): float(v) for k, v in self.slow_rows.items()}
        return self

    @property
    def checkpointing(self) -> bool:
        on = self.n_e > 1 if self.checkpoints is None else self.checkpoints
        return on and self.K > 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path: str, overrides: dict | None = None) -> "RunConfig":
        with open(path) as f:
            text = f.read()
        if path.endswith((".yaml", ".yml")):
            import yaml
            d = yaml.safe_load(text) or {}
        else:
            d = json.loads(text)
        d.update(overrides or {})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)
