"""Configuration records shared by the simulator, the cost model and the CLI.

Every record validates itself on construction and raises :class:`ConfigError`
naming the offending field. ``RunConfig`` round-trips through JSON with a
fixed four-section schema (``model``, ``layout``, ``workload``, ``run``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class Strategy(str, Enum):
    DP = "DP"
    TP = "TP"
    SP = "SP"
    TPSP = "TPSP"
    TSP = "TSP"


class Recompute(str, Enum):
    NONE = "none"
    SELECTIVE = "selective"
    FULL = "full"


class Phase(str, Enum):
    FWD = "fwd"
    FWD_BWD = "fwd_bwd"
    FWD_BWD_RECOMP = "fwd_bwd_recomp"


def _require_positive(name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if value <= 0:
        raise ConfigError(name, f"must be positive, got {value}")


def _require_positive_number(name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(name, f"expected a number, got {value!r}")
    if value <= 0:
        raise ConfigError(name, f"must be positive, got {value}")


@dataclass(frozen=True)
class ModelConfig:
    """Dense decoder layer geometry plus the byte widths used by the cost model.

    Defaults are the 7B reference model (h=4096, 32 layers, MHA, F=4,
    bf16 weights and gradients, mixed-precision AdamW states).
    """

    hidden_size: int = 4096
    num_layers: int = 32
    num_heads: int = 32
    num_kv_heads: int = 32
    ffn_factor: int = 4
    param_bytes: float = 2
    grad_bytes: float = 2
    optimizer_states: int = 3
    optimizer_bytes: float = 4

    def __post_init__(self) -> None:
        for name in ("hidden_size", "num_layers", "num_heads", "num_kv_heads", "ffn_factor", "optimizer_states"):
            _require_positive(name, getattr(self, name))
        for name in ("param_bytes", "grad_bytes", "optimizer_bytes"):
            _require_positive_number(name, getattr(self, name))
        if self.num_heads % self.num_kv_heads:
            raise ConfigError(
                "num_kv_heads", f"num_heads={self.num_heads} is not a multiple of num_kv_heads={self.num_kv_heads}"
            )
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                "num_heads", f"hidden_size={self.hidden_size} is not a multiple of num_heads={self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def gqa_ratio(self) -> int:
        """Query heads per K/V head."""
        return self.num_heads // self.num_kv_heads

    @property
    def kv_dim(self) -> int:
        """Width of the K (and of the V) projection output."""
        return self.num_kv_heads * self.head_dim

    @property
    def ffn_dim(self) -> int:
        return self.ffn_factor * self.hidden_size


@dataclass(frozen=True)
class StrategyLayout:
    """Parallel strategy and its degrees.

    ``degree`` is the size of the parallel group. For TPSP the group is a
    ``tp_degree x sp_degree`` grid and ``degree`` may be omitted; the
    one-axis strategies leave both grid factors unset.
    """

    strategy: Strategy
    degree: int | None = None
    tp_degree: int | None = None
    sp_degree: int | None = None
    head_bucket: int | None = None

    def __post_init__(self) -> None:
        try:
            strategy = Strategy(self.strategy)
        except ValueError:
            raise ConfigError("strategy", f"unknown strategy {self.strategy!r}") from None
        object.__setattr__(self, "strategy", strategy)
        if strategy is Strategy.TPSP:
            if self.tp_degree is None or self.sp_degree is None:
                raise ConfigError("tp_degree", "TPSP requires both tp_degree and sp_degree")
            _require_positive("tp_degree", self.tp_degree)
            _require_positive("sp_degree", self.sp_degree)
            grid = self.tp_degree * self.sp_degree
            if self.degree is not None and self.degree != grid:
                raise ConfigError("degree", f"degree={self.degree} != tp_degree*sp_degree={grid}")
            object.__setattr__(self, "degree", grid)
        else:
            degree = 1 if self.degree is None else self.degree
            _require_positive("degree", degree)
            object.__setattr__(self, "degree", degree)
            for name, derived in zip(("tp_degree", "sp_degree"), self._one_axis_split()):
                value = getattr(self, name)
                if value is not None and value != derived:
                    raise ConfigError(name, f"{value} is inconsistent with {strategy.value} degree {degree}")
                object.__setattr__(self, name, None)
        if self.head_bucket is not None:
            _require_positive("head_bucket", self.head_bucket)

    def _one_axis_split(self) -> tuple[int, int]:
        D = self.degree
        return {
            Strategy.DP: (1, 1),
            Strategy.TP: (D, 1),
            Strategy.SP: (1, D),
            Strategy.TSP: (D, D),
        }[self.strategy]

    @classmethod
    def tpsp(cls, tp_degree: int, sp_degree: int) -> StrategyLayout:
        return cls(Strategy.TPSP, tp_degree * sp_degree, tp_degree, sp_degree)

    @property
    def split(self) -> tuple[int, int]:
        """(weight-shard factor, sequence-shard factor) of the layout."""
        if self.strategy is Strategy.TPSP:
            return self.tp_degree, self.sp_degree
        return self._one_axis_split()

    @property
    def weight_shards(self) -> int:
        return self.split[0]

    @property
    def seq_shards(self) -> int:
        return self.split[1]

    @property
    def label(self) -> str:
        if self.strategy is Strategy.TPSP:
            return f"TPSP({self.tp_degree},{self.sp_degree})"
        return self.strategy.value

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy.value,
            "degree": self.degree,
            "tp_degree": self.tp_degree,
            "sp_degree": self.sp_degree,
            "head_bucket": self.head_bucket,
        }


@dataclass(frozen=True)
class Workload:
    batch_size: int = 1
    seq_len: int = 8192
    recompute: Recompute = Recompute.SELECTIVE
    phase: Phase = Phase.FWD

    def __post_init__(self) -> None:
        _require_positive("batch_size", self.batch_size)
        _require_positive("seq_len", self.seq_len)
        try:
            object.__setattr__(self, "recompute", Recompute(self.recompute))
        except ValueError:
            raise ConfigError("recompute", f"unknown recompute mode {self.recompute!r}") from None
        try:
            object.__setattr__(self, "phase", Phase(self.phase))
        except ValueError:
            raise ConfigError("phase", f"unknown phase {self.phase!r}") from None
        if self.phase is Phase.FWD_BWD_RECOMP and self.recompute is Recompute.NONE:
            raise ConfigError("phase", "fwd_bwd_recomp requires recompute != none")

    def to_dict(self) -> dict[str, Any]:
        return {
            "batch_size": self.batch_size,
            "seq_len": self.seq_len,
            "recompute": self.recompute.value,
            "phase": self.phase.value,
        }


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    format: str = "json"
    out: str | None = None

    def __post_init__(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("run.seed", f"expected an unsigned 64-bit integer, got {self.seed!r}")
        if self.format not in ("csv", "json"):
            raise ConfigError("run.format", f"expected 'csv' or 'json', got {self.format!r}")


_SECTIONS = ("model", "layout", "workload", "run")


def _build(section: str, cls: type, raw: Any) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(section, "expected an object")
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown key")
    try:
        return cls(**raw)
    except ConfigError as exc:
        if exc.field.startswith(section + "."):
            raise
        raise ConfigError(f"{section}.{exc.field}", str(exc).split(": ", 1)[1]) from None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    layout: StrategyLayout = field(default_factory=lambda: StrategyLayout(Strategy.TSP, 8))
    workload: Workload = field(default_factory=Workload)
    run: RunSettings = field(default_factory=RunSettings)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> RunConfig:
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "expected a JSON object")
        unknown = sorted(set(raw) - set(_SECTIONS))
        if unknown:
            raise ConfigError(unknown[0], "unknown section")
        defaults = cls()
        parts = {
            "model": _build("model", ModelConfig, raw.get("model", asdict(defaults.model))),
            "layout": _build("layout", StrategyLayout, raw.get("layout", defaults.layout.to_dict())),
            "workload": _build("workload", Workload, raw.get("workload", defaults.workload.to_dict())),
            "run": _build("run", RunSettings, raw.get("run", asdict(defaults.run))),
        }
        return cls(**parts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": asdict(self.model),
            "layout": self.layout.to_dict(),
            "workload": self.workload.to_dict(),
            "run": asdict(self.run),
        }

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def default_run_config() -> RunConfig:
    """The shipped defaults file: 7B reference model, TSP over one 8-GPU node."""
    text = resources.files("tsp_sim").joinpath("default_config.json").read_text(encoding="utf-8")
    return RunConfig.from_dict(json.loads(text))
