"""Run configuration: one JSON document, every field defaulted.

A config with nothing but a ``grid`` (or even an empty object) is
runnable. Any key can be overridden on the command line with repeated
``--set dotted.path=value`` flags; values parse as JSON with a plain
string fallback. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .linear_attention import DEFAULT_ROPE_BASE, RopeConfig
from .masking import (
    DEFAULT_CALIBRATION_DELTA,
    DEFAULT_TOPK,
    LatentGrid,
    MaskPlan,
    TopK,
    Window,
)

MASK_KINDS = ("window", "topk", "calibrate", "explicit", "per_head")
DROP_STRATEGIES = ("none", "interval", "random", "threshold", "explicit")


@dataclass
class GridCfg:
    frames: int = 4
    height: int = 4
    width: int = 4
    heads: int = 2
    head_dim: int = 8

    def to_grid(self) -> LatentGrid:
        return LatentGrid(self.frames, self.height, self.width, self.heads, self.head_dim)


@dataclass
class SigmaCfg:
    """Noise scales per simulated timestep; explicit ``values`` win over
    the geometric schedule between ``max`` and ``min``."""

    max: float = 1.0
    min: float = 0.1
    values: list[float] | None = None

    def schedule(self, timesteps: int) -> list[float]:
        if self.values is not None:
            if len(self.values) != timesteps:
                raise ConfigError(
                    f"sigma.values has {len(self.values)} entries for {timesteps} timesteps"
                )
            return [float(v) for v in self.values]
        if timesteps == 1:
            return [self.max]
        ratio = (self.min / self.max) ** (1.0 / (timesteps - 1))
        return [self.max * ratio**i for i in range(timesteps)]


@dataclass
class MaskCfg:
    kind: str = "window"
    radius: int = 8
    reordered: bool = False
    block_size: int = 8
    k: int = DEFAULT_TOPK
    candidates: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16])
    delta: float = DEFAULT_CALIBRATION_DELTA
    choose_reorder: bool = True
    per_head: list[dict] | None = None
    plan_path: str | None = None


@dataclass
class RopeCfg:
    base: float = DEFAULT_ROPE_BASE
    split: list[int] | None = None

    def to_rope(self, head_dim: int) -> RopeConfig:
        if self.split is None:
            return RopeConfig.default(head_dim, self.base)
        return RopeConfig(split=tuple(self.split), base=self.base)


@dataclass
class BlockCfg:
    variant: str = "shared"
    gate_activation: str = "sigmoid"
    gate_constant: float = 0.5
    lambda_override: float | None = None
    dropped: bool = False
    gate_detached: bool = False
    lora_rank: int = 0
    lora_scale: float = 1.0
    random_proj: bool = False
    gate_bias: float = -1.0
    params_bundle: str | None = None


@dataclass
class DropCfg:
    strategy: str = "none"
    lo: float = 0.8
    hi: float = 1.0
    fraction: float = 0.2
    tau: float = 0.1
    seed: int | None = None
    layers: list[int] | None = None


@dataclass
class AnalysisCfg:
    rank_layers: list[int] | None = None
    rank_timestep: int = 0
    rank_rel_tol: float = 1e-6
    strategies: list[dict] | None = None


@dataclass
class MapsCfg:
    export: bool = False
    layer: int = 0
    timestep: int = 0
    head: int = 0


@dataclass
class ChecksCfg:
    gradcheck_in_run: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    threads: int = 1
    timestamp: bool = True
    layers: int = 4
    timesteps: int = 5
    workload_dir: str | None = None
    grid: GridCfg = field(default_factory=GridCfg)
    sigma: SigmaCfg = field(default_factory=SigmaCfg)
    mask: MaskCfg = field(default_factory=MaskCfg)
    rope: RopeCfg = field(default_factory=RopeCfg)
    block: BlockCfg = field(default_factory=BlockCfg)
    drop: DropCfg = field(default_factory=DropCfg)
    analysis: AnalysisCfg = field(default_factory=AnalysisCfg)
    maps: MapsCfg = field(default_factory=MapsCfg)
    checks: ChecksCfg = field(default_factory=ChecksCfg)

    def validate(self) -> "RunConfig":
        if self.layers < 1 or self.timesteps < 1 or self.threads < 1:
            raise ConfigError("layers, timesteps, and threads must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        self.grid.to_grid()
        if self.mask.kind not in MASK_KINDS:
            raise ConfigError(f"mask.kind must be one of {MASK_KINDS}, got {self.mask.kind!r}")
        if self.drop.strategy not in DROP_STRATEGIES:
            raise ConfigError(f"drop.strategy must be one of {DROP_STRATEGIES}, got {self.drop.strategy!r}")
        if self.block.variant not in ("shared", "non_shared"):
            raise ConfigError(f"block.variant must be shared or non_shared, got {self.block.variant!r}")
        if self.block.gate_activation not in ("sigmoid", "tanh", "relu", "constant"):
            raise ConfigError(f"unknown gate activation {self.block.gate_activation!r}")
        if self.block.lora_rank < 0:
            raise ConfigError("block.lora_rank must be >= 0")
        self.rope.to_rope(self.grid.head_dim)  # raises on a bad split
        self.sigma.schedule(self.timesteps)
        if self.maps.export:
            if not 0 <= self.maps.layer < self.layers:
                raise ConfigError(f"maps.layer {self.maps.layer} out of range for {self.layers} layers")
            if not 0 <= self.maps.timestep < self.timesteps:
                raise ConfigError(f"maps.timestep {self.maps.timestep} out of range")
            if not 0 <= self.maps.head < self.grid.heads:
                raise ConfigError(f"maps.head {self.maps.head} out of range for {self.grid.heads} heads")
        if self.analysis.rank_layers is not None:
            bad = [l for l in self.analysis.rank_layers if not 0 <= l < self.layers]
            if bad:
                raise ConfigError(f"analysis.rank_layers entry {bad[0]} out of range for {self.layers} layers")
        if not 0 <= self.analysis.rank_timestep < self.timesteps:
            raise ConfigError(f"analysis.rank_timestep {self.analysis.rank_timestep} out of range")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def semantic_dict(self) -> dict:
        """Config echo for reports: everything that shapes the results.

        Execution context (output directory, thread count, timestamping)
        is omitted so identical work produces identical bytes no matter
        where or how it ran.
        """
        doc = self.to_dict()
        for key in ("out", "threads", "timestamp"):
            doc.pop(key)
        return doc

    def to_grid(self) -> LatentGrid:
        return self.grid.to_grid()

    def to_rope(self) -> RopeConfig:
        return self.rope.to_rope(self.grid.head_dim)

    def static_plan(self) -> MaskPlan | None:
        """Plan derivable without data; calibrate and topk-at-runtime
        entries return None only when data is required (topk is static in
        shape terms, so only ``calibrate`` is data-dependent here)."""
        heads = self.grid.heads
        m = self.mask
        if m.kind == "window":
            return MaskPlan.uniform(Window(radius=m.radius, reordered=m.reordered), heads)
        if m.kind == "topk":
            return MaskPlan.uniform(TopK(block_size=m.block_size, k=m.k), heads)
        if m.kind == "per_head":
            if not m.per_head or len(m.per_head) != heads:
                raise ConfigError(f"mask.per_head must list {heads} entries")
            entries = []
            for rec in m.per_head:
                kind = rec.get("kind")
                if kind == "window":
                    entries.append(Window(radius=int(rec["radius"]),
                                          reordered=bool(rec.get("reordered", False))))
                elif kind == "topk":
                    entries.append(TopK(block_size=int(rec["block_size"]),
                                        k=int(rec.get("k", DEFAULT_TOPK))))
                else:
                    raise ConfigError(f"mask.per_head entries must be window or topk, got {kind!r}")
            return MaskPlan(entries)
        if m.kind == "explicit":
            if not m.plan_path:
                raise ConfigError("mask.kind=explicit requires mask.plan_path")
            from .tensor_io import read_plan

            plan = read_plan(m.plan_path)
            if len(plan) != heads:
                raise ConfigError(f"plan at {m.plan_path} has {len(plan)} heads, config wants {heads}")
            return plan
        return None  # calibrate: needs profiling data


_SECTION_TYPES = {
    "grid": GridCfg,
    "sigma": SigmaCfg,
    "mask": MaskCfg,
    "rope": RopeCfg,
    "block": BlockCfg,
    "drop": DropCfg,
    "analysis": AnalysisCfg,
    "maps": MapsCfg,
    "checks": ChecksCfg,
}


def _build_section(cls, doc: Any, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {path!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config key {path}.{sorted(unknown)[0]}")
    return cls(**doc)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    kwargs: dict[str, Any] = {}
    for key, value in doc.items():
        if key in _SECTION_TYPES:
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Read a config file (or start from defaults) and apply overrides."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    for item in overrides or []:
        apply_override(doc, item)
    return config_from_dict(doc)


def apply_override(doc: dict, item: str) -> None:
    """Apply one ``dotted.path=value`` assignment into a raw config dict."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad --set key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {key!r} crosses a non-object value")
    node[parts[-1]] = value
