"""Run configuration: a flat, typed key = value text format.

Zero-dependency and diff-friendly: one ``key = value`` pair per line,
``#`` comments, no sections. Unknown keys, type errors, and constraint
violations are reported with the offending field name. Parse, serialize,
and parse again always yields an identical structure.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .tensor import ConfigError


@dataclass
class RunConfig:
    task: str = "diffusion"
    seed: int = 0
    out_dir: str = "runs/default"

    # model dims
    model_dim: int = 64
    model_heads: int = 4
    model_layers: int = 6
    patch: int = 4
    image_size: int = 16
    channels: int = 1
    classes: int = 4

    # recursive component
    experts: int = 2
    latent_steps: int = 2
    lora_rank: int = 8
    tau: float = 5.0
    target_layers: str = "3"
    balance_weight: float = 0.01
    force_balance: bool = False
    remodulate_per_step: bool = False
    gate_conditioning: str = "full"

    # optimization
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    batch_size: int = 16
    steps: int = 10000
    log_every: int = 50
    checkpoint_every: int = 0

    # data / diffusion process
    data_kind: str = "shapes"
    data_count: int = 256
    diffusion_steps: int = 50

    # sampling
    sample_n: int = 16

    # frozenlake task
    lake_grid: int = 4
    lake_cell_px: int = 4
    hole_density: float = 0.125
    lake_maps: int = 150
    rollouts_per_map: int = 2
    detour_eps: float = 0.2
    lake_steps: int = 4000
    lake_lr: float = 1e-3
    heldout_maps: int = 40

    def target_layer_list(self) -> tuple[int, ...]:
        text = self.target_layers.strip()
        if not text:
            return ()
        try:
            return tuple(int(part) for part in text.split(","))
        except ValueError as exc:
            raise ConfigError(f"target_layers: expected comma-separated ints, got {text!r}") from exc

    def validate(self) -> None:
        def require(ok: bool, field: str, msg: str) -> None:
            if not ok:
                raise ConfigError(f"{field}: {msg}")

        require(self.task in ("diffusion", "frozenlake"), "task",
                f"must be 'diffusion' or 'frozenlake', got {self.task!r}")
        require(self.seed >= 0, "seed", "must be >= 0")
        require(self.model_dim >= 4 and self.model_dim % 4 == 0, "model_dim",
                "must be a positive multiple of 4")
        require(self.model_dim % self.model_heads == 0, "model_heads",
                f"must divide model_dim ({self.model_dim})")
        require(self.model_layers >= 1, "model_layers", "must be >= 1")
        require(self.image_size % self.patch == 0, "patch",
                f"must divide image_size ({self.image_size})")
        require(self.classes >= 2, "classes", "must be >= 2")
        require(self.experts >= 1, "experts", "must be >= 1")
        require(self.latent_steps >= 1, "latent_steps", "must be >= 1")
        require(1 <= self.lora_rank <= self.model_dim, "lora_rank",
                f"must be in [1, {self.model_dim}]")
        require(self.tau > 0, "tau", "must be > 0")
        for layer in self.target_layer_list():
            require(0 <= layer < self.model_layers, "target_layers",
                    f"layer {layer} outside [0, {self.model_layers})")
        require(self.gate_conditioning in ("full", "tokens_only"), "gate_conditioning",
                "must be 'full' or 'tokens_only'")
        require(self.lr > 0, "lr", "must be > 0")
        require(0 < self.beta1 < 1 and 0 < self.beta2 < 1, "beta1",
                "betas must lie in (0, 1)")
        require(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        require(self.batch_size >= 1, "batch_size", "must be >= 1")
        require(self.steps >= 1, "steps", "must be >= 1")
        require(self.data_kind in ("shapes", "gaussians"), "data_kind",
                "must be 'shapes' or 'gaussians'")
        require(self.data_count >= self.classes, "data_count",
                "must cover every class at least once")
        require(self.diffusion_steps >= 2, "diffusion_steps", "must be >= 2")
        require(self.sample_n >= 1, "sample_n", "must be >= 1")
        require(self.lake_grid >= 2, "lake_grid", "must be >= 2")
        require(0.0 <= self.hole_density <= 0.4, "hole_density", "must be in [0, 0.4]")
        require(0.0 <= self.detour_eps < 1.0, "detour_eps", "must be in [0, 1)")
        require(self.lake_maps >= 1, "lake_maps", "must be >= 1")
        require(self.heldout_maps >= 1, "heldout_maps", "must be >= 1")


_BOOL_TRUE = {"true", "1", "yes", "on"}
_BOOL_FALSE = {"false", "0", "no", "off"}


def _coerce(field_name: str, kind: type, raw: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"{field_name}: expected a boolean, got {raw!r}")
    if kind is int:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{field_name}: expected an integer, got {raw!r}") from exc
    if kind is float:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{field_name}: expected a number, got {raw!r}") from exc
    return raw


def parse_config_text(text: str) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    kinds = {"str": str, "int": int, "float": float, "bool": bool}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        kind = kinds.get(types[key], str) if isinstance(types[key], str) else types[key]
        values[key] = _coerce(key, kind, raw)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"))


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_as_dict(cfg: RunConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}


def config_from_dict(d: dict) -> RunConfig:
    cfg = RunConfig(**d)
    cfg.validate()
    return cfg


__all__ = [
    "RunConfig",
    "parse_config_text",
    "load_config",
    "serialize_config",
    "config_as_dict",
    "config_from_dict",
]
