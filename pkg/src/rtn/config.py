"""Training configuration and its plain-text ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .losses import KernelConfig
from .network import Variant

VARIANTS = ("source_only", "mmd", "multi_mmd", "mmd_ent", "mmd_ent_res")
ABLATION_LADDER = ("source_only", "mmd", "mmd_ent", "mmd_ent_res")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.3
    gamma: float = 0.3
    variant: str = "mmd_ent_res"
    lr0: float = 0.01
    alpha: float = 10.0
    beta: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 2e-3
    total_steps: int = 2000
    batch_size: int = 64
    eval_interval: int = 50
    feature_widths: tuple[int, ...] = (32, 16)
    bottleneck: int = 16
    new_layer_lr_mult: float = 10.0
    adapt_layers: tuple[str, ...] = ("fcb", "fcc")
    bandwidth_policy: str = "median_per_batch"
    fixed_bandwidth: float = 1.0
    estimator: str = "quadratic"
    sketch_dim: int = 0
    seed: int = 0

    def __post_init__(self):
        self.feature_widths = tuple(int(w) for w in self.feature_widths)
        self.adapt_layers = tuple(self.adapt_layers)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.lam < 0 or self.gamma < 0:
            raise ConfigError("lam and gamma must be non-negative")
        if self.total_steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("need total_steps >= 0, batch_size >= 1, eval_interval >= 1")
        if self.bottleneck < 1 or any(w < 1 for w in self.feature_widths):
            raise ConfigError("layer widths must be positive")
        if not self.adapt_layers or set(self.adapt_layers) - {"fcb", "fcc"}:
            raise ConfigError("adapt_layers must be a non-empty subset of {fcb, fcc}")
        if self.estimator not in ("quadratic", "linear"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.sketch_dim < 0:
            raise ConfigError("sketch_dim must be >= 0 (0 disables sketching)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        try:
            self.kernel()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def flags(self) -> Variant:
        v = self.variant
        return Variant(use_mmd=v != "source_only",
                       use_entropy=v in ("mmd_ent", "mmd_ent_res"),
                       use_residual=v == "mmd_ent_res")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.flags().use_mmd else 0.0

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.flags().use_entropy else 0.0

    def kernel(self) -> KernelConfig:
        return KernelConfig(self.fixed_bandwidth, self.bandwidth_policy)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["feature_widths"] = list(self.feature_widths)
        d["adapt_layers"] = list(self.adapt_layers)
        return d


def _coerce(name, raw, current):
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if current and isinstance(current[0], int) or name == "feature_widths":
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def parse_overrides(pairs: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    changes = {}
    for key, raw in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _coerce(key, raw, getattr(base, key))
    return base.replace(**changes)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Read ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    pairs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in text.split("=", 1))
        pairs[key] = value
    return parse_overrides(pairs, base)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
