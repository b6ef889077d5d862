"""Pipeline configuration: dataset profiles, a TOML file, and command-line overrides.

Precedence is flag > file > profile default. Every validation failure is a
``ConfigError`` naming the offending field path, e.g. ``retrieval_k`` or
``fusion.alpha``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .fusion import ALPHA_EVQA, ALPHA_INFOSEEK, FusionConfig
from .gateway import Gateway, GatewayConfig, GatewayMode
from .grpo import GrpoConfig
from .kb import KbBuildConfig
from .refiner import REWARD_DEPTH
from .rerank import BETA1_EVQA, BETA1_INFOSEEK, BETA2_DEFAULT, FusionWeights

PROFILES = {
    "evqa": {"fusion": {"alpha": ALPHA_EVQA}, "weights": {"beta1": BETA1_EVQA, "beta2": BETA2_DEFAULT}},
    "infoseek": {"fusion": {"alpha": ALPHA_INFOSEEK},
                 "weights": {"beta1": BETA1_INFOSEEK, "beta2": BETA2_DEFAULT}},
}

SECTIONS = {
    "fusion": FusionConfig,
    "weights": FusionWeights,
    "kb_build": KbBuildConfig,
    "grpo": GrpoConfig,
    "gateway": GatewayConfig,
}
TOP_LEVEL = {"profile": "evqa", "retrieval_k": 20, "reward_depth": REWARD_DEPTH, "use_refiner": True}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class PipelineConfig:
    profile: str = "evqa"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    weights: FusionWeights = field(default_factory=FusionWeights)
    kb_build: KbBuildConfig = field(default_factory=KbBuildConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    retrieval_k: int = 20
    reward_depth: int = REWARD_DEPTH
    use_refiner: bool = True

    def __post_init__(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError("profile", f"unknown profile {self.profile!r}; expected one of {sorted(PROFILES)}")
        if self.retrieval_k < 1:
            raise ConfigError("retrieval_k", f"must be >= 1, got {self.retrieval_k}")
        if self.reward_depth < 1:
            raise ConfigError("reward_depth", f"must be >= 1, got {self.reward_depth}")

    def make_gateway(self) -> Gateway:
        return Gateway(self.gateway, text_dim=self.fusion.d_text, image_dim=self.fusion.d_vis)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["kb_build"]["blocklist_titles"] = sorted(self.kb_build.blocklist_titles)
        out["gateway"]["mode"] = self.gateway.mode.value
        return out


def _coerce(path: str, value: Any, default: Any) -> Any:
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
    elif isinstance(default, GatewayMode):
        try:
            return GatewayMode(value)
        except ValueError:
            raise ConfigError(path, f"expected one of {[m.value for m in GatewayMode]}, got {value!r}") from None
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif isinstance(default, frozenset):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            raise ConfigError(path, "expected a list of strings")
        return frozenset(value)
    return value


def _build_section(name: str, values: Mapping) -> Any:
    cls = SECTIONS[name]
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
        kwargs[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except ValueError as exc:
        # sub-config messages start with the field name when one field is at fault
        msg = str(exc)
        culprit = next((k for k in sorted(known, key=len, reverse=True) if msg.startswith(k)), None)
        raise ConfigError(f"{name}.{culprit}" if culprit else name, msg) from None


def _merge(base: dict, extra: Mapping, prefix: str = "") -> None:
    for key, value in extra.items():
        path = f"{prefix}{key}"
        if key in SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(path, "expected a table")
            base.setdefault(key, {}).update(value)
        elif key in TOP_LEVEL:
            base[key] = value
        else:
            raise ConfigError(path, "unknown field")


def read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"invalid TOML in {path}: {exc}") from None


def build_config(file_values: Mapping | None = None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Merge profile defaults, file values, and dotted-key overrides (``"fusion.alpha"``)."""
    file_values = dict(file_values or {})
    nested_overrides: dict = {}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        head, _, tail = dotted.partition(".")
        if tail:
            nested_overrides.setdefault(head, {})[tail] = value
        else:
            nested_overrides[head] = value

    profile = nested_overrides.get("profile", file_values.get("profile", TOP_LEVEL["profile"]))
    if profile not in PROFILES:
        raise ConfigError("profile", f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    merged: dict = {name: dict(values) for name, values in PROFILES[profile].items()}
    _merge(merged, file_values)
    _merge(merged, nested_overrides)

    kwargs = {}
    for key, default in TOP_LEVEL.items():
        if key in merged:
            kwargs[key] = _coerce(key, merged[key], default)
    for name in SECTIONS:
        kwargs[name] = _build_section(name, merged.get(name, {}))
    return PipelineConfig(**kwargs)


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    return build_config(read_toml(path) if path else None, overrides)
