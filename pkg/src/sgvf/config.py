"""Run configuration: flat ``section.key=value`` text with dataclass sections."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .score import NoiseSchedule, ScoreTrainConfig
from .tangent import DEEP, SHALLOW, TangentTrainConfig

# per-module seed offsets from the global seed
SEED_OFFSETS = {"data": 0, "score": 1, "tangent": 2, "sim": 3, "diagnostics": 4}


@dataclass
class DataSection:
    scenario: str = "concentric"
    n_per_branch: int = 512
    jitter_sigma: float = 0.01
    circumradius: float = 1.5


@dataclass
class ScheduleSection:
    sigma_min: float = 0.1
    sigma_max: float = 0.3


@dataclass
class ScoreSection:
    iterations: int = 10000
    batch_size: int = 512
    lr: float = 1e-3
    layer_sizes: list = field(default_factory=lambda: [3, 64, 64, 64, 64, 2])
    ema_decay: float = 0.999


@dataclass
class TangentSection:
    iterations: int = 10000
    batch_size: int = 512
    lr: float = 1e-3
    k_neighbors: int = 5
    neighbor_sigma: float = 0.05
    lambda_unit: float = 1.0
    lambda_orth: float = 1.0
    lambda_dir: float = 1.0
    k_s: float = 0.2
    depth: str = "shallow"


@dataclass
class FieldSection:
    t_eval: float = 1.0


@dataclass
class SimSection:
    method: str = "rk4"
    dt: float = 0.01
    steps: int = 5000
    starts: str = ""  # "x,y;x,y"; empty selects the scenario defaults
    speed_threshold: float = 0.1
    window: int = 100
    corner_radius: float = 0.15
    teleport: str = ""  # "step:x,y;step:x,y"


@dataclass
class DiagnosticsSection:
    n_samples: int = 2000
    stein_samples: int = 100000
    bump_radius: float = 0.5
    scan_resolution: int = 81


@dataclass
class ExportSection:
    resolution: int = 41
    margin: float = 1.0


@dataclass
class AblationSection:
    disable_unit: bool = False
    disable_orth: bool = False
    disable_dir: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = dataclasses.field(default_factory=DataSection)
    schedule: ScheduleSection = dataclasses.field(default_factory=ScheduleSection)
    score: ScoreSection = dataclasses.field(default_factory=ScoreSection)
    tangent: TangentSection = dataclasses.field(default_factory=TangentSection)
    field: FieldSection = dataclasses.field(default_factory=FieldSection)
    sim: SimSection = dataclasses.field(default_factory=SimSection)
    diagnostics: DiagnosticsSection = dataclasses.field(default_factory=DiagnosticsSection)
    export: ExportSection = dataclasses.field(default_factory=ExportSection)
    ablation: AblationSection = dataclasses.field(default_factory=AblationSection)

    def module_seed(self, module) -> int:
        return self.seed + SEED_OFFSETS[module]

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.schedule.sigma_min, self.schedule.sigma_max)

    def score_config(self) -> ScoreTrainConfig:
        s = self.score
        return ScoreTrainConfig(s.iterations, s.batch_size, s.lr, self.module_seed("score"), list(s.layer_sizes),
                                s.ema_decay)

    def tangent_config(self) -> TangentTrainConfig:
        t = self.tangent
        if t.depth not in ("shallow", "deep"):
            raise ConfigError(f"tangent.depth must be shallow or deep, got {t.depth!r}")
        a = self.ablation
        return TangentTrainConfig(
            iterations=t.iterations, batch_size=t.batch_size, lr=t.lr, k_neighbors=t.k_neighbors,
            neighbor_sigma=t.neighbor_sigma,
            lambda_unit=0.0 if a.disable_unit else t.lambda_unit,
            lambda_orth=0.0 if a.disable_orth else t.lambda_orth,
            lambda_dir=0.0 if a.disable_dir else t.lambda_dir,
            k_s=t.k_s, t_eval=self.field.t_eval,
            layer_sizes=list(SHALLOW if t.depth == "shallow" else DEEP),
            seed=self.module_seed("tangent"),
        )

    def digest(self) -> str:
        """Hash of every setting except the output directory."""
        text = "\n".join(ln for ln in dump_config(self).splitlines() if not ln.startswith("out="))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _coerce(raw: str, default, key):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [int(p) for p in raw.strip("[]").replace(" ", "").split(",") if p]
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_value(cfg: RunConfig, key: str, raw: str):
    parts = key.strip().split(".")
    if len(parts) == 1:
        section, name = cfg, parts[0]
    elif len(parts) == 2:
        section = getattr(cfg, parts[0], None)
        name = parts[1]
        if not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown config key {key!r}")
    else:
        raise ConfigError(f"unknown config key {key!r}")
    names = {f.name for f in dataclasses.fields(section)}
    if name not in names or dataclasses.is_dataclass(getattr(section, name)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(section, name, _coerce(raw, getattr(section, name), key))


def parse_config(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        set_value(cfg, key, value)
    return cfg


def load_config(path, overrides=()) -> RunConfig:
    cfg = parse_config(Path(path).read_text()) if path else RunConfig()
    apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: RunConfig, overrides):
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        set_value(cfg, key, value)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for g in dataclasses.fields(value):
                lines.append(f"{f.name}.{g.name}={_format(getattr(value, g.name))}")
        else:
            lines.append(f"{f.name}={_format(value)}")
    return "\n".join(lines) + "\n"
