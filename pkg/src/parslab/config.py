"""Run configuration: ``[section]`` groups of ``key = value`` lines.

Every key has a default, so an empty file is a valid config. Values are
typed by the defaults: booleans are ``true``/``false``, tuples are
comma-separated, and optional values accept ``none``. ``#`` and ``;`` start
comment lines.

Sections::

    [run]         seed, dataset, checkpoint
    [env]         env_id plus optional geometry overrides
    [behavior]    offline data generator
    [pars]        every ParsConfig field
    [finetune]    online phase length and per-phase overrides
    [diagnostics] probe settings
    [didactic]    regression study grid
    [tabular]     certification sweep
    [ablate]      c_reward x {none, ln, pa, ln_pa} grid
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .pars_trainer import ParsConfig
from .toy_envs import BEHAVIOR_KINDS, ENV_IDS


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where = f"key {key!r}"
            if line is not None:
                where += f" (line {line})"
            where += ": "
        super().__init__(where + message)
        self.key = key
        self.line = line


@dataclass
class RunSection:
    seed: int = 0
    # Empty: generate a dataset from [env] and [behavior].
    dataset: str = ""
    # Empty: train offline first (finetune, diagnose).
    checkpoint: str = ""

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass
class EnvSection:
    env_id: str = "point_maze_2d"
    # Geometry overrides; none keeps the environment's built-in value.
    step_scale: Optional[float] = None
    max_episode_steps: Optional[int] = None
    start: Optional[tuple[float, ...]] = None
    start_noise: Optional[float] = None
    goal: Optional[tuple[float, ...]] = None
    goal_radius: Optional[float] = None
    # Wall rectangles "x0,y0,x1,y1;..." and expert waypoints "x,y;...";
    # an empty string means none at all.
    walls: Optional[str] = None
    waypoints: Optional[str] = None

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ValueError(f"env_id must be one of {', '.join(ENV_IDS)}")
        if self.step_scale is not None and not self.step_scale > 0:
            raise ValueError("step_scale must be positive")
        if self.max_episode_steps is not None and self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")
        if self.goal_radius is not None and not self.goal_radius > 0:
            raise ValueError("goal_radius must be positive")
        if self.start_noise is not None and self.start_noise < 0:
            raise ValueError("start_noise must be >= 0")
        if self.walls is not None and any(len(w) != 4 for w in _float_rows(self.walls, "walls")):
            raise ValueError("walls need four numbers each")
        if self.waypoints is not None:
            _float_rows(self.waypoints, "waypoints")

    def overrides(self) -> dict:
        out = {}
        for k in ("step_scale", "max_episode_steps", "start", "start_noise", "goal", "goal_radius"):
            v = getattr(self, k)
            if v is not None:
                out[k] = v
        for k in ("walls", "waypoints"):
            v = getattr(self, k)
            if v is not None:
                out[k] = _float_rows(v, k)
        return out


def _float_rows(text: str, name: str) -> tuple[tuple[float, ...], ...]:
    """Parse ``"a,b;c,d"`` into ``((a, b), (c, d))``; the empty string gives ``()``."""
    if not text.strip():
        return ()
    try:
        rows = tuple(tuple(float(t) for t in part.split(",")) for part in text.split(";"))
    except ValueError:
        raise ValueError(f"{name} must look like '0.1,0.2;0.3,0.4'") from None
    if len({len(r) for r in rows}) != 1:
        raise ValueError(f"{name} rows must all have the same length")
    return rows


@dataclass
class BehaviorSection:
    kind: str = "clustered_noisy_expert"
    # Cluster centers as "x0,x1;y0,y1"; none keeps the environment's default.
    centers: Optional[str] = None
    noise: Optional[float] = None
    episodes: Optional[int] = None
    expert_prob: Optional[float] = None
    random_prob: float = 0.3

    def __post_init__(self):
        if self.kind not in BEHAVIOR_KINDS:
            raise ValueError(f"kind must be one of {', '.join(BEHAVIOR_KINDS)}")
        if self.noise is not None and self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.episodes is not None and self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        for k in ("expert_prob", "random_prob"):
            v = getattr(self, k)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{k} must lie in [0, 1]")
        if self.centers is not None:
            self.parsed_centers()

    def parsed_centers(self) -> tuple[tuple[float, ...], ...]:
        rows = _float_rows(self.centers, "centers")
        if not rows:
            raise ValueError("centers must not be empty")
        return rows

    def overrides(self) -> dict:
        out = {"kind": self.kind, "random_prob": self.random_prob}
        for k in ("noise", "episodes", "expert_prob"):
            v = getattr(self, k)
            if v is not None:
                out[k] = v
        if self.centers is not None:
            out["centers"] = self.parsed_centers()
        return out


@dataclass
class FinetuneSection:
    online_steps: int = 2000
    # none: keep the [pars] value.
    alpha: Optional[float] = None
    beta: Optional[float] = None
    utd_ratio: Optional[int] = None

    def __post_init__(self):
        if self.online_steps < 1:
            raise ValueError("online_steps must be >= 1")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.utd_ratio is not None and self.utd_ratio < 1:
            raise ValueError("utd_ratio must be >= 1")


@dataclass
class DiagnosticsSection:
    dormant_threshold: float = 0.0
    ntk_resolution: int = 41
    sarsa_steps: int = 3000
    maxq_steps: int = 1000
    probe_gamma: float = 0.9
    probe_c_reward: float = 1000.0
    probe_alpha: float = 0.1
    probe_guard_multiplier: float = 100.0
    probe_hidden_dims: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.dormant_threshold < 0:
            raise ValueError("dormant_threshold must be >= 0")
        if self.ntk_resolution < 2:
            raise ValueError("ntk_resolution must be >= 2")
        if self.sarsa_steps < 1 or self.maxq_steps < 1:
            raise ValueError("sarsa_steps and maxq_steps must be >= 1")
        if not 0.0 < self.probe_gamma < 1.0:
            raise ValueError("probe_gamma must lie in (0, 1)")
        if not self.probe_c_reward > 0:
            raise ValueError("probe_c_reward must be positive")


@dataclass
class DidacticSection:
    kind: str = "cone"
    c_rewards: tuple[float, ...] = (1.0, 100.0)
    use_ln: bool = True
    pa_alpha: float = 0.0
    activations: tuple[str, ...] = ("relu",)
    hidden_dims: tuple[int, ...] = (256, 256)
    steps: int = 2000
    n_seeds: int = 1
    grid_resolution: int = 41
    extent: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cone", "two_cone"):
            raise ValueError("kind must be 'cone' or 'two_cone'")
        if not self.c_rewards or min(self.c_rewards) <= 0:
            raise ValueError("c_rewards must be positive")
        if self.steps < 1 or self.n_seeds < 1:
            raise ValueError("steps and n_seeds must be >= 1")
        if self.grid_resolution < 2:
            raise ValueError("grid_resolution must be >= 2")


@dataclass
class TabularSection:
    n_instances: int = 100
    trials: int = 100
    n_states: int = 6
    n_actions: int = 7
    support_density: float = 0.4
    gamma: float = 0.9
    k: int = 3
    tol: float = 1e-10

    def __post_init__(self):
        if self.n_instances < 1 or self.trials < 1:
            raise ValueError("n_instances and trials must be >= 1")
        if self.n_states < 2 or self.n_actions < 2:
            raise ValueError("n_states and n_actions must be >= 2")
        if not 0.0 < self.support_density <= 1.0:
            raise ValueError("support_density must lie in (0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


ABLATION_VARIANTS = ("none", "ln", "pa", "ln_pa")


@dataclass
class AblateSection:
    env_id: str = "line_walk_1d"
    c_rewards: tuple[float, ...] = (1.0, 10.0, 100.0, 1000.0)
    variants: tuple[str, ...] = ABLATION_VARIANTS
    alpha: float = 0.01
    max_gradient_steps: int = 2000
    hidden_dims: tuple[int, ...] = (64, 64)
    eval_episodes: int = 5

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ValueError(f"env_id must be one of {', '.join(ENV_IDS)}")
        bad = [v for v in self.variants if v not in ABLATION_VARIANTS]
        if bad or not self.variants:
            raise ValueError(f"variants must be drawn from {', '.join(ABLATION_VARIANTS)}")
        if not self.c_rewards or min(self.c_rewards) <= 0:
            raise ValueError("c_rewards must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.max_gradient_steps < 1 or self.eval_episodes < 1:
            raise ValueError("max_gradient_steps and eval_episodes must be >= 1")


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "env": EnvSection,
    "behavior": BehaviorSection,
    "pars": ParsConfig,
    "finetune": FinetuneSection,
    "diagnostics": DiagnosticsSection,
    "didactic": DidacticSection,
    "tabular": TabularSection,
    "ablate": AblateSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvSection = field(default_factory=EnvSection)
    behavior: BehaviorSection = field(default_factory=BehaviorSection)
    pars: ParsConfig = field(default_factory=ParsConfig)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    didactic: DidacticSection = field(default_factory=DidacticSection)
    tabular: TabularSection = field(default_factory=TabularSection)
    ablate: AblateSection = field(default_factory=AblateSection)


# ---------------------------------------------------------------------------
# Value conversion


def _unwrap_optional(tp):
    args = typing.get_args(tp)
    if typing.get_origin(tp) is typing.Union and type(None) in args:
        return next(a for a in args if a is not type(None)), True
    return tp, False


def _convert(raw: str, tp):
    base, optional = _unwrap_optional(tp)
    text = raw.strip()
    if optional and text.lower() == "none":
        return None
    if typing.get_origin(base) is tuple:
        item = typing.get_args(base)[0]
        if text == "":
            return ()
        return tuple(_convert(t, item) for t in text.split(","))
    if base is bool:
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected true or false, got {text!r}")
    if base is int:
        return int(text)
    if base is float:
        return float(text)
    if base is str:
        return text
    raise TypeError(f"unsupported config type {base!r}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Line number of each ``(section, key)`` for error messages."""
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            lines.setdefault((section, ""), no)
        elif "=" in s and section is not None:
            lines.setdefault((section, s.split("=", 1)[0].strip()), no)
    return lines


# ---------------------------------------------------------------------------
# Public API


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=None, interpolation=None
    )
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"malformed config: {exc.message.splitlines()[0]}", line=line) from None
    lines = _key_lines(text)
    built = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]", key=sec, line=lines.get((sec, "")))
    for name, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        names = [f.name for f in fields(cls)]
        kwargs = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                line = lines.get((name, key))
                if key not in names:
                    raise ConfigError(f"unknown key in [{name}]", key=key, line=line)
                try:
                    kwargs[key] = _convert(raw, hints[key])
                except ValueError as exc:
                    raise ConfigError(f"type mismatch: {exc}", key=key, line=line) from None
        try:
            built[name] = cls(**kwargs)
        except ValueError as exc:
            msg = str(exc)
            culprit = next((k for k in sorted(kwargs, key=len, reverse=True) if k in msg), None)
            raise ConfigError(
                f"constraint violated: {msg}", key=culprit or name, line=lines.get((name, culprit or ""))
            ) from None
    return RunConfig(**built)


def parse_config(path) -> RunConfig:
    """Read and validate a config file; an unreadable file raises ``OSError``."""
    return parse_config_text(Path(path).read_text())


def serialize_config(cfg: RunConfig) -> str:
    """Every key of every section, in declaration order."""
    out = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in fields(sec):
            out.append(f"{f.name} = {_format(getattr(sec, f.name))}")
        out.append("")
    return "\n".join(out)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, seed=seed))
