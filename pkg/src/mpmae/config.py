"""Experiment configuration: one JSON file with gen / pretrain / eval / report sections.

Each section maps onto a library config dataclass plus a few
command-level fields. Unknown keys anywhere are rejected. The resolved
config and a version string are written into every output directory.
"""

from __future__ import annotations

import json
import os
import subprocess
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from . import __version__
from .errors import ConfigError, MPMAEError
from .evaluation.probe import ProbeConfig
from .evaluation.sweep import DEFAULT_FRACTIONS
from .pretrain import PretrainConfig
from .synthgen.world import WorldConfig

SEED_ENV = "MPMAE_SEED"
RESOLVED_NAME = "resolved_config.json"
VERSION_NAME = "VERSION"


def _check_keys(section: str, data: dict, allowed: set[str]) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


@dataclass
class GenSection:
    world: dict = field(default_factory=dict)  # WorldConfig fields except seed
    downstream_train: int = 1000
    downstream_val: int = 200
    downstream_test: int = 500
    downstream_seed_offset: int = 1000  # held-out world seed = seed + offset

    def world_config(self, seed: int) -> WorldConfig:
        return WorldConfig(seed=seed, **self.world)


@dataclass
class PretrainSection:
    params: dict = field(default_factory=dict)  # PretrainConfig fields except seed
    run_name: str | None = None

    def pretrain_config(self, seed: int) -> PretrainConfig:
        return PretrainConfig(seed=seed, **self.params)


EVAL_MODES = ("lp", "ft", "ft-seg")


@dataclass
class EvalSection:
    params: dict = field(default_factory=dict)  # ProbeConfig fields except seed and mode
    mode: str = "lp"
    checkpoints: list[str] = field(default_factory=list)
    tasks: list[str] = field(default_factory=lambda: ["scene"])
    sweep: bool = False
    fractions: list[float] = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    seeds: list[int] = field(default_factory=lambda: [0])
    jobs: int = 1

    def __post_init__(self):
        if self.mode not in EVAL_MODES:
            raise ConfigError(f"eval mode must be one of {EVAL_MODES}, got {self.mode!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def probe_config(self, seed: int) -> ProbeConfig:
        mode = "lp" if self.mode == "lp" else "ft"
        return ProbeConfig(mode=mode, seed=seed, **self.params)


@dataclass
class ReportSection:
    reconstruction_checkpoint: str | None = None
    reconstruction_examples: int = 4
    sweep_task: str = "scene"


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    config_path: str | None = None
    gen: GenSection = field(default_factory=GenSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    report: ReportSection = field(default_factory=ReportSection)

    # conventional locations under output_dir
    @property
    def root(self) -> Path:
        return Path(self.output_dir)

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def downstream_dir(self) -> Path:
        return self.root / "downstream"

    @property
    def results_dir(self) -> Path:
        return self.root / "eval"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    def pretrain_dir(self) -> Path:
        cfg = self.pretrain.pretrain_config(self.seed)
        name = self.pretrain.run_name or f"{cfg.tasks}-{cfg.loss_mode}-seed{self.seed}"
        return self.root / "pretrain" / name

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        """Build every library config once so bad values fail before any work."""
        try:
            self.gen.world_config(self.seed)
            self.pretrain.pretrain_config(self.seed)
            self.eval.probe_config(self.seed)
        except MPMAEError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self


_SECTION_RULES = {
    "gen": (GenSection, _names(WorldConfig) - {"seed"}),
    "pretrain": (PretrainSection, _names(PretrainConfig) - {"seed"}),
    "eval": (EvalSection, _names(ProbeConfig) - {"seed", "mode"}),
    "report": (ReportSection, set()),
}


def _section(name: str, data: dict) -> Any:
    cls, lib_keys = _SECTION_RULES[name]
    own = _names(cls) - {"world", "params"}
    if not isinstance(data, dict):
        raise ConfigError(f"section [{name}] must be an object")
    _check_keys(name, data, own | lib_keys)
    kwargs = {k: v for k, v in data.items() if k in own}
    lib = {k: v for k, v in data.items() if k in lib_keys}
    if lib:
        kwargs["world" if name == "gen" else "params"] = lib
    return cls(**kwargs)


def config_from_dict(data: dict, path: str | None = None) -> ExperimentConfig:
    _check_keys("top level", data, {"seed", "output_dir", *_SECTION_RULES})
    kw = {k: data[k] for k in ("seed", "output_dir") if k in data}
    for name in _SECTION_RULES:
        kw[name] = _section(name, data.get(name, {}))
    return ExperimentConfig(config_path=path, **kw)


def load_config(path: str | os.PathLike | None = None, env: dict | None = None) -> ExperimentConfig:
    """Read a JSON config (or defaults) and apply the seed environment override."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = config_from_dict(data, None if path is None else str(path))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "") != "":
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    return cfg


def apply_overrides(cfg: ExperimentConfig, section: str, **values) -> None:
    """Set non-None override values on a section, routing library fields to its dict."""
    sec = getattr(cfg, section)
    own = _names(type(sec))
    lib_keys = _SECTION_RULES[section][1]
    store = sec.world if section == "gen" else getattr(sec, "params", None)
    for k, v in values.items():
        if v is None:
            continue
        if k in own:
            setattr(sec, k, v)
        elif k in lib_keys:
            store[k] = v
        else:
            raise ConfigError(f"unknown override {k!r} for [{section}]")
    if section == "eval":
        sec.__post_init__()


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_provenance(directory: str | os.PathLike, cfg: ExperimentConfig, command: str) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "version": version_string(), "config": cfg.to_dict()}
    (d / RESOLVED_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True, default=list))
    (d / VERSION_NAME).write_text(payload["version"] + "\n")
