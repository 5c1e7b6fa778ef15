"""
Run configuration: documented defaults from run_defaults.json, overridden by
a TOML/JSON file, overridden by command-line flags.
"""
from __future__ import annotations
import copy
import hashlib
import json
import os
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from utils.ddss import SearchConfig
from utils.diffusion import TrainConfig
from utils.errors import ConfigError
from utils.key_resolver import suggest_key

_DEFAULTS_CACHE: Optional[Dict[str, Any]] = None

RESOLVED_NAME = 'resolved_config.json'


def _load_defaults() -> Dict[str, Any]:
    global _DEFAULTS_CACHE
    if _DEFAULTS_CACHE is not None:
        return _DEFAULTS_CACHE
    path = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'run_defaults.json')
    with open(path, 'r', encoding='utf-8') as f:
        _DEFAULTS_CACHE = json.load(f)
    return _DEFAULTS_CACHE


def defaults() -> Dict[str, Any]:
    return copy.deepcopy(_load_defaults())


@dataclass
class DataConfig:
    kind: str
    n_train: int
    n_val: int
    n_eval: int
    radius: float
    std: float
    n_modes: int


@dataclass
class ScheduleConfig:
    kind: str
    T: int
    beta_min: float
    beta_max: float
    logsnr_max: float
    logsnr_min: float


@dataclass
class ModelConfig:
    hidden: int
    depth: int
    time_dim: int


@dataclass
class SamplingConfig:
    sampler: str
    K: int
    stride: str
    eta: float
    n: int
    trajectory: bool


@dataclass
class EvalConfig:
    samplers: List[str]
    Ks: List[int]
    seeds: List[int]
    n_eval: int
    radius: float
    features: str


@dataclass
class PlotConfig:
    samplers: List[str]
    Ks: List[int]
    n: int


@dataclass
class RunConfig:
    seed: int
    out: str
    data: DataConfig
    schedule: ScheduleConfig
    model: ModelConfig
    train: TrainConfig
    search: SearchConfig
    sampling: SamplingConfig
    eval: EvalConfig
    plot: PlotConfig
    source: Optional[str] = field(default=None, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        raw = asdict(self)
        raw.pop('source')
        raw['search'].pop('seed')
        return raw

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canon.encode('utf-8')).hexdigest()[:16]

    def write_resolved(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, RESOLVED_NAME)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write('\n')
        return path


def read_config_file(path: str) -> Dict[str, Any]:
    ext = os.path.splitext(path)[1].lower()
    try:
        if ext == '.toml':
            with open(path, 'rb') as f:
                return tomllib.load(f)
        if ext == '.json':
            with open(path, 'r', encoding='utf-8') as f:
                return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    raise ConfigError(f"config must be .toml or .json, got '{path}'")


def _check_type(field_name: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{field_name} must be true or false, got {value!r}", field=field_name)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{field_name} must be an integer, got {value!r}", field=field_name)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{field_name} must be a number, got {value!r}", field=field_name)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{field_name} must be a string, got {value!r}", field=field_name)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{field_name} must be a list, got {value!r}", field=field_name)
        if default:
            return [_check_type(f"{field_name}[{i}]", default[0], v) for i, v in enumerate(value)]
        return value
    return value


def merge(base: Dict[str, Any], update: Dict[str, Any], prefix: str = '') -> Dict[str, Any]:
    """Overlay `update` onto `base`, rejecting keys `base` does not know."""
    for key, value in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            close = suggest_key(key, base.keys())
            raise ConfigError(f"unknown config key '{name}'", field=name,
                              suggestion=f"{prefix}{close}" if close else None)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{name}' must be a table", field=name)
            merge(base[key], value, prefix=f"{name}.")
        else:
            base[key] = _check_type(name, base[key], value)
    return base


def _dotted(overrides: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        node = nested
        parts = key.split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


def _build(section: str, cls, values: Dict[str, Any], **extra):
    try:
        return cls(**values, **extra)
    except ValueError as e:
        raise ConfigError(f"[{section}] {e}", field=section) from None


def build_run_config(raw: Dict[str, Any], source: Optional[str] = None) -> RunConfig:
    cfg = RunConfig(
        seed=raw['seed'],
        out=raw['out'],
        data=_build('data', DataConfig, raw['data']),
        schedule=_build('schedule', ScheduleConfig, raw['schedule']),
        model=_build('model', ModelConfig, raw['model']),
        train=_build('train', TrainConfig, raw['train']),
        search=_build('search', SearchConfig, raw['search'], seed=raw['seed']),
        sampling=_build('sampling', SamplingConfig, raw['sampling']),
        eval=_build('eval', EvalConfig, raw['eval']),
        plot=_build('plot', PlotConfig, raw['plot']),
        source=source,
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    from utils.datasets import DATASETS
    from utils.samplers import STRIDES

    if cfg.data.kind not in DATASETS:
        raise ConfigError(f"unknown dataset kind '{cfg.data.kind}'", field='data.kind',
                          suggestion=suggest_key(cfg.data.kind, DATASETS))
    if cfg.schedule.kind not in ('linear', 'cosine'):
        raise ConfigError(f"unknown schedule kind '{cfg.schedule.kind}'", field='schedule.kind')
    if cfg.data.n_train < 2 or cfg.data.n_val < 2 or cfg.data.n_eval < 2:
        raise ConfigError("data.n_train, data.n_val and data.n_eval must be at least 2", field='data')
    if cfg.model.time_dim % 2:
        raise ConfigError(f"model.time_dim must be even, got {cfg.model.time_dim}", field='model.time_dim')
    for name, stride in (('search.stride', cfg.search.stride), ('sampling.stride', cfg.sampling.stride)):
        if stride not in STRIDES:
            raise ConfigError(f"unknown stride '{stride}'", field=name, suggestion=suggest_key(stride, STRIDES))
    for K in [cfg.search.K, cfg.sampling.K, *cfg.eval.Ks, *cfg.plot.Ks]:
        if not 1 <= K <= cfg.schedule.T:
            raise ConfigError(f"K={K} must lie in [1, T={cfg.schedule.T}]", field='K')
    if not 0.0 <= cfg.sampling.eta <= 1.0:
        raise ConfigError(f"sampling.eta must lie in [0, 1], got {cfg.sampling.eta}", field='sampling.eta')


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults <- file <- dotted overrides such as {'search.K': 10}."""
    raw = defaults()
    if path:
        merge(raw, read_config_file(path))
    if overrides:
        merge(raw, _dotted(overrides))
    return build_run_config(raw, source=path)
