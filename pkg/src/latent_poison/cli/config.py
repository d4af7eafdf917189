"""Per-subcommand run configuration.

Config files are INI: one section per subcommand, flat ``key = value`` pairs.
Unknown sections or keys are a hard error. Overrides use ``key=value`` and
apply to the section of the subcommand being run.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..errors import ConfigError


@dataclass
class TrainVaeCfg:
    m: int = 10
    n: int = 10
    beta: float = 4.0
    gumbel_tau: float = 0.67
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    capacity: bool = False
    train_limit: typing.Optional[int] = None
    val_limit: typing.Optional[int] = None


@dataclass
class TrainInferenceCfg:
    architecture: str = "lenet-small"
    epochs: int = 6
    batch_size: int = 64
    lr: float = 1e-3
    label_smoothing: float = 0.1
    train_limit: typing.Optional[int] = None
    test_limit: typing.Optional[int] = None


@dataclass
class TrainRobustCfg:
    architecture: str = "madry-mnist"
    epochs: int = 8
    batch_size: int = 64
    lr: float = 1e-3
    label_smoothing: float = 0.0
    adversarial: bool = True
    pgd_epsilon: float = 0.3
    pgd_steps: int = 7
    eps_warmup_epochs: float = 1.0
    eval_epsilon: float = 0.3
    eval_steps: int = 20
    train_limit: typing.Optional[int] = None
    test_limit: typing.Optional[int] = None


@dataclass
class FitStatsCfg:
    vae: str = "runs/train-vae/model.ckpt"
    sampled: bool = False
    train_limit: typing.Optional[int] = None


@dataclass
class AttackCommon:
    lambda_org: float = 0.0
    lambda_noised: str = "1.0"
    lambda0: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    norm_choice: str = "l2"
    param_budget: int = 12_000
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    target_mode: str = "multilabel"
    linf_temperature: float = 50.0
    eta_bound: typing.Optional[float] = 1.0
    train_limit: typing.Optional[int] = None


@dataclass
class TrainAttackCfg(AttackCommon):
    vae: str = "runs/train-vae/model.ckpt"
    inference: str = "runs/train-inference/model.ckpt"
    stats: str = "runs/fit-stats/stats.json"


@dataclass
class EvaluateCfg:
    vae: str = "runs/train-vae/model.ckpt"
    inference: str = "runs/train-inference/model.ckpt"
    robust: str = "runs/train-robust/model.ckpt"
    stats: str = "runs/fit-stats/stats.json"
    attack: str = "runs/train-attack/attack.ckpt"
    test_limit: typing.Optional[int] = 1000
    batch_size: int = 250
    pgd_epsilon: float = 0.3
    pgd_steps: int = 20
    grid_rows: int = 16
    interp_pairs: int = 4
    interp_steps: int = 11


@dataclass
class BaselinePgdCfg:
    classifier: str = "runs/train-robust/model.ckpt"
    role: str = "robust"  # or "undefended"
    epsilons: str = "0.3"
    steps: int = 20
    random_start: bool = True
    test_limit: typing.Optional[int] = None
    batch_size: int = 500


@dataclass
class AblateCfg(AttackCommon):
    vae: str = "runs/train-vae/model.ckpt"
    inference: str = "runs/train-inference/model.ckpt"
    robust: str = "runs/train-robust/model.ckpt"
    stats: str = "runs/fit-stats/stats.json"
    grid: str = "0.6:0.8,0.5:0.8,0.3:0.8,0.1:0.8,0:1"
    budgets: str = "12000"
    test_limit: typing.Optional[int] = 1000
    eval_batch_size: int = 250


@dataclass
class ReportCfg:
    runs: str = ""


SECTIONS: dict[str, type] = {
    "train-vae": TrainVaeCfg,
    "train-inference": TrainInferenceCfg,
    "train-robust": TrainRobustCfg,
    "fit-stats": FitStatsCfg,
    "train-attack": TrainAttackCfg,
    "evaluate": EvaluateCfg,
    "baseline-pgd": BaselinePgdCfg,
    "ablate": AblateCfg,
    "report": ReportCfg,
}


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.strip().lower() in ("", "none", "null"):
            return None
        return _coerce(raw, args[0], key)
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw.replace("_", ""))
        if tp is float:
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def read_config_file(path: str | Path | None) -> dict[str, dict[str, str]]:
    if path is None:
        return {}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        out[section] = dict(parser[section])
    return out


def resolve(subcommand: str, file_values: dict[str, dict[str, str]], overrides: list[str]):
    """Build the dataclass config for ``subcommand`` from file values then overrides."""
    cls = SECTIONS[subcommand]
    hints = _hints(cls)
    names = {f.name for f in fields(cls)}
    raw = dict(file_values.get(subcommand, {}))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
            if section != subcommand:
                if section not in SECTIONS:
                    raise ConfigError(f"unknown config section {section!r}")
                continue
        raw[key] = value
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) for [{subcommand}]: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in raw.items()}
    return cls(**kwargs)


def as_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
