"""Experiment configuration: one YAML file drives the whole pipeline.

All randomness flows from the single top-level ``seed``; each phase derives
its own labeled stream from it.  Parse errors name the offending field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .certify import CertifyConfig
from .ftcadis import FinetuneConfig
from .net import LoraConfig, MlpSpec
from .world import DiffusionSchedule, MixtureSpec

CONFIG_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid or missing configuration; the message names the field."""


class MissingArtifactError(FileNotFoundError):
    """A required input file from an earlier pipeline stage is absent."""


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 256
    n_test: int = 200

    def __post_init__(self) -> None:
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError(f"split sizes must be >= 1, got {self.n_train}/{self.n_test}")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 32


@dataclass(frozen=True)
class ScheduleConfig:
    t_max: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> DiffusionSchedule:
        return DiffusionSchedule.linear(self.t_max, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class AblateConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ("ours", "no_selection", "no_mask", "hard_label_max",
                                 "soft_label_avg", "hard_label_avg", "frozen_selection",
                                 "ce_baseline")


@dataclass
class ExperimentConfig:
    world: MixtureSpec
    net: MlpSpec
    data: DataConfig
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    certify: CertifyConfig
    schedule: ScheduleConfig
    ablate: AblateConfig
    seed: int
    output_dir: Path
    lora: LoraConfig | None = None
    certify_checkpoint: str | None = None   # defaults to the current finetune label
    certify_label: str | None = None


def _section(raw: dict, key: str, required: bool = True) -> dict:
    value = raw.get(key)
    if value is None:
        if required:
            raise ConfigError(f"{key}: section is required")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{key}: expected a mapping, got {type(value).__name__}")
    return value


def _build(path: str, ctor, kwargs: dict):
    try:
        return ctor(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    version = raw.get("format_version")
    if version != CONFIG_FORMAT_VERSION:
        raise ConfigError(f"format_version: expected {CONFIG_FORMAT_VERSION}, got {version!r}")

    world_raw = _section(raw, "world")
    try:
        world = MixtureSpec.from_dict(world_raw)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"world: {exc}") from exc

    net_raw = _section(raw, "net")
    spec = _build("net", MlpSpec, {"layer_dims": tuple(net_raw.get("layer_dims", ())),
                                   "activation": net_raw.get("activation", "relu")})

    lora_raw = raw.get("lora")
    lora = None
    if lora_raw is not None:
        if not isinstance(lora_raw, dict):
            raise ConfigError("lora: expected a mapping or null")
        lora = _build("lora", LoraConfig, lora_raw)

    data = _build("data", DataConfig, _section(raw, "data", required=False))
    pre = _build("pretrain", PretrainConfig, _section(raw, "pretrain", required=False))
    schedule = _build("schedule", ScheduleConfig, _section(raw, "schedule", required=False))
    ablate = _section(raw, "ablate", required=False)
    ablate_cfg = _build("ablate", AblateConfig, {
        k: tuple(v) for k, v in ablate.items()
    } if ablate else {})

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")

    ft_raw = dict(_section(raw, "finetune"))
    eps_schedule = ft_raw.pop("eps_schedule", None)
    if eps_schedule is not None:
        if not isinstance(eps_schedule, dict) or "double_after_epoch" not in eps_schedule:
            raise ConfigError("finetune.eps_schedule: expected {double_after_epoch: int}")
        ft_raw["eps_double_after_epoch"] = int(eps_schedule["double_after_epoch"])
    ft_raw.setdefault("seed", seed)
    finetune = _build("finetune", FinetuneConfig, ft_raw)

    cert_raw = dict(_section(raw, "certify"))
    cert_checkpoint = cert_raw.pop("checkpoint", None)
    cert_label = cert_raw.pop("label", None)
    if "radius_grid" in cert_raw:
        cert_raw["radius_grid"] = tuple(cert_raw["radius_grid"])
    cert_raw.setdefault("sigma", finetune.sigma)
    cert = _build("certify", CertifyConfig, cert_raw)

    output_dir = raw.get("output_dir")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError(f"output_dir: expected a non-empty path string, got {output_dir!r}")

    return ExperimentConfig(world=world, net=spec, data=data, pretrain=pre,
                            finetune=finetune, certify=cert, schedule=schedule,
                            ablate=ablate_cfg, seed=seed, output_dir=Path(output_dir),
                            lora=lora, certify_checkpoint=cert_checkpoint,
                            certify_label=cert_label)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply dotted ``key=value`` overrides; values parse as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, text = item.partition("=")
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = {}
                node[part] = nxt
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r}: {part} is not a mapping")
            node = nxt
        try:
            node[parts[-1]] = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {key!r}: unparsable value {text!r}") from exc
    return raw


def load_config(path: str | Path, overrides: list[str] | None = None,
                out: str | None = None, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if overrides:
        raw = apply_overrides(raw, overrides)
    if out is not None:
        raw["output_dir"] = out
    if seed is not None:
        if not isinstance(raw.get("finetune"), dict):
            raw["finetune"] = raw.get("finetune") or {}
        raw["seed"] = seed
        raw["finetune"]["seed"] = seed
    return parse_config(raw)


def method_label(cfg: FinetuneConfig) -> str:
    """Deterministic report label for a fine-tuning configuration."""
    no_adv = cfg.adv_variant == "none" or cfg.lambda_adv == 0.0
    if not cfg.sce_selection and no_adv:
        return "ce_baseline"
    parts = ["ftcadis"]
    if not cfg.sce_selection:
        parts.append("no_selection")
    if not cfg.madv_mask:
        parts.append("no_mask")
    if no_adv:
        parts.append("sce_only")
    elif cfg.adv_variant != "ours":
        parts.append(cfg.adv_variant)
    if not cfg.update_selection:
        parts.append("frozen_selection")
    return "_".join(parts)


def benchmark_world_dict(dim: int = 8) -> dict:
    """The benchmark mixture: one well-separated mode pair plus one close
    "trapped" pair with unequal mode priors (class priors stay equal).

    The trapped minority mode hallucinates heavily into the trapped majority
    mode under noise-and-denoise at sigma 0.5 (overall flip rate ~0.22),
    which is what separates selective training from plain cross-entropy.
    """
    coords = [(0, +1.5, 0, 0.2), (1, +0.2, 0, 0.3), (0, -1.5, 1, 0.3), (1, -0.2, 1, 0.2)]
    modes = []
    for axis, value, label, prior in coords:
        mean = [0.0] * dim
        mean[axis] = value
        modes.append({"mean": mean, "label": label, "prior": prior})
    return {"tau": 0.25, "modes": modes}


def example_config_dict() -> dict:
    """The benchmark configuration; also exercised by the test suite."""
    return {
        "format_version": CONFIG_FORMAT_VERSION,
        "seed": 0,
        "output_dir": "runs/demo",
        "world": benchmark_world_dict(),
        "net": {"layer_dims": [8, 128, 128, 128, 2], "activation": "relu"},
        "lora": None,
        "schedule": {"t_max": 1000, "beta_start": 1.0e-4, "beta_end": 0.02},
        "data": {"n_train": 256, "n_test": 200},
        "pretrain": {"epochs": 30, "lr": 1.0e-3, "weight_decay": 0.0, "batch_size": 32},
        "finetune": {
            "sigma": 0.5, "m_copies": 4, "lambda_adv": 2.0, "epsilon": 0.25,
            "t_steps": 4, "epochs": 12, "lr": 1.5e-4, "weight_decay": 0.0,
            "batch_size": 32, "cold_start": True, "update_selection": True,
            "adv_variant": "ours", "eps_schedule": None,
        },
        "certify": {"sigma": 0.5, "n0": 100, "n": 1000, "alpha": 0.001,
                    "radius_grid": [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5]},
        "ablate": {"seeds": [0, 1, 2]},
    }
