"""JSON experiment configuration (unknown keys are rejected)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import device as dev
from .data import SyntheticDatasetSpec
from .tensor import NetworkSpec, smallconv_spec
from .tune import AdaptConfig, FinetuneConfig
from .xbar import NoiseConfig, XbarConfig


class ConfigError(ValueError):
    """Configuration rejected before any computation."""


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticCfg(Strict):
    classes: int = Field(4, ge=2)
    train_per_class: int = Field(2000, ge=1)
    test_per_class: int = Field(400, ge=1)
    image_shape: tuple[int, int, int] = (1, 16, 16)
    noise: float = Field(2.0, ge=0)
    seed: int = 0

    def build(self) -> SyntheticDatasetSpec:
        return SyntheticDatasetSpec(**self.model_dump())


class DatasetCfg(Strict):
    synthetic: Optional[SyntheticCfg] = None
    path: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.synthetic is None) == (self.path is None):
            raise ValueError("dataset needs exactly one of 'synthetic' or 'path'")
        return self


class DeviceCfg(Strict):
    file: str
    name: Optional[str] = None


class QuantCfg(Strict):
    weight_bits: int = Field(8, ge=1)
    slice_bits: int = Field(4, ge=1)
    act_bits: int = Field(8, ge=1)


class XbarCfg(Strict):
    rows: int = Field(64, ge=1)
    cols: int = Field(64, ge=1)
    rdriver: float = Field(1000.0, ge=0)
    rwire_row: float = Field(5.0, ge=0)
    rwire_col: float = Field(10.0, ge=0)
    rsense: float = Field(1000.0, ge=0)


class NoiseCfg(Strict):
    read_noise: Optional[bool] = None  # None: on when drift is on, otherwise off
    drift_t: Optional[float] = Field(None, gt=0)
    drift_t0: float = Field(1.0, gt=0)
    parasitics: bool = False
    clamp_nonneg: bool = False

    @model_validator(mode="after")
    def _drift_order(self):
        if self.drift_t is not None and self.drift_t < self.drift_t0:
            raise ValueError("noise.drift_t must be >= noise.drift_t0")
        return self


class SweepCfg(Strict):
    sigma: Optional[list[float]] = None
    T: Optional[list[float]] = None

    @model_validator(mode="after")
    def _one_axis(self):
        if (self.sigma is None) == (self.T is None):
            raise ValueError("sweep needs exactly one of 'sigma' or 'T'")
        vals = self.sigma if self.sigma is not None else self.T
        if not vals:
            raise ValueError("sweep values must be nonempty")
        if self.sigma is not None and min(vals) < 0:
            raise ValueError("sweep.sigma values must be >= 0")
        if self.T is not None and min(vals) <= 0:
            raise ValueError("sweep.T values must be > 0")
        return self


class AdaptCfg(Strict):
    num_samples: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(32, ge=1)
    momentum: float = Field(0.1, ge=0, le=1)
    cumulative: bool = False


class FinetuneCfg(Strict):
    epochs: int = Field(5, ge=1)
    lr0: float = Field(0.01, ge=0)
    decay_factor: float = Field(5.0, ge=1)
    decay_every: int = Field(2, ge=1)
    batch_size: int = Field(32, ge=1)
    seed: int = 0
    update_running: bool = True


Mode = Literal["none", "adapt", "finetune"]


class TuningCfg(Strict):
    modes: list[Mode] = ["none"]
    adapt: AdaptCfg = AdaptCfg()
    finetune: FinetuneCfg = FinetuneCfg()

    @field_validator("modes", mode="before")
    @classmethod
    def _listify(cls, v):
        return [v] if isinstance(v, str) else v

    @field_validator("modes")
    @classmethod
    def _unique(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("tuning.modes must be a nonempty list without duplicates")
        return v


class PretrainCfg(Strict):
    epochs: int = Field(8, ge=1)
    lr: float = Field(0.02, gt=0)
    batch_size: int = Field(32, ge=1)
    momentum: float = Field(0.9, ge=0, lt=1)
    seed: int = 0


class ExperimentConfig(Strict):
    network: str = "smallconv"
    dataset: DatasetCfg = DatasetCfg(synthetic=SyntheticCfg())
    checkpoint: Optional[str] = None
    device: Union[str, DeviceCfg] = "FeFET"
    quant: QuantCfg = QuantCfg()
    xbar: XbarCfg = XbarCfg()
    noise: NoiseCfg = NoiseCfg()
    sweep: Optional[SweepCfg] = None
    tuning: TuningCfg = TuningCfg()
    pretrain: PretrainCfg = PretrainCfg()
    seeds: list[int] = [0]
    act_quant: bool = True
    dump: bool = False

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("seeds must be nonempty")
        return v

    # -- builders ----------------------------------------------------------
    def network_spec(self, base: Path) -> NetworkSpec:
        if self.network == "smallconv":
            ds = self.dataset.synthetic
            if ds is not None:
                return smallconv_spec(tuple(ds.image_shape), ds.classes)
            return smallconv_spec()
        return NetworkSpec.from_dict(json.loads(_resolve(base, self.network).read_text()))

    def device_spec(self, base: Path) -> dev.DeviceSpec:
        if isinstance(self.device, str):
            return dev.get_device(self.device)
        devices = dev.load_devices(_resolve(base, self.device.file))
        if self.device.name is None:
            return devices[0]
        for d in devices:
            if d.name == self.device.name:
                return d
        raise ConfigError(f"device '{self.device.name}' not in {self.device.file}")

    def quant_spec(self) -> dev.QuantSpec:
        return dev.QuantSpec(**self.quant.model_dump())

    def xbar_config(self) -> XbarConfig:
        return XbarConfig(**self.xbar.model_dump())

    def noise_config(self, seed: int, drift_t: Optional[float] = None) -> NoiseConfig:
        t = drift_t if drift_t is not None else self.noise.drift_t
        read = self.noise.read_noise if self.noise.read_noise is not None else t is not None
        return NoiseConfig(read_noise=read, drift_t=t, drift_t0=self.noise.drift_t0,
                           parasitics=self.noise.parasitics, seed=seed, clamp_nonneg=self.noise.clamp_nonneg)

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(**self.tuning.adapt.model_dump())

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(**self.tuning.finetune.model_dump())


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_config(path, require_checkpoint: bool = False) -> tuple[ExperimentConfig, Path]:
    """Parse and validate a config file; returns ``(config, base_dir)``.

    Relative paths inside the file resolve against the file's directory.
    Every referenced file must exist, and all derived specs must build.
    """
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {p} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_validation(p, exc)) from None
    base = p.parent
    check_config(cfg, base, require_checkpoint)
    return cfg, base


def check_config(cfg: ExperimentConfig, base: Path, require_checkpoint: bool = False) -> None:
    try:
        cfg.network_spec(base)
        d = cfg.device_spec(base)
        q = cfg.quant_spec()
        cfg.xbar_config()
        cfg.adapt_config()
        cfg.finetune_config()
        cfg.noise_config(cfg.seeds[0])
        if cfg.dataset.synthetic is not None:
            cfg.dataset.synthetic.build()
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if q.slice_bits != d.bits:
        raise ConfigError(f"quant.slice_bits={q.slice_bits} does not match device {d.name} ({d.bits} bits)")
    if cfg.dataset.path is not None:
        root = _resolve(base, cfg.dataset.path)
        for f in ("train_images.tnsr", "train_labels.tnsr", "test_images.tnsr", "test_labels.tnsr"):
            if not (root / f).exists():
                raise ConfigError(f"dataset.path: {root / f} does not exist")
    if require_checkpoint:
        if cfg.checkpoint is None:
            raise ConfigError("checkpoint: required for deploy")
        if not (_resolve(base, cfg.checkpoint) / "manifest.json").exists():
            raise ConfigError(f"checkpoint: no manifest.json under {_resolve(base, cfg.checkpoint)}")
    if cfg.sweep is not None and cfg.sweep.sigma is not None and not isinstance(d.read_noise, dev.Fractional):
        raise ConfigError(f"sweep.sigma needs a fractional read-noise device; {d.name} is affine")
    if cfg.sweep is not None and cfg.sweep.T is not None:
        if min(cfg.sweep.T) < cfg.noise.drift_t0:
            raise ConfigError("sweep.T values must be >= noise.drift_t0")


def _format_validation(path: Path, exc: ValidationError) -> str:
    parts = []
    for e in exc.errors():
        loc = ".".join(str(x) for x in e["loc"])
        parts.append(f"{loc}: {e['msg']}")
    return f"{path}: " + "; ".join(parts)
