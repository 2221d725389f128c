"""Memristive device presets, weight quantization and bit-slice encoding.

Conductances are expressed in microsiemens throughout; resistances in ohms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Union

import numpy as np


@dataclass(frozen=True)
class Fractional:
    """Read noise whose absolute std is a fraction of the conductance range."""

    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("fractional sigma must be >= 0")


@dataclass(frozen=True)
class AffineMicroSiemens:
    """Read noise std ``a*G + b`` with G and std in microsiemens."""

    a: float
    b: float


ReadNoise = Union[Fractional, AffineMicroSiemens]


@dataclass(frozen=True)
class DeviceSpec:
    name: str
    bits: int
    r_on: float
    on_off_ratio: float
    nu: float
    read_noise: ReadNoise

    def __post_init__(self):
        if self.r_on <= 0:
            raise ValueError(f"{self.name}: r_on must be > 0")
        if self.on_off_ratio <= 1:
            raise ValueError(f"{self.name}: on_off_ratio must be > 1")
        if self.bits < 1:
            raise ValueError(f"{self.name}: bits must be >= 1")
        if self.nu < 0:
            raise ValueError(f"{self.name}: nu must be >= 0")
        rn = self.read_noise
        if isinstance(rn, AffineMicroSiemens):
            if min(rn.a * self.g_min + rn.b, rn.a * self.g_max + rn.b) < 0:
                raise ValueError(f"{self.name}: affine read noise negative inside [G_MIN, G_MAX]")
        elif not isinstance(rn, Fractional):
            raise TypeError(f"{self.name}: unknown read-noise model {rn!r}")

    @property
    def g_max(self) -> float:
        return 1e6 / self.r_on

    @property
    def g_min(self) -> float:
        return self.g_max / self.on_off_ratio

    @property
    def levels(self) -> int:
        return 2 ** self.bits

    @property
    def step(self) -> float:
        """Conductance spacing between adjacent programmable levels (uS)."""
        return (self.g_max - self.g_min) / (self.levels - 1)

    def with_sigma(self, sigma: float) -> "DeviceSpec":
        return replace(self, read_noise=Fractional(sigma))

    def to_dict(self) -> dict:
        rn = self.read_noise
        if isinstance(rn, Fractional):
            noise = {"model": "fractional", "sigma": rn.sigma}
        else:
            noise = {"model": "affine", "a": rn.a, "b": rn.b}
        return {"name": self.name, "bits": self.bits, "r_on": self.r_on,
                "on_off_ratio": self.on_off_ratio, "nu": self.nu, "read_noise": noise}

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceSpec":
        allowed = {"name", "bits", "r_on", "on_off_ratio", "nu", "read_noise"}
        extra = set(d) - allowed
        missing = allowed - set(d)
        if extra or missing:
            raise ValueError(f"device entry: unknown keys {sorted(extra)}, missing keys {sorted(missing)}")
        rn = d["read_noise"]
        model = rn.get("model")
        if model == "fractional":
            noise: ReadNoise = Fractional(float(rn["sigma"]))
        elif model == "affine":
            noise = AffineMicroSiemens(float(rn["a"]), float(rn["b"]))
        else:
            raise ValueError(f"device entry: read_noise.model must be 'fractional' or 'affine', got {model!r}")
        return cls(str(d["name"]), int(d["bits"]), float(d["r_on"]), float(d["on_off_ratio"]),
                   float(d["nu"]), noise)


def builtin_devices() -> list[DeviceSpec]:
    return [
        DeviceSpec("FeFET", 4, 222.22e3, 100.0, 0.1, Fractional(0.05)),
        DeviceSpec("PCM-i", 4, 250e3, 40.0, 0.04, AffineMicroSiemens(0.03, 0.13)),
        DeviceSpec("PCM-ii", 4, 125e3, 80.0, 0.04, AffineMicroSiemens(0.03, 0.13)),
        DeviceSpec("RRAM", 4, 50e3, 10.0, 0.04, Fractional(0.1)),
    ]


def get_device(name: str) -> DeviceSpec:
    for d in builtin_devices():
        if d.name.lower() == name.lower():
            return d
    raise KeyError(f"unknown device {name!r}; built-ins are {[d.name for d in builtin_devices()]}")


def load_devices(path: Union[str, Path]) -> list[DeviceSpec]:
    """Read one device object or a list of them from a JSON file."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [DeviceSpec.from_dict(d) for d in data]


# ---------------------------------------------------------------------------
# quantization and slicing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantSpec:
    weight_bits: int = 8
    slice_bits: int = 4
    act_bits: int = 8

    def __post_init__(self):
        if self.slice_bits < 1 or self.weight_bits < self.slice_bits:
            raise ValueError("need weight_bits >= slice_bits >= 1")
        if self.weight_bits % self.slice_bits:
            raise ValueError("weight_bits must be divisible by slice_bits")

    @property
    def n_slices(self) -> int:
        return self.weight_bits // self.slice_bits

    @property
    def qmax(self) -> int:
        return 2 ** (self.weight_bits - 1) - 1

    @property
    def offset(self) -> int:
        return 2 ** (self.weight_bits - 1)


@dataclass(frozen=True)
class QuantizedLayer:
    levels: np.ndarray
    delta: float

    def dequantize(self) -> np.ndarray:
        return (self.levels * self.delta).astype(np.float32)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_layer(w: np.ndarray, q: QuantSpec = QuantSpec()) -> QuantizedLayer:
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain non-finite values")
    wa = w.astype(np.float64)
    m = float(np.max(np.abs(wa)))
    if m == 0.0:
        return QuantizedLayer(np.zeros(w.shape, dtype=np.int64), 1.0)
    # multiply by qmax/m rather than divide by delta: exact for dyadic inputs
    lv = round_half_away(wa * (q.qmax / m))
    lv = np.clip(lv, -q.offset, q.qmax).astype(np.int64)
    return QuantizedLayer(lv, m / q.qmax)


def encode_levels(levels: np.ndarray, q: QuantSpec = QuantSpec()) -> np.ndarray:
    """Offset-encode signed levels and split them into slices.

    Output has a leading axis of length ``q.n_slices``, most significant
    slice first.
    """
    lv = np.asarray(levels, dtype=np.int64)
    if np.any(lv < -q.offset) or np.any(lv > q.qmax):
        raise ValueError(f"levels outside [{-q.offset}, {q.qmax}]")
    u = lv + q.offset
    base = 2 ** q.slice_bits
    out = np.empty((q.n_slices,) + lv.shape, dtype=np.int64)
    for s in range(q.n_slices - 1, -1, -1):
        out[s] = u % base
        u = u // base
    return out


def decode_levels(slices: np.ndarray, q: QuantSpec = QuantSpec()) -> np.ndarray:
    """Inverse of :func:`encode_levels`; accepts continuous slice values."""
    base = 2 ** q.slice_bits
    u = 0
    for s in range(q.n_slices):
        u = u * base + slices[s]
    return u - q.offset


def encode_slices(level: int, q: QuantSpec = QuantSpec()) -> list[int]:
    return [int(v) for v in encode_levels(np.array(level), q)]


def decode_slices(slices, q: QuantSpec = QuantSpec()) -> int:
    return int(decode_levels(np.asarray(slices, dtype=np.int64), q))


def level_to_conductance(slice_level, d: DeviceSpec):
    lv = np.asarray(slice_level)
    if np.any(lv < 0) or np.any(lv > d.levels - 1):
        raise ValueError(f"slice level outside [0, {d.levels - 1}] for {d.name}")
    g = d.g_min + lv * d.step
    return float(g) if np.ndim(g) == 0 else g


def conductance_to_level(g, d: DeviceSpec):
    """Continuous level for a conductance; values outside the range are not clamped."""
    ga = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(ga)):
        raise ValueError("conductance contains non-finite values")
    lv = (ga - d.g_min) / d.step
    return float(lv) if np.ndim(lv) == 0 else lv


def read_noise_sigma(g, d: DeviceSpec):
    """Absolute read-noise std (uS) at conductance ``g``."""
    rn = d.read_noise
    if isinstance(rn, Fractional):
        s = rn.sigma * (d.g_max - d.g_min)
        return s if np.ndim(g) == 0 else np.full(np.shape(g), s)
    s = np.maximum(rn.a * np.asarray(g, dtype=np.float64) + rn.b, 0.0)
    return float(s) if np.ndim(s) == 0 else s
