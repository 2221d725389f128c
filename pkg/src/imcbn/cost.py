"""Training memory/energy estimate for BN-only tuning versus full retraining.

Accounting per training sample (batch size 1 unless stated):

* memory: weight gradients + stored activations + activation gradients +
  BN parameter gradients; BN-only tuning drops the weight gradients.
* energy: forward MACs + backward MACs (activation-gradient and
  weight-gradient halves) + device reprogramming writes; BN-only tuning
  drops the weight-gradient MACs and all writes.

Activation counts cover the outputs of conv, BN and fc layers (ReLU and
pooling are treated as fused, in-place operations).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .tensor import NetworkSpec, _out_extent


@dataclass(frozen=True)
class LayerCount:
    name: str
    kind: str
    weights: int = 0
    acts: int = 0
    bn_params: int = 0
    macs: int = 0


@dataclass
class ArchSummary:
    name: str
    input_shape: tuple
    layers: list = field(default_factory=list)
    batch_size: int = 1

    @property
    def weight_params(self) -> int:
        return sum(layer.weights for layer in self.layers)

    @property
    def act_elems(self) -> int:
        return sum(layer.acts for layer in self.layers) * self.batch_size

    @property
    def bn_params(self) -> int:
        return sum(layer.bn_params for layer in self.layers)

    @property
    def macs(self) -> int:
        return sum(layer.macs for layer in self.layers) * self.batch_size


def summarize(spec: NetworkSpec | dict, name: str = "net", batch_size: int = 1) -> ArchSummary:
    """Count parameters, activations and MACs layer by layer.

    Accepts a :class:`NetworkSpec` or a plain dict with ``layers`` and
    ``input_shape``; the dict form additionally understands residual
    ``{"type": "basic_block", "out": C, "stride": s}`` entries.
    """
    if isinstance(spec, NetworkSpec):
        layers, shape = spec.layers, spec.input_shape
    else:
        layers, shape = spec["layers"], tuple(spec["input_shape"])
    c, h, w = shape
    out = []
    counts: dict[str, int] = {}

    def tag(kind):
        counts[kind] = counts.get(kind, 0) + 1
        return f"{kind}{counts[kind]}"

    def conv(cin, cout, k, s, p, h, w):
        ho, wo = _out_extent(h, k, s, p), _out_extent(w, k, s, p)
        nw = cout * cin * k * k
        out.append(LayerCount(tag("conv"), "conv", nw, cout * ho * wo, 0, nw * ho * wo))
        return ho, wo

    def bn(ch, h, w):
        out.append(LayerCount(tag("bn"), "bn", 0, ch * h * w, 2 * ch, 0))

    for layer in layers:
        t = layer["type"]
        if t == "conv":
            h, w = conv(c, layer["out"], layer.get("k", 3), layer.get("stride", 1), layer.get("pad", 0), h, w)
            c = layer["out"]
        elif t == "bn":
            bn(c, h, w)
        elif t == "basic_block":
            cout, s = layer["out"], layer.get("stride", 1)
            h1, w1 = conv(c, cout, 3, s, 1, h, w)
            bn(cout, h1, w1)
            conv(cout, cout, 3, 1, 1, h1, w1)
            bn(cout, h1, w1)
            if s != 1 or c != cout:
                conv(c, cout, 1, s, 0, h, w)
                bn(cout, h1, w1)
            c, h, w = cout, h1, w1
        elif t in ("maxpool", "avgpool"):
            k = layer.get("k", 2)
            s = layer.get("stride", k)
            h, w = _out_extent(h, k, s, 0), _out_extent(w, k, s, 0)
        elif t == "global_avgpool":
            h = w = 1
        elif t == "fc":
            fan_in = c * h * w
            nw = layer["out"] * fan_in + layer["out"]
            out.append(LayerCount(tag("fc"), "fc", nw, layer["out"], 0, layer["out"] * fan_in))
            c, h, w = layer["out"], 1, 1
        elif t == "relu":
            pass
        else:
            raise ValueError(f"unknown layer type {t!r}")
    return ArchSummary(name, tuple(shape), out, batch_size)


def vgg16_cifar10() -> dict:
    layers = []
    for v in [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]:
        if v == "M":
            layers.append({"type": "maxpool", "k": 2})
        else:
            layers += [{"type": "conv", "out": v, "k": 3, "stride": 1, "pad": 1}, {"type": "bn"}, {"type": "relu"}]
    layers.append({"type": "fc", "out": 10})
    return {"layers": layers, "input_shape": [3, 32, 32], "classes": 10}


def resnet18_tinyimagenet() -> dict:
    """ResNet-18 with a 3x3 stride-1 stem (no stem max-pool) on 64x64 inputs."""
    layers = [{"type": "conv", "out": 64, "k": 3, "stride": 1, "pad": 1}, {"type": "bn"}, {"type": "relu"}]
    for cout, stride in [(64, 1), (128, 2), (256, 2), (512, 2)]:
        layers.append({"type": "basic_block", "out": cout, "stride": stride})
        layers.append({"type": "basic_block", "out": cout, "stride": 1})
    layers += [{"type": "global_avgpool"}, {"type": "fc", "out": 200}]
    return {"layers": layers, "input_shape": [3, 64, 64], "classes": 200}


ARCHS = {"vgg16": (vgg16_cifar10, "VGG16/CIFAR10"), "resnet18": (resnet18_tinyimagenet, "ResNet-18/TinyImagenet")}


def arch_summary(name: str, batch_size: int = 1) -> ArchSummary:
    try:
        build, label = ARCHS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown architecture {name!r}; choose from {sorted(ARCHS)}") from None
    return summarize(build(), label, batch_size)


@dataclass(frozen=True)
class CostModelParams:
    """Byte widths and energy constants.

    The energy defaults are order-of-magnitude placeholders (pJ-scale MACs and
    device writes), not measured values; supply real numbers for
    quantitative energy claims.
    """

    bytes_per_weight_grad: float = 1.0
    bytes_per_act: float = 1.0
    bytes_per_act_grad: float = 1.0
    bytes_per_bn_grad: float = 1.0
    e_write: Optional[float] = 2.0e-12
    e_mac_fwd: Optional[float] = 1.0e-12
    e_mac_bwd: Optional[float] = 1.0e-12
    devices_per_weight: int = 2
    wgrad_macs_per_mac: float = 1.0  # weight-gradient MACs per forward MAC

    def __post_init__(self):
        vals = [self.bytes_per_weight_grad, self.bytes_per_act, self.bytes_per_act_grad, self.bytes_per_bn_grad,
                self.devices_per_weight, self.wgrad_macs_per_mac] + [v for v in (self.e_write, self.e_mac_fwd, self.e_mac_bwd) if v is not None]
        if min(vals) < 0:
            raise ValueError("cost parameters must be non-negative")


@dataclass(frozen=True)
class CostReport:
    name: str
    baseline_mem_bytes: float
    bnonly_mem_bytes: float
    baseline_energy_j: Optional[float] = None
    bnonly_energy_j: Optional[float] = None

    @property
    def mem_savings_pct(self) -> float:
        return _pct(self.baseline_mem_bytes, self.bnonly_mem_bytes)

    @property
    def energy_savings_pct(self) -> Optional[float]:
        if self.baseline_energy_j is None:
            return None
        return _pct(self.baseline_energy_j, self.bnonly_energy_j)


def _pct(base: float, ours: float) -> float:
    return 0.0 if base == 0 else 100.0 * (1.0 - ours / base)


def memory_savings(arch: ArchSummary, p: CostModelParams = CostModelParams()) -> dict:
    shared = (arch.act_elems * (p.bytes_per_act + p.bytes_per_act_grad)
              + arch.bn_params * p.bytes_per_bn_grad)
    base = arch.weight_params * p.bytes_per_weight_grad + shared
    return {"baseline_mem_bytes": float(base), "bnonly_mem_bytes": float(shared),
            "mem_savings_pct": _pct(base, shared)}


def energy_savings(arch: ArchSummary, p: CostModelParams = CostModelParams(), epochs: int = 1,
                   dataset_size: int = 1) -> dict:
    """Per-run training energy; writes reprogram every weight once per sample update."""
    if p.e_write is None or p.e_mac_fwd is None or p.e_mac_bwd is None:
        raise ValueError("energy_savings needs e_write, e_mac_fwd and e_mac_bwd")
    steps = epochs * dataset_size / arch.batch_size
    fwd = arch.macs * p.e_mac_fwd  # arch.macs already scales with batch size
    bwd_half = arch.macs * p.e_mac_bwd
    writes = arch.weight_params * p.devices_per_weight * p.e_write
    bwd_w = bwd_half * p.wgrad_macs_per_mac
    base = steps * (fwd + bwd_half + bwd_w + writes)
    ours = steps * (fwd + bwd_half)
    return {"baseline_energy_j": float(base), "bnonly_energy_j": float(ours), "energy_savings_pct": _pct(base, ours)}


def cost_report(arch: ArchSummary, p: CostModelParams = CostModelParams(), epochs: int = 1,
                dataset_size: int = 1) -> CostReport:
    mem = memory_savings(arch, p)
    en = energy_savings(arch, p, epochs, dataset_size) if p.e_write is not None else {}
    return CostReport(arch.name, mem["baseline_mem_bytes"], mem["bnonly_mem_bytes"],
                      en.get("baseline_energy_j"), en.get("bnonly_energy_j"))
