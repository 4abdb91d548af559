"""Wave feature extractors and their analytic profiler.

Three extractor families map raw 16 kHz waveforms to 50 Hz frame vectors
through a stack of strided 1-d convolutions with a total stride of 320 and
a receptive field of 400 samples:

* family "O": seven layers, constant channel count, instance norm after
  the first convolution only;
* family "O'": same layout but layer norm after every convolution and no
  instance norm;
* family "C": compact variant that doubles the channel count every time
  the sequence length has dropped by 4x, progression
  (c, 2c, 2c, 4c, 4c, 8c, 8c). With ``l=1`` a pointwise (kernel 1)
  convolution follows each strided convolution except the first, giving 13
  layers; each pointwise layer keeps the channel count of the strided
  layer before it. Family "C" follows the family-"O" norm convention.

The first kernel is 10: the (400, 320) receptive-field/stride pair and the
``(T_input - 80) / 320`` output-length rule both depend on it. Convolutions
carry no bias (the affine of the following norm absorbs it); deployed
parameter counts rely on this.

The profiler reports conv multiply-accumulates per layer; bias, norm, and
activation element counts are itemized separately and never folded into
the MAC column. Absolute FLOPs conventions differ between counting tools,
so consumers should compare ratios and per-layer shares, which are stable.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import init
from . import tensor as tt
from .errors import ConfigError, ShapeError
from .tensor import Tensor

STRIDED_KERNELS = (10, 3, 3, 3, 3, 2, 2)
STRIDED_STRIDES = (5, 2, 2, 2, 2, 2, 2)
CHANNEL_MULTIPLIERS = (1, 2, 2, 4, 4, 8, 8)  # family C

FAMILIES = ("O", "O'", "C")


@dataclass(frozen=True)
class ConvLayerSpec:
    channels: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class WfeSpec:
    """Declarative description of one extractor; layers derive from the family."""

    family: str
    channels: int  # the base channel count c
    extra_depth: int = 0  # l: intermediate pointwise layers (family C only)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown WFE family {self.family!r}; expected one of {FAMILIES}")
        if self.channels < 1:
            raise ConfigError(f"WFE base channels must be >= 1, got {self.channels}")
        if self.family == "C":
            if self.extra_depth not in (0, 1):
                raise ConfigError(f"family C requires l in {{0, 1}}, got {self.extra_depth}")
        elif self.extra_depth != 0:
            raise ConfigError(f"family {self.family} does not take intermediate layers")

    @property
    def name(self) -> str:
        if self.family == "C":
            return f"WFE-C-c{self.channels}-l{self.extra_depth}"
        return f"WFE-{self.family}-c{self.channels}"

    @property
    def output_dim(self) -> int:
        return self.layers()[-1].channels

    def layers(self) -> List[ConvLayerSpec]:
        if self.family in ("O", "O'"):
            chans = [self.channels] * 7
        else:
            chans = [self.channels * m for m in CHANNEL_MULTIPLIERS]
        out = []
        for i, (c, k, s) in enumerate(zip(chans, STRIDED_KERNELS, STRIDED_STRIDES)):
            out.append(ConvLayerSpec(c, k, s))
            if self.family == "C" and self.extra_depth == 1 and i > 0:
                out.append(ConvLayerSpec(c, 1, 1))
        return out


def receptive_field(spec: WfeSpec):
    """(receptive field in samples, total stride) by backward composition."""
    rf, stride = 1, 1
    for layer in reversed(spec.layers()):
        rf = (rf - 1) * layer.stride + layer.kernel
        stride *= layer.stride
    return rf, stride


def wfe_output_length(spec: WfeSpec, t_input: int) -> int:
    """Exact output frame count: per-layer floor((T - k)/s) + 1 composed."""
    rf, _ = receptive_field(spec)
    if t_input < rf:
        raise ShapeError(
            f"input shorter than receptive field ({t_input} < {rf} samples)", dim="T")
    t = t_input
    for layer in spec.layers():
        t = (t - layer.kernel) // layer.stride + 1
    return t


@dataclass
class FlopsRow:
    layer: int
    channels: int
    kernel: int
    stride: int
    out_length: int
    macs: int
    params: int
    norm_elems: int = 0
    act_elems: int = 0
    bias_adds: int = 0


@dataclass
class FlopsReport:
    """Per-layer conv MAC and parameter accounting for one extractor."""

    spec_name: str
    t_input: int
    batch: int
    convention: str  # "MAC" or "2MAC"
    rows: List[FlopsRow] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def max_layer_share(self) -> float:
        total = self.total_macs
        return max(r.macs for r in self.rows) / total if total else 0.0

    def layer_share(self, i: int) -> float:
        total = self.total_macs
        return self.rows[i].macs / total if total else 0.0

    def to_dict(self):
        return {
            "spec": self.spec_name,
            "t_input": self.t_input,
            "batch": self.batch,
            "convention": self.convention,
            "rows": [vars(r) for r in self.rows],
            "totals": {
                "macs": self.total_macs,
                "params": self.total_params,
                "norm_elems": sum(r.norm_elems for r in self.rows),
                "act_elems": sum(r.act_elems for r in self.rows),
                "bias_adds": sum(r.bias_adds for r in self.rows),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    CSV_COLUMNS = ("layer", "channels", "kernel", "stride", "out_length", "macs", "params")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([getattr(r, c) for c in self.CSV_COLUMNS])
        return buf.getvalue()


def flops_report(spec: WfeSpec, t_input: int, batch: int = 1,
                 convention: str = "MAC") -> FlopsReport:
    """Analytic conv-MAC accounting; pure function of its arguments."""
    if convention not in ("MAC", "2MAC"):
        raise ConfigError(f"unknown FLOPs convention {convention!r}")
    factor = 2 if convention == "2MAC" else 1
    report = FlopsReport(spec.name, t_input, batch, convention)
    t = t_input
    cin = 1
    norm_layers = _norm_plan(spec)
    for i, layer in enumerate(spec.layers()):
        t = (t - layer.kernel) // layer.stride + 1
        if t < 1:
            raise ShapeError(f"input too short at layer {i}", dim="T")
        macs = t * layer.channels * layer.kernel * cin * batch * factor
        params = layer.channels * cin * layer.kernel
        has_norm = norm_layers[i]
        report.rows.append(FlopsRow(
            layer=i,
            channels=layer.channels,
            kernel=layer.kernel,
            stride=layer.stride,
            out_length=t,
            macs=macs,
            params=params + (2 * layer.channels if has_norm else 0),
            norm_elems=t * layer.channels * batch if has_norm else 0,
            act_elems=t * layer.channels * batch,
            bias_adds=0,
        ))
        cin = layer.channels
    return report


def _norm_plan(spec: WfeSpec):
    n = len(spec.layers())
    if spec.family == "O'":
        return [True] * n
    return [i == 0 for i in range(n)]  # instance norm after first conv only


class WaveFeatureExtractor:
    """Conv stack with GELU after each layer and the family's norm plan."""

    def __init__(self, spec: WfeSpec, rng, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self.weights: List[Tensor] = []
        self.norms: List[Optional[dict]] = []
        norm_layers = _norm_plan(spec)
        cin = 1
        for i, layer in enumerate(spec.layers()):
            fan_in = cin * layer.kernel
            self.weights.append(init.kaiming_uniform(
                rng, (layer.channels, cin, layer.kernel), fan_in, dtype=dtype))
            if norm_layers[i]:
                kind = "layer" if spec.family == "O'" else "instance"
                self.norms.append({
                    "kind": kind,
                    "gamma": init.ones((layer.channels,), dtype=dtype),
                    "beta": init.zeros((layer.channels,), dtype=dtype),
                })
            else:
                self.norms.append(None)
            cin = layer.channels

    @property
    def output_dim(self):
        return self.spec.output_dim

    def forward(self, x: Tensor) -> Tensor:
        """[B, 1, T_samples] -> [B, d_feat, T_frames]."""
        if x.ndim != 3 or x.shape[1] != 1:
            raise ShapeError(f"WFE input must be [B, 1, T], got {x.shape}", dim="Cin")
        h = x
        for layer_spec, w, norm in zip(self.spec.layers(), self.weights, self.norms):
            h = tt.conv1d(h, w, stride=layer_spec.stride)
            if norm is not None:
                if norm["kind"] == "instance":
                    h = tt.instance_norm(h, norm["gamma"], norm["beta"])
                else:
                    # layer norm over channels per position: [B, C, T] -> [B, T, C]
                    ht = tt.transpose(h, (0, 2, 1))
                    ht = tt.layer_norm(ht, norm["gamma"], norm["beta"])
                    h = tt.transpose(ht, (0, 2, 1))
            h = tt.gelu(h)
        return h

    def named_params(self, prefix="wfe."):
        out = []
        for i, (w, norm) in enumerate(zip(self.weights, self.norms)):
            out.append((f"{prefix}conv{i}.w", w))
            if norm is not None:
                out.append((f"{prefix}conv{i}.norm_g", norm["gamma"]))
                out.append((f"{prefix}conv{i}.norm_b", norm["beta"]))
        return out


def build_wfe(spec: WfeSpec, rng, dtype=np.float32) -> WaveFeatureExtractor:
    return WaveFeatureExtractor(spec, rng, dtype=dtype)
