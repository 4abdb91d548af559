"""Analytic parameter accounting and frame-rate tracing for model configs.

``param_count`` counts *deployed* parameters: the wave feature extractor,
feature projection, positional convolution, Transformer stack (with the
shared relative-position table where present), and the upsample layer.
The quantizer, the mask embedding, and both projection heads exist only
during pre-training, are discarded before fine-tuning, and are reported
separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

from .context import POS_CONV_GROUPS
from .registry import ModelConfig
from .wfe import flops_report, receptive_field


@dataclass
class ParamCount:
    by_part: Dict[str, int] = field(default_factory=dict)
    pretraining_only: Dict[str, int] = field(default_factory=dict)

    @property
    def wfe(self) -> int:
        return self.by_part["wfe"]

    @property
    def total(self) -> int:
        return sum(self.by_part.values())

    def to_dict(self):
        return {
            "by_part": dict(self.by_part),
            "total": self.total,
            "pretraining_only": dict(self.pretraining_only),
            "pretraining_total": self.total + sum(self.pretraining_only.values()),
        }


def _affine(din, dout):
    return din * dout + dout


def param_count(config: ModelConfig) -> ParamCount:
    ctx = config.context
    e = ctx.width
    d_feat = config.wfe.output_dim
    out = ParamCount()

    out.by_part["wfe"] = flops_report(config.wfe, 400).total_params
    out.by_part["feature_projection"] = 2 * d_feat + _affine(d_feat, e)
    out.by_part["positional_conv"] = e * (e // POS_CONV_GROUPS) * ctx.conv_kernel + e
    out.by_part["encoder_norm"] = 2 * e

    per_layer = 4 * _affine(e, e) + _affine(e, ctx.ffn_dim) + _affine(ctx.ffn_dim, e) + 4 * e
    out.by_part["transformer"] = ctx.depth * per_layer
    if ctx.attention == "disentangled":
        out.by_part["relative_position"] = (2 * ctx.max_rel_offset + 1) * e + 2 * _affine(e, e)
    if ctx.squeeze > 1 and ctx.upsample:
        out.by_part["upsample"] = _affine(e, ctx.squeeze * e)

    q = config.quantizer
    out.pretraining_only["quantizer"] = d_feat * q.groups * q.entries \
        + q.groups * q.entries * (d_feat // q.groups)
    out.pretraining_only["mask_embedding"] = e
    out.pretraining_only["head_c"] = _head_params(config, e)
    out.pretraining_only["head_q"] = _head_params(config, d_feat)
    return out


def _head_params(config: ModelConfig, din: int) -> int:
    h = config.head
    dims = [din] + [h.hidden] * (h.layers - 1) + [h.out_dim]
    total = sum(_affine(a, b) for a, b in zip(dims, dims[1:]))
    if h.batch_norm:
        total += sum(2 * d for d in dims[1:])
    return total


def rate_trace(config: ModelConfig) -> Dict[str, float]:
    """Frames-per-second at each pipeline stage, input samples included."""
    _, stride = receptive_field(config.wfe)
    wfe_hz = config.sample_rate / stride
    encode_hz = wfe_hz / config.context.squeeze
    output_hz = encode_hz * (config.context.squeeze
                             if config.context.squeeze == 1 or config.context.upsample else 1)
    return {
        "input_hz": float(config.sample_rate),
        "wfe_hz": wfe_hz,
        "encode_hz": encode_hz,
        "output_hz": output_hz,
    }
