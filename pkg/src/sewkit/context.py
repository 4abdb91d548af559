"""Context network: positional convolution, optional squeezing, Transformer
stack, and transposed-conv-equivalent upsampling.

Pipeline for one frame sequence:

1. feature projection: layer norm over the extractor features, then an
   affine map to the model width E (applied even when the widths match);
2. zero-pad the frames to a multiple of the squeeze factor ``s``;
3. positional convolution (kernel ``conv_kernel``, 16 groups, stride ``s``,
   same-padding; even kernels produce one extra frame which is trimmed),
   followed by GELU;
4. average-pool(s) shortcut: the convolution's *input*, pooled with kernel
   and stride ``s``, added to the convolution output. The shortcut is added
   after the GELU and before the Transformer; with the conv weights zeroed
   the Transformer sees exactly the pooled projection;
5. encoder layer norm, then L post-norm Transformer layers (layerdrop is
   decided by the caller-seeded RNG, training only);
6. when squeezing, a position-wise affine map producing ``s`` output frames
   per input frame (exactly a kernel-s/stride-s transposed convolution with
   reshaped weights) restores the input frame rate, and the output is
   trimmed back to the original length.

Frame-rate bookkeeping rides along in :class:`FrameSequence`: the internal
rate is ``input/s``; the output rate equals the input rate when upsampling
is enabled, ``input/s`` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from . import attention as attn
from . import init
from . import tensor as tt
from .errors import ConfigError, ShapeError
from .tensor import Tensor

HEAD_DIM = 64  # head count is width / 64 throughout the registry
POS_CONV_GROUPS = 16


@dataclass
class FrameSequence:
    """A T x d stack of frame vectors tagged with its frames-per-second rate."""

    values: Tensor
    frame_rate_hz: float

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class ContextSpec:
    width: int                 # E
    depth: int                 # L
    conv_kernel: int = 128
    squeeze: int = 1
    attention: str = "standard"  # or "disentangled"
    upsample: bool = True        # restore the input rate after squeezing
    dropout: float = 0.1
    layerdrop: float = 0.05
    max_rel_offset: int = 160    # relative-position window for disentangled attention
    ffn_mult: int = 4

    def __post_init__(self):
        if self.width % HEAD_DIM != 0:
            raise ConfigError(f"context width {self.width} must be divisible by {HEAD_DIM}")
        if self.conv_kernel < 1:
            raise ConfigError(f"positional conv kernel must be >= 1, got {self.conv_kernel}")
        if self.squeeze < 1:
            raise ConfigError(f"squeeze factor must be >= 1, got {self.squeeze}")
        if self.attention not in ("standard", "disentangled"):
            raise ConfigError(f"unknown attention kind {self.attention!r}")

    @property
    def heads(self):
        return self.width // HEAD_DIM

    @property
    def ffn_dim(self):
        return self.ffn_mult * self.width


class ContextNetwork:
    def __init__(self, spec: ContextSpec, d_feat_in: int, rng, dtype=np.float32):
        self.spec = spec
        self.d_feat_in = d_feat_in
        self.dtype = dtype
        self.expected_rate_hz: Optional[float] = None
        e = spec.width

        self.proj_ln_g = init.ones((d_feat_in,), dtype=dtype)
        self.proj_ln_b = init.zeros((d_feat_in,), dtype=dtype)
        self.proj_w = init.trunc_normal(rng, (d_feat_in, e), dtype=dtype)
        self.proj_b = init.zeros((e,), dtype=dtype)

        k = spec.conv_kernel
        fan_in = (e // POS_CONV_GROUPS) * k
        self.pos_conv_w = init.kaiming_uniform(rng, (e, e // POS_CONV_GROUPS, k), fan_in, dtype=dtype)
        self.pos_conv_b = init.zeros((e,), dtype=dtype)

        self.enc_ln_g = init.ones((e,), dtype=dtype)
        self.enc_ln_b = init.zeros((e,), dtype=dtype)

        self.rel = None
        if spec.attention == "disentangled":
            self.rel = attn.init_rel_pos(e, spec.max_rel_offset, rng, dtype=dtype)

        self.layers: List[attn.TransformerLayerParams] = [
            attn.init_transformer_layer(e, spec.heads, spec.ffn_dim, rng,
                                        rel=self.rel, dtype=dtype)
            for _ in range(spec.depth)
        ]

        self.up_w = self.up_b = None
        if spec.squeeze > 1 and spec.upsample:
            self.up_w = init.trunc_normal(rng, (e, spec.squeeze * e), dtype=dtype)
            self.up_b = init.zeros((spec.squeeze * e,), dtype=dtype)

    # -- stages ---------------------------------------------------------------

    def project(self, z: Tensor) -> Tensor:
        """[T, d_feat] -> [T, E]: layer norm then affine."""
        if z.ndim != 2 or z.shape[1] != self.d_feat_in:
            raise ShapeError(f"context projection expects [T, {self.d_feat_in}], got {z.shape}",
                             dim="d_feat")
        h = tt.layer_norm(z, self.proj_ln_g, self.proj_ln_b)
        return tt.add_bias(tt.matmul(h, self.proj_w), self.proj_b)

    def _pad_to_multiple(self, x: Tensor):
        s = self.spec.squeeze
        t = x.shape[0]
        pad = (-t) % s
        if pad:
            zeros = Tensor(np.zeros((pad, x.shape[1]), dtype=x.data.dtype))
            x = tt.concat([x, zeros], axis=0)
        return x, t

    def mix(self, x: Tensor) -> Tensor:
        """Positional conv (strided when squeezing) plus avg-pool shortcut.

        Input [T~, E] with T~ a multiple of the squeeze factor; output
        [T~/s, E], *before* the encoder layer norm.
        """
        s = self.spec.squeeze
        k = self.spec.conv_kernel
        t = x.shape[0]
        e = self.spec.width
        xc = tt.reshape(tt.transpose(x, (1, 0)), (1, e, t))
        conv = tt.conv1d(xc, self.pos_conv_w, self.pos_conv_b,
                         stride=s, padding=k // 2, groups=POS_CONV_GROUPS)
        if k % 2 == 0:
            conv = conv[:, :, :-1]  # same-padding with even kernel overshoots by one
        conv = tt.gelu(conv)
        conv = tt.transpose(tt.reshape(conv, (e, t // s)), (1, 0))
        if s == 1:
            shortcut = x
        else:
            shortcut = tt.tmean(tt.reshape(x, (t // s, s, e)), axis=1)
        return tt.add(conv, shortcut)

    def encode(self, z_e: Tensor, train=False, rng=None) -> Tensor:
        """Run the post-projection pipeline on an [T, E] sequence."""
        if z_e.shape[0] < 1:
            raise ShapeError("context network requires a non-empty sequence", dim="T")
        spec = self.spec
        x, orig_t = self._pad_to_multiple(z_e)
        h = self.mix(x)
        h = tt.layer_norm(h, self.enc_ln_g, self.enc_ln_b)
        for layer in self.layers:
            decision = None
            if train and spec.layerdrop > 0.0:
                decision = bool(rng.random() < spec.layerdrop)
            h = attn.transformer_layer(h, layer, train=train, dropout_p=spec.dropout,
                                       dropout_rng=rng, layerdrop_decision=decision)
        if self.up_w is not None:
            h = upsample(h, spec.squeeze, self.up_w, self.up_b)
            h = h[:orig_t, :]
        return h

    def forward(self, z: Tensor, train=False, rng=None) -> Tensor:
        return self.encode(self.project(z), train=train, rng=rng)

    @property
    def output_rate_factor(self) -> float:
        """Output frames per input frame (1 when upsampling, 1/s otherwise)."""
        if self.spec.squeeze == 1 or self.up_w is not None:
            return 1.0
        return 1.0 / self.spec.squeeze

    def named_params(self, prefix="context."):
        out = [
            (prefix + "proj_ln_g", self.proj_ln_g),
            (prefix + "proj_ln_b", self.proj_ln_b),
            (prefix + "proj_w", self.proj_w),
            (prefix + "proj_b", self.proj_b),
            (prefix + "pos_conv_w", self.pos_conv_w),
            (prefix + "pos_conv_b", self.pos_conv_b),
            (prefix + "enc_ln_g", self.enc_ln_g),
            (prefix + "enc_ln_b", self.enc_ln_b),
        ]
        if self.rel is not None:
            out += self.rel.named_params(prefix + "rel.")
        for i, layer in enumerate(self.layers):
            out += [(n, p) for n, p in layer.named_params(f"{prefix}layer{i}.")
                    if not n.startswith(f"{prefix}layer{i}.rel.")]
        if self.up_w is not None:
            out += [(prefix + "up_w", self.up_w), (prefix + "up_b", self.up_b)]
        return out


def build_context(spec: ContextSpec, d_feat_in: int, rng, dtype=np.float32) -> ContextNetwork:
    return ContextNetwork(spec, d_feat_in, rng, dtype=dtype)


def context_forward(z: FrameSequence, model: ContextNetwork, train=False,
                    rng=None) -> FrameSequence:
    """Map a (possibly masked) frame sequence to contextual representations.

    Output length and frame rate equal the input's when upsampling is
    enabled; eval mode is deterministic.
    """
    if model.expected_rate_hz is not None and z.frame_rate_hz != model.expected_rate_hz:
        raise ShapeError(
            f"frame rate {z.frame_rate_hz} does not match model rate {model.expected_rate_hz}",
            dim="frame_rate")
    out = model.forward(z.values, train=train, rng=rng)
    return FrameSequence(out, z.frame_rate_hz * model.output_rate_factor)


def upsample(x: Tensor, s: int, w: Tensor, b: Tensor) -> Tensor:
    """Position-wise affine producing ``s`` output frames per input frame.

    Exactly equivalent to a kernel-s/stride-s transposed convolution whose
    [E, E, s] weight is reshaped to [E, s*E] via transpose(0, 2, 1).
    """
    t = x.shape[0]
    if w.shape[1] % s != 0:
        raise ShapeError(f"upsample weight columns {w.shape[1]} not divisible by s={s}", dim="s")
    y = tt.add_bias(tt.matmul(x, w), b, axis=-1)
    return tt.reshape(y, (t * s, w.shape[1] // s))


def upsample_frames(x: FrameSequence, s: int, w: Tensor, b: Tensor) -> FrameSequence:
    return FrameSequence(upsample(x.values, s, w, b), x.frame_rate_hz * s)
