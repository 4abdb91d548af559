"""Self-supervised objective: span masking, Gumbel-softmax quantization,
negative sampling, projection heads, and the contrastive + diversity loss.

Loss bookkeeping is arranged so that gradient accumulation over
micro-batches is *exactly* equivalent to one fused batch:

* masks depend only on the RNG, so the total masked count is known before
  any forward pass and the contrastive mean can be formed as per-sequence
  sums scaled by ``1 / total_count``;
* the diversity term (default scope "batch") averages the soft codebook
  probabilities over every masked position of the step *before* the
  entropy; the probability subgraphs stay alive across micro-batches and
  the pooled penalty is backpropagated once at the end, so chunking does
  not change the result. "sequence" and "position" scopes move the
  expectation inside and are linear over sequences/positions;
* every sequence consumes its own RNG stream derived from
  (seed, step, index-in-batch), so chunking the batch cannot change any
  random draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from . import tensor as tt
from . import init
from .context import FrameSequence
from .errors import ConfigError, DataError, DivergenceError, ShapeError
from .tensor import Tensor, backward

# -- masking -------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    prob: float = 0.065   # span-start probability per frame
    length: int = 10      # span length, clipped at the sequence end

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError(f"mask probability must be in [0, 1], got {self.prob}")
        if self.length < 1:
            raise ConfigError(f"mask length must be >= 1, got {self.length}")


def sample_mask_indices(t: int, prob: float, length: int, rng) -> np.ndarray:
    """Each frame starts a span of ``length`` with probability ``prob``;
    spans may overlap and are clipped at the end. Returns sorted indices."""
    starts = np.nonzero(rng.random(t) < prob)[0]
    covered = np.zeros(t, dtype=bool)
    for s in starts:
        covered[s:s + length] = True
    return np.nonzero(covered)[0]


def apply_time_mask(z: FrameSequence, prob: float, length: int, m: Tensor, rng):
    """Replace sampled spans with the trainable mask vector ``m``.

    Returns (masked sequence, masked index array). ``m`` must match the
    frame width of ``z``.
    """
    t, d = z.values.shape
    if m.shape != (d,):
        raise ShapeError(f"mask vector shape {m.shape} vs frame width {d}", dim="d")
    idx = sample_mask_indices(t, prob, length, rng)
    return replace_frames(z, idx, m), idx


def replace_frames(z: FrameSequence, idx: np.ndarray, m: Tensor) -> FrameSequence:
    t, d = z.values.shape
    if len(idx) == 0:
        return FrameSequence(z.values, z.frame_rate_hz)
    keep = np.ones(t, dtype=z.values.dtype)
    keep[idx] = 0.0
    hole = np.zeros((t, 1), dtype=z.values.dtype)
    hole[idx] = 1.0
    kept = tt.scale_along(z.values, Tensor(keep), axis=0)
    fill = tt.matmul(Tensor(hole), tt.reshape(m, (1, d)))
    return FrameSequence(tt.add(kept, fill), z.frame_rate_hz)


def sample_negatives(masked_index_set, t: int, k: int, rng) -> np.ndarray:
    """K uniform draws (with replacement) from the pool, excluding ``t``."""
    pool = np.asarray([i for i in masked_index_set if i != t])
    if pool.size == 0:
        raise DataError("no negatives available: pool holds only the target frame")
    return pool[rng.integers(0, pool.size, size=k)]


# -- quantizer -------------------------------------------------------------------


@dataclass(frozen=True)
class QuantizerSpec:
    groups: int = 2
    entries: int = 320
    temp_init: float = 2.0
    temp_min: float = 0.5
    temp_decay: float = 0.999995

    def temp_at_step(self, step: int) -> float:
        return max(self.temp_min, self.temp_init * self.temp_decay ** step)


class Quantizer:
    """Codebook assignment by Gumbel softmax with a straight-through forward.

    Per group g the soft assignment is softmax(W^g z / tau); evaluation
    picks the argmax entry, training adds Gumbel noise before the argmax
    and routes gradients through the soft probabilities. Selected
    codewords concatenate back to the input width.
    """

    def __init__(self, spec: QuantizerSpec, dim_in: int, rng, dtype=np.float32):
        if dim_in % spec.groups != 0:
            raise ConfigError(f"feature dim {dim_in} not divisible by {spec.groups} groups")
        self.spec = spec
        self.dim_in = dim_in
        self.codeword_dim = dim_in // spec.groups
        # the assignment projection needs unit-scale init: near-zero logits
        # would make early assignments pure Gumbel noise, i.e. untrainable
        # targets
        self.weight = Tensor(rng.normal(0.0, 1.0, size=(dim_in, spec.groups * spec.entries))
                             .astype(dtype), requires_grad=True)
        self.codebook = init.trunc_normal(
            rng, (spec.groups, spec.entries, self.codeword_dim), dtype=dtype)
        self.last_probs: Optional[np.ndarray] = None

    def _lookup(self, sel: Tensor):
        # sel: [n, G, V] selection weights -> [n, G * codeword_dim]
        n = sel.shape[0]
        g = self.spec.groups
        per_group = tt.transpose(sel, (1, 0, 2))  # [G, n, V]
        words = tt.matmul(per_group, self.codebook)  # [G, n, dg]
        return tt.reshape(tt.transpose(words, (1, 0, 2)), (n, g * self.codeword_dim))

    def quantize(self, z: Tensor, tau: float, train: bool, rng=None):
        """Returns (q [n, d], soft probabilities [n, G, V], hard indices [n, G])."""
        if tau <= 0:
            raise ConfigError(f"quantizer temperature must be > 0, got {tau}")
        n = z.shape[0]
        g, v = self.spec.groups, self.spec.entries
        logits = tt.reshape(tt.scale(tt.matmul(z, self.weight), 1.0 / tau), (n, g, v))
        if not np.isfinite(logits.data).all():
            raise DivergenceError("quantizer logits are non-finite")
        probs = tt.softmax(logits, axis=-1)
        self.last_probs = probs.data
        if train:
            # Gumbel-max on the tau-scaled logits samples from `probs`; a
            # shared row shift cancels inside softmax, so noise can be added
            # to the logits directly.
            u = rng.random((n, g, v)) * (1.0 - 1e-7) + 1e-10
            gumbel = -np.log(-np.log(u)).astype(logits.data.dtype)
            noisy = tt.add(logits, Tensor(gumbel))
            y_soft = tt.softmax(noisy, axis=-1)
            hard_idx = np.argmax(y_soft.data, axis=-1)
            onehot = _onehot(hard_idx, v, y_soft.data.dtype)
            # straight-through: forward value is the hard one-hot, gradient
            # is that of the soft path
            sel = tt.add(Tensor(onehot - y_soft.data), y_soft)
        else:
            hard_idx = np.argmax(probs.data, axis=-1)
            sel = Tensor(_onehot(hard_idx, v, probs.data.dtype))
        return self._lookup(sel), probs, hard_idx

    def named_params(self, prefix="quantizer."):
        return [(prefix + "weight", self.weight), (prefix + "codebook", self.codebook)]


def _onehot(idx, v, dtype):
    out = np.zeros(idx.shape + (v,), dtype=dtype)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


# -- projection heads ------------------------------------------------------------


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "linear"      # "linear" | "mlp"
    layers: int = 1           # number of affine maps
    hidden: int = 4096
    batch_norm: bool = False
    out_dim: int = 256

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.kind == "linear" and self.layers != 1:
            raise ConfigError("a linear head has exactly one layer")
        if self.kind == "mlp" and self.layers not in (2, 3):
            raise ConfigError(f"mlp heads support 2 or 3 layers, got {self.layers}")


class ProjectionHead:
    """Linear head, or an MLP with ReLU between affines and BatchNorm after
    each affine when ``batch_norm`` is set."""

    def __init__(self, cfg: HeadConfig, dim_in: int, rng, dtype=np.float32):
        self.cfg = cfg
        dims = [dim_in] + [cfg.hidden] * (cfg.layers - 1) + [cfg.out_dim]
        self.weights = []
        self.biases = []
        self.bn = []
        for i in range(cfg.layers):
            self.weights.append(init.trunc_normal(rng, (dims[i], dims[i + 1]), dtype=dtype))
            self.biases.append(init.zeros((dims[i + 1],), dtype=dtype))
            if cfg.batch_norm:
                self.bn.append({
                    "gamma": init.ones((dims[i + 1],), dtype=dtype),
                    "beta": init.zeros((dims[i + 1],), dtype=dtype),
                    "stats": {"mean": np.zeros(dims[i + 1], dtype=np.float64),
                              "var": np.ones(dims[i + 1], dtype=np.float64),
                              "count": 0},
                })
            else:
                self.bn.append(None)

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        h = x
        for i in range(self.cfg.layers):
            h = tt.add_bias(tt.matmul(h, self.weights[i]), self.biases[i])
            if self.bn[i] is not None:
                b = self.bn[i]
                h = tt.batch_norm(h, b["gamma"], b["beta"],
                                  running_stats=b["stats"], train=train)
            if i < self.cfg.layers - 1:
                h = tt.relu(h)
        return h

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def named_params(self, prefix="head."):
        out = []
        for i in range(self.cfg.layers):
            out.append((f"{prefix}w{i}", self.weights[i]))
            out.append((f"{prefix}b{i}", self.biases[i]))
            if self.bn[i] is not None:
                out.append((f"{prefix}bn{i}_g", self.bn[i]["gamma"]))
                out.append((f"{prefix}bn{i}_b", self.bn[i]["beta"]))
        return out


def project_head(x: Tensor, head: ProjectionHead, train: bool = True) -> Tensor:
    return head.forward(x, train=train)


# -- losses ----------------------------------------------------------------------


def _unit_rows(x: Tensor) -> Tensor:
    sq = tt.tsum(tt.mul(x, x), axis=1)
    if np.any(sq.data <= 0.0):
        raise DataError("cosine similarity undefined for a zero-norm vector")
    return tt.scale_along(x, tt.reciprocal(tt.sqrt(sq)), axis=0)


def contrastive_loss_rows(c_proj: Tensor, q_pos: Tensor, q_negs: Tensor,
                          temperature: float) -> Tensor:
    """Per-position InfoNCE terms: [n] tensor of -log softmax(sim/kappa).

    ``q_negs`` is [n, K, d]; similarities are cosine, so each loss row is
    invariant to positive rescaling of any input vector.
    """
    if temperature <= 0:
        raise ConfigError(f"contrastive temperature must be > 0, got {temperature}")
    n, k, d = q_negs.shape
    c_hat = _unit_rows(c_proj)
    p_hat = _unit_rows(q_pos)
    n_hat = _unit_rows(tt.reshape(q_negs, (n * k, d)))
    pos_sim = tt.reshape(tt.tsum(tt.mul(c_hat, p_hat), axis=1), (n, 1))
    neg_sim = tt.matmul(tt.reshape(c_hat, (n, 1, d)),
                        tt.transpose(tt.reshape(n_hat, (n, k, d)), (0, 2, 1)))
    logits = tt.scale(tt.concat([pos_sim, tt.reshape(neg_sim, (n, k))], axis=1),
                      1.0 / temperature)
    return tt.sub(tt.logsumexp(logits, axis=1), tt.reshape(logits[:, 0:1], (n,)))


def contrastive_loss(c_proj: Tensor, q_pos: Tensor, q_negs: Tensor,
                     temperature: float) -> Tensor:
    """InfoNCE averaged over masked positions."""
    rows = contrastive_loss_rows(c_proj, q_pos, q_negs, temperature)
    return tt.tmean(rows)


def diversity_loss(probs: Tensor) -> Tensor:
    """1 - (1/(G*V)) * sum_g exp(H(p_g)) for a [G, V] matrix of probabilities.

    Zero for uniform rows, 1 - 1/V for one-hot rows.
    """
    g, v = probs.shape
    if np.any(np.abs(probs.data.sum(axis=-1) - 1.0) > 1e-6):
        raise ShapeError("diversity_loss rows must sum to 1", dim="V")
    ent = tt.neg(tt.tsum(tt.xlogx(probs), axis=1))  # [G]
    return tt.shift(tt.scale(tt.tsum(tt.exp(ent)), -1.0 / (g * v)), 1.0)


# -- the pre-training step --------------------------------------------------------


@dataclass(frozen=True)
class PretrainHyper:
    mask: MaskSpec = MaskSpec()
    num_negatives: int = 100
    contrastive_temp: float = 0.1
    diversity_weight: float = 0.1
    negatives_from: str = "masked"      # "masked" | "all"
    diversity_scope: str = "batch"      # "batch" | "sequence" | "position"
    peak_lr: float = 5e-4
    warmup_steps: int = 32000
    total_steps: int = 400000

    def __post_init__(self):
        if self.negatives_from not in ("masked", "all"):
            raise ConfigError(f"negatives_from must be masked|all, got {self.negatives_from}")
        if self.diversity_scope not in ("sequence", "batch", "position"):
            raise ConfigError(f"unknown diversity_scope {self.diversity_scope!r}")


@dataclass
class StepStats:
    loss: float
    contrastive: float
    diversity: float
    lr: float = 0.0
    codebook_perplexity: float = 0.0
    masked_fraction: float = 0.0


def _sequence_rng(seed: int, step: int, index: int):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(step, index)))


def _plan_masks(batch, model, hyper, seed, step):
    """Draw masks for the whole batch up front (they depend only on RNG),
    so the global masked count is known before any gradient work."""
    plans = []
    for i, wave in enumerate(batch):
        rng = _sequence_rng(seed, step, i)
        t_frames = model.frame_count(len(wave))
        if t_frames < 2:
            raise DataError(f"sequence {i} yields {t_frames} frames; need at least 2")
        idx = sample_mask_indices(t_frames, hyper.mask.prob, hyper.mask.length, rng)
        while len(idx) < 2:  # redraw: the objective needs a positive and a negative pool
            idx = sample_mask_indices(t_frames, hyper.mask.prob, hyper.mask.length, rng)
        plans.append((rng, idx, t_frames))
    return plans


def pretrain_forward_backward(batch, model, hyper: PretrainHyper, *, seed: int,
                              step: int, tau: float, micro_batches: int = 1,
                              compute_grads: bool = True) -> StepStats:
    """Accumulate gradients for one step over ``micro_batches`` chunks.

    Gradients land additively in the parameters' ``grad`` buffers, scaled
    so the result equals a single fused pass over the whole batch.
    """
    if len(batch) < 1:
        raise DataError("pre-training needs at least one waveform")
    plans = _plan_masks(batch, model, hyper, seed, step)
    total_masked = sum(len(idx) for _, idx, _ in plans)
    total_frames = sum(t for _, _, t in plans)
    nseq = len(batch)

    loss_m = 0.0
    loss_d = 0.0
    prob_pool = np.zeros((model.quantizer.spec.groups, model.quantizer.spec.entries))
    batch_probs: List[Tensor] = []

    bounds = np.linspace(0, nseq, micro_batches + 1).astype(int)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        for i in range(lo, hi):
            rng, masked_idx, _ = plans[i]
            z = model.extract(batch[i])
            n = len(masked_idx)

            # quantize the whole target pool once so a position's codeword
            # is identical whether it appears as positive or negative
            if hyper.negatives_from == "masked":
                pool_idx = masked_idx
                pos_rows = np.arange(n)
            else:
                pool_idx = np.arange(z.shape[0])
                pos_rows = masked_idx
            q, pool_probs, _ = model.quantizer.quantize(
                tt.index_select(z, pool_idx, axis=0), tau, train=True, rng=rng)
            probs = pool_probs if hyper.negatives_from == "masked" \
                else tt.index_select(pool_probs, masked_idx, axis=0)

            z_e = model.context.project(z)
            z_masked = replace_frames(
                FrameSequence(z_e, model.frame_rate_hz), masked_idx, model.mask_vec)
            c = model.context.encode(z_masked.values, train=True, rng=rng)

            c_proj = model.head_c.forward(tt.index_select(c, masked_idx, axis=0), train=True)
            q_pool_proj = model.head_q.forward(q, train=True)
            q_proj = q_pool_proj if hyper.negatives_from == "masked" \
                else tt.index_select(q_pool_proj, pos_rows, axis=0)

            pool_pos = {int(t): j for j, t in enumerate(pool_idx)}
            neg_rows = np.empty((n, hyper.num_negatives), dtype=np.intp)
            for j, t_idx in enumerate(masked_idx):
                negs = sample_negatives(pool_idx, int(t_idx), hyper.num_negatives, rng)
                neg_rows[j] = [pool_pos[int(u)] for u in negs]
            negs = tt.reshape(
                tt.index_select(q_pool_proj, neg_rows.reshape(-1), axis=0),
                (n, hyper.num_negatives, q_proj.shape[1]))

            rows = contrastive_loss_rows(c_proj, q_proj, negs, hyper.contrastive_temp)
            seq_m = tt.tsum(rows)

            if hyper.diversity_scope == "position":
                acc = diversity_loss(probs[0])
                for j in range(1, n):
                    acc = tt.add(acc, diversity_loss(probs[j]))
                seq_d = tt.scale(acc, 1.0 / total_masked)
            elif hyper.diversity_scope == "sequence":
                seq_d = tt.scale(diversity_loss(tt.tmean(probs, axis=0)), 1.0 / nseq)
            else:  # batch scope: pooled across the step, applied after the loop
                seq_d = None
                batch_probs.append(probs)

            seq_loss = tt.scale(seq_m, 1.0 / total_masked)
            if seq_d is not None:
                seq_loss = tt.add(seq_loss, tt.scale(seq_d, hyper.diversity_weight))
                loss_d += float(seq_d.data)
            if not np.isfinite(seq_loss.data).all():
                raise DivergenceError(f"non-finite loss on sequence {i}")
            if compute_grads:
                backward(seq_loss)

            loss_m += float(seq_m.data) / total_masked
            prob_pool += probs.data.sum(axis=0)

    if hyper.diversity_scope == "batch":
        pooled = tt.tmean(tt.concat(batch_probs, axis=0), axis=0)
        d_term = diversity_loss(pooled)
        if not np.isfinite(d_term.data).all():
            raise DivergenceError("non-finite diversity loss")
        if compute_grads:
            backward(tt.scale(d_term, hyper.diversity_weight))
        loss_d = float(d_term.data)

    prob_pool /= max(total_masked, 1)
    perplexity = float(np.mean(np.exp(-np.sum(
        np.where(prob_pool > 0, prob_pool * np.log(prob_pool), 0.0), axis=-1))))
    return StepStats(
        loss=loss_m + hyper.diversity_weight * loss_d,
        contrastive=loss_m,
        diversity=loss_d,
        codebook_perplexity=perplexity,
        masked_fraction=total_masked / total_frames,
    )


def pretrain_step(batch, model, opt, hyper: PretrainHyper, *, step: int,
                  seed: int, micro_batches: int = 1) -> StepStats:
    """One full update: forward/backward with accumulation, then Adam."""
    from .optim import lr_at_step

    opt.zero_grad()
    tau = model.quantizer.spec.temp_at_step(step)
    stats = pretrain_forward_backward(batch, model, hyper, seed=seed, step=step,
                                      tau=tau, micro_batches=micro_batches)
    lr = lr_at_step("poly_warmup", step, hyper.total_steps, hyper.peak_lr,
                    warmup=hyper.warmup_steps)
    opt.step(lr)
    stats.lr = lr
    return stats
