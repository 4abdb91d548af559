"""CTC training loss, greedy and exact decoding, WER scoring, and the
fine-tuning step.

The loss is the standard forward recursion over the blank-extended label
lattice, computed in log space on autodiff tensors so the gradient comes
from the same graph as the value. Blank is index 0 throughout.

Greedy ("best path") decoding takes the per-frame argmax (ties break
toward the lowest token index), collapses repeats, then removes blanks.
Exact decoding enumerates every collapsed label sequence and scores each
by its summed path probability; it is intentionally restricted to tiny
instances, since its role is to certify the greedy decoder where the two
can be compared exhaustively.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from itertools import product
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import init
from . import tensor as tt
from .errors import AlignmentError, ConfigError, DataError, DivergenceError
from .optim import lr_at_step
from .tensor import Tensor, backward

BLANK = 0

EXACT_DECODE_MAX_FRAMES = 8
EXACT_DECODE_MAX_VOCAB = 5


def _extended_labels(labels) -> List[int]:
    ext = [BLANK]
    for token in labels:
        ext.append(int(token))
        ext.append(BLANK)
    return ext


def min_frames_for(labels) -> int:
    """Shortest frame count admitting an alignment: repeats need a blank."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _validate(logits_shape, labels):
    t, vocab_plus_1 = logits_shape
    labels = list(int(x) for x in labels)
    for token in labels:
        if not 1 <= token < vocab_plus_1:
            raise DataError(f"label token {token} outside vocabulary [1, {vocab_plus_1 - 1}]",
                            field="label")
    if t < min_frames_for(labels):
        raise AlignmentError(
            f"label of length {len(labels)} needs at least {min_frames_for(labels)} frames, "
            f"got {t}")
    return labels


def ctc_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """-log P(labels | logits) summed over all collapsing paths."""
    labels = _validate(logits.shape, labels)
    t = logits.shape[0]
    ext = _extended_labels(labels)
    s = len(ext)
    logp = tt.log_softmax(logits, axis=1)
    neg_inf = np.asarray(-np.inf, dtype=logp.data.dtype)

    # skip transitions s-2 -> s are allowed only onto a non-blank that
    # differs from the token two lattice slots back
    skip_ok = np.full(s, -np.inf, dtype=logp.data.dtype)
    for i in range(2, s):
        if ext[i] != BLANK and ext[i] != ext[i - 2]:
            skip_ok[i] = 0.0

    start_mask = np.full(s, -np.inf, dtype=logp.data.dtype)
    start_mask[0] = 0.0
    if s > 1:
        start_mask[1] = 0.0

    def emissions(step):
        return tt.index_select(logp[step], np.asarray(ext), axis=0)

    alpha = tt.add(emissions(0), Tensor(start_mask))
    pad1 = Tensor(np.full((1,), neg_inf))
    pad2 = Tensor(np.full((2,), neg_inf))
    for step in range(1, t):
        stay = alpha
        move = tt.concat([pad1, alpha[:-1]], axis=0) if s > 1 else None
        comb = tt.logaddexp(stay, move) if move is not None else stay
        if s > 2:
            skip = tt.add(tt.concat([pad2, alpha[:-2]], axis=0), Tensor(skip_ok))
            comb = tt.logaddexp(comb, skip)
        alpha = tt.add(comb, emissions(step))

    if s > 1:
        total = tt.logaddexp(alpha[s - 1], alpha[s - 2])
    else:
        total = alpha[0]
    return tt.neg(total)


def ctc_loss_value(log_probs: np.ndarray, labels) -> float:
    """Plain-numpy forward recursion on precomputed log-softmax rows."""
    labels = _validate(log_probs.shape, labels)
    t = log_probs.shape[0]
    ext = _extended_labels(labels)
    s = len(ext)
    alpha = np.full(s, -np.inf)
    alpha[0] = log_probs[0, BLANK]
    if s > 1:
        alpha[1] = log_probs[0, ext[1]]
    for step in range(1, t):
        prev = alpha
        alpha = np.array(prev)
        if s > 1:
            alpha[1:] = np.logaddexp(alpha[1:], prev[:-1])
        for i in range(2, s):
            if ext[i] != BLANK and ext[i] != ext[i - 2]:
                alpha[i] = np.logaddexp(alpha[i], prev[i - 2])
        alpha = alpha + log_probs[step, ext]
    total = alpha[-1] if s == 1 else np.logaddexp(alpha[-1], alpha[-2])
    return float(-total)


@dataclass(frozen=True)
class DecodeResult:
    tokens: Tuple[int, ...]
    log_prob: float
    mode: str  # "greedy" | "exact"


def collapse_path(path: Sequence[int]) -> Tuple[int, ...]:
    """Collapse duplicated tokens, then remove all blanks."""
    out = []
    prev = None
    for token in path:
        if token != prev:
            out.append(int(token))
        prev = token
    return tuple(token for token in out if token != BLANK)


def greedy_decode(logits) -> DecodeResult:
    """Best-path decoding; log_prob is the path's summed log-probability."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DataError(f"logits must be [T >= 1, vocab+1], got {arr.shape}")
    shifted = arr - arr.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    path = np.argmax(arr, axis=1)  # ties resolve to the lowest index
    log_prob = float(logp[np.arange(arr.shape[0]), path].sum())
    return DecodeResult(collapse_path(path), log_prob, "greedy")


def exact_decode(logits, max_frames: int = EXACT_DECODE_MAX_FRAMES,
                 max_vocab: int = EXACT_DECODE_MAX_VOCAB) -> DecodeResult:
    """Most likely collapsed sequence by summing all paths (tiny inputs only).

    Ties break shortest-then-lexicographic. Instances beyond the limits are
    refused; use greedy decoding there.
    """
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    t, vocab_plus_1 = arr.shape
    if t > max_frames or (vocab_plus_1 - 1) > max_vocab:
        raise DataError(
            f"exact decoding is limited to T <= {max_frames} and vocab <= {max_vocab} "
            f"(got T={t}, vocab={vocab_plus_1 - 1}); use greedy decoding")
    shifted = arr - arr.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    best: Optional[Tuple[int, ...]] = None
    best_lp = -np.inf
    tokens = range(1, vocab_plus_1)
    for length in range(0, t + 1):
        for seq in product(tokens, repeat=length):
            if min_frames_for(seq) > t:
                continue
            lp = -ctc_loss_value(logp, seq)
            if lp > best_lp:
                best, best_lp = seq, lp
    return DecodeResult(best, float(best_lp), "exact")


def word_error_rate(ref: Sequence[str], hyp: Sequence[str]) -> Fraction:
    """Levenshtein distance over words divided by reference length."""
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise DataError("WER needs a non-empty reference", field="ref")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return Fraction(prev[-1], len(ref))


# -- fine-tuning ------------------------------------------------------------------


class CtcHead:
    """Linear classifier over context features, with an optional upsample
    stage that lets each frame emit ``upsample`` predictions."""

    def __init__(self, dim_in: int, vocab: int, rng, upsample: int = 1, dtype=np.float32):
        if vocab < 1:
            raise ConfigError("CTC head needs at least one non-blank token")
        self.vocab = vocab
        self.upsample = upsample
        self.up_w = self.up_b = None
        if upsample > 1:
            self.up_w = init.trunc_normal(rng, (dim_in, upsample * dim_in), dtype=dtype)
            self.up_b = init.zeros((upsample * dim_in,), dtype=dtype)
        self.w = init.trunc_normal(rng, (dim_in, vocab + 1), dtype=dtype)
        self.b = init.zeros((vocab + 1,), dtype=dtype)

    def forward(self, c: Tensor) -> Tensor:
        h = c
        if self.up_w is not None:
            from .context import upsample as up
            h = up(h, self.upsample, self.up_w, self.up_b)
        return tt.add_bias(tt.matmul(h, self.w), self.b)

    def named_params(self, prefix="ctc_head."):
        out = [(prefix + "w", self.w), (prefix + "b", self.b)]
        if self.up_w is not None:
            out += [(prefix + "up_w", self.up_w), (prefix + "up_b", self.up_b)]
        return out


@dataclass(frozen=True)
class FinetuneHyper:
    peak_lr: float = 3e-5
    total_steps: int = 13000
    freeze_steps: int = 10000  # context frozen this long; the extractor always is


def finetune_logits(model, head: CtcHead, wave, train=False, rng=None) -> Tensor:
    seq = model.encode(wave, train=train, rng=rng)
    return head.forward(seq.values)


def finetune_step(batch, model, head: CtcHead, opt, hyper: FinetuneHyper, *,
                  step: int, seed: int) -> dict:
    """One CTC update: the head always trains, the context only after the
    freeze phase, the wave feature extractor never."""
    opt.zero_grad()
    nseq = len(batch)
    total = 0.0
    for i, (wave, labels) in enumerate(batch):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(step, i)))
        logits = finetune_logits(model, head, wave, train=True, rng=rng)
        loss = tt.scale(ctc_loss(logits, labels), 1.0 / nseq)
        if not np.isfinite(loss.data).all():
            raise DivergenceError(f"non-finite CTC loss on sequence {i}")
        backward(loss)
        total += float(loss.data)

    active = {name for name, _ in head.named_params()}
    if step >= hyper.freeze_steps:
        active |= {name for name, _ in model.context.named_params("context.")}
    lr = lr_at_step("tri_stage", step, hyper.total_steps, hyper.peak_lr)
    opt.step(lr, active=active)
    return {"step": step, "lr": lr, "loss": total}
