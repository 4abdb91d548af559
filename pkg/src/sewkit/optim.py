"""Adam and the two learning-rate schedules used for training.

``poly_warmup`` ramps linearly from 0 to the peak over the warmup steps and
then decays linearly to exactly 0 at the final step. ``tri_stage`` splits
the run 10%/40%/50%: linear warmup to the peak, a constant stretch, then
exponential decay reaching exactly 5% of the peak at the final step.
Steps beyond ``total`` clamp to the final value.

Adam uses the standard bias-corrected moment updates. Weight decay is
loss-coupled L2 (added to the gradient); betas default to (0.9, 0.98)
and eps to 1e-6.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DivergenceError

TRI_STAGE_PHASES = (0.1, 0.4, 0.5)
TRI_STAGE_FINAL_SCALE = 0.05


def lr_at_step(schedule: str, step: int, total: int, peak: float,
               warmup: int = None) -> float:
    if step < 0:
        raise ConfigError(f"negative step {step}")
    if schedule == "poly_warmup":
        if warmup is None:
            raise ConfigError("poly_warmup needs a warmup step count")
        if step >= total:
            return 0.0
        if warmup > 0 and step <= warmup:
            return peak * step / warmup
        return peak * (total - step) / (total - warmup)
    if schedule == "tri_stage":
        warm = int(round(TRI_STAGE_PHASES[0] * total))
        hold_end = warm + int(round(TRI_STAGE_PHASES[1] * total))
        if step >= total:
            return TRI_STAGE_FINAL_SCALE * peak
        if warm > 0 and step <= warm:
            return peak * step / warm
        if step <= hold_end:
            return peak
        # exp decay hitting exactly final_scale * peak at step == total
        rate = -np.log(TRI_STAGE_FINAL_SCALE) / (total - hold_end)
        return float(peak * np.exp(-rate * (step - hold_end)))
    raise ConfigError(f"unknown lr schedule {schedule!r}")


class Adam:
    """Holds first/second moments for a fixed set of named parameters.

    ``step`` applies the update in place, between graph executions. Frozen
    parameters are skipped entirely via the ``active`` name filter: no
    moment update, no data change.
    """

    def __init__(self, named_params, betas=(0.9, 0.98), eps=1e-6, weight_decay=0.01):
        self.named_params = list(named_params)
        seen = set()
        for name, _ in self.named_params:
            if name in seen:
                raise ConfigError(f"duplicate parameter name {name!r}")
            seen.add(name)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    def step(self, lr: float, active=None):
        """One Adam update at learning rate ``lr``.

        ``active``: optional set of names to update; everything else is
        left untouched (parameters and moments alike).
        """
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.named_params:
            if active is not None and name not in active:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient for {name}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def state_arrays(self):
        """Moment buffers keyed for checkpointing."""
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out
