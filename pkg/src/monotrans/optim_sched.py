"""One-cycle learning rate policy and the adaptive optimizer.

Schedule phases cover fixed fractions (0.45, 0.45, 0.10) of total_steps:

    oclr_stage1:  peak/10 -> peak    | peak -> peak/10   | peak/10 -> final
    oclr_stage2:  peak (constant)    | peak -> peak/5    | peak/5  -> final
    constant:     constant_lr everywhere

All segments are linear; phase boundaries return the anchor values exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

PHASE_FRACTIONS = (0.45, 0.45, 0.10)
SCHEDULE_KINDS = ("oclr_stage1", "oclr_stage2", "constant")


@dataclass
class ScheduleSpec:
    kind: str = "oclr_stage1"
    lr_peak: float = 8e-4
    lr_final: float = 1e-6
    constant_lr: float = 1e-5
    total_steps: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if min(self.lr_peak, self.lr_final, self.constant_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def _interp(a: float, b: float, s0: float, s1: float, step: float) -> float:
    if s1 <= s0:
        return b
    frac = (step - s0) / (s1 - s0)
    if frac <= 0.0:
        return a
    if frac >= 1.0:
        return b
    return a + (b - a) * frac


def lr_at(spec: ScheduleSpec, step: int) -> float:
    if step < 0 or step > spec.total_steps:
        warnings.warn(f"step {step} outside [0, {spec.total_steps}], clamping")
        step = min(max(step, 0), spec.total_steps)
    if spec.kind == "constant":
        return spec.constant_lr
    N = spec.total_steps
    b1 = PHASE_FRACTIONS[0] * N
    b2 = (PHASE_FRACTIONS[0] + PHASE_FRACTIONS[1]) * N
    peak = spec.lr_peak
    if spec.kind == "oclr_stage1":
        lr1, lr2 = peak / 10.0, peak / 10.0
    else:
        lr1, lr2 = peak, peak / 5.0
    if step <= b1:
        return _interp(lr1, peak, 0.0, b1, step)
    if step <= b2:
        return _interp(peak, lr2, b1, b2, step)
    return _interp(lr2, spec.lr_final, b2, N, step)


@dataclass
class OptimizerState:
    """Bias-corrected first/second-moment accumulators with decoupled L2."""

    l2: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def step_update(store, state: OptimizerState, lr: float):
    """One in-place parameter update from the accumulated gradients."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in store.params.items():
        g = store.grads[name]
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient in {name} at step {state.step}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.l2:
            p -= lr * state.l2 * p
