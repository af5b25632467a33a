"""Training objective: frame-wise cross-entropy plus truncated MSE smoothing.

The smoothing term penalises adjacent-frame jumps in log-probabilities,
clipped at `tau`, and treats the previous frame as a constant so gradients
only flow into the later frame of each pair.  The total loss sums the two
terms over all refinement stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import Var, scale_const, vsum


@dataclass(frozen=True)
class LossConfig:
    lambda_smooth: float = 0.15
    tau: float = 4.0
    class_weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.lambda_smooth < 0:
            raise ConfigError(f"lambda_smooth must be >= 0, got {self.lambda_smooth}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if any(w <= 0 for w in self.class_weights):
            raise ConfigError(f"class weights must be > 0, got {self.class_weights}")


def cross_entropy_frames(log_probs: Var, target: np.ndarray, weights=None) -> Var:
    """Weighted mean negative log-likelihood: -(1/T) sum_t w[y_t] * log p_t(y_t)."""
    lp = log_probs.value
    target = np.asarray(target)
    T, C = lp.shape
    if target.shape != (T,):
        raise DimensionError(f"target length {target.shape} != number of frames ({T},)")
    if target.min() < 0 or target.max() >= C:
        raise DimensionError(f"target labels must lie in [0, {C})")
    if weights is None:
        weights = np.ones(C)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (C,):
        raise DimensionError(f"class weights shape {weights.shape} != ({C},)")

    rows = np.arange(T)
    w_t = weights[target]
    value = -(w_t * lp[rows, target].astype(np.float64)).sum() / T

    def backward_fn(g):
        d = np.zeros_like(lp)
        d[rows, target] = (-w_t / T * float(g)).astype(lp.dtype)
        log_probs.accumulate_grad(d)

    return Var(np.asarray(value), parents=(log_probs,), backward_fn=backward_fn)


def truncated_mse_smoothing(log_probs: Var, tau: float) -> Var:
    """Mean over t=2..T and classes of min(|log p_t - log p_{t-1}|, tau)^2.

    The t-1 term is detached: gradients reach only the later frame of each
    adjacent pair.  A single-frame sequence contributes zero.
    """
    lp = log_probs.value
    T, C = lp.shape
    if T == 1:
        return Var(np.asarray(np.float64(0.0)), parents=(log_probs,),
                   backward_fn=lambda g: None)

    delta = lp[1:].astype(np.float64) - lp[:-1].astype(np.float64)
    mag = np.abs(delta)
    clipped = np.minimum(mag, tau)
    denom = (T - 1) * C
    value = np.square(clipped).sum() / denom

    def backward_fn(g):
        inner = mag < tau  # clipped region gets zero gradient
        d_later = 2.0 * clipped * np.sign(delta) * inner / denom * float(g)
        d = np.zeros_like(lp)
        d[1:] = d_later.astype(lp.dtype)
        log_probs.accumulate_grad(d)

    return Var(np.asarray(value), parents=(log_probs,), backward_fn=backward_fn)


def total_loss(stage_outputs, target: np.ndarray, cfg: LossConfig) -> Var:
    """Sum over stages of CE + lambda * truncated-MSE on that stage's log-probs.

    Accepts a StageOutput (uses its tape-connected `log_probs`) or a plain
    list of log-prob Vars.
    """
    log_prob_vars = getattr(stage_outputs, "log_probs", stage_outputs)
    if not log_prob_vars:
        raise DimensionError("total_loss needs at least one stage")
    target = np.asarray(target)
    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    terms = []
    for lp in log_prob_vars:
        if lp.value.shape[0] != target.shape[0]:
            raise DimensionError(
                f"stage length {lp.value.shape[0]} != target length {target.shape[0]}")
        terms.append(cross_entropy_frames(lp, target, weights))
        if cfg.lambda_smooth > 0:
            terms.append(scale_const(truncated_mse_smoothing(lp, cfg.tau), cfg.lambda_smooth))
    return vsum(terms)
