"""Analytic convergence quantities for the noisy federated training round.

Evaluators for the variance bound on the aggregated gradient, the per-round
expected loss-decrease lower bound, and the cumulative convergence bound
over a schedule of rounds.  These are pure functions of the configuration
and allocation; empirical counterparts live in :mod:`airfeel.sim`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DeviceConfig, RoundAllocation, SystemConfig

__all__ = [
    "BoundInputs",
    "ConvergenceBound",
    "noise_levels",
    "gradient_error_bound",
    "variance_objective",
    "round_loss_decrease_bound",
    "cumulative_convergence_bound",
    "lemma_rate",
]


@dataclass(frozen=True)
class BoundInputs:
    """Everything the bound evaluators need for one round.

    ``true_grad_sq_norm`` and ``initial_gap`` are inputs, not estimates this
    module produces; the simulator supplies empirical values when needed.
    """

    cfg: SystemConfig
    devices: list
    alloc: RoundAllocation
    true_grad_sq_norm: float = 0.0
    initial_gap: float = 0.0

    def __post_init__(self):
        if self.true_grad_sq_norm < 0:
            raise ValueError("true_grad_sq_norm must be >= 0")
        if self.initial_gap < 0:
            raise ValueError("initial_gap must be >= 0")


@dataclass(frozen=True)
class ConvergenceBound:
    """Bound on the running mean of squared gradient norms after T rounds."""

    g_t_value: float
    per_round_noise_terms: list = field(default_factory=list)


def _safe_div(num: float, den: float, what: str) -> float:
    """num / den with the convention 0 / x = 0; positive / nonpositive errors."""
    if num == 0.0:
        return 0.0
    if den <= 0:
        raise ValueError(f"{what} must be > 0 when it divides a nonzero term, got {den}")
    return num / den


def noise_levels(cfg: SystemConfig, devices, sense_powers) -> np.ndarray:
    """Per-device, per-sample gradient noise level.

    Combines the stochastic-gradient variance bound with the corruption
    passed through the bounded mixed Hessian: sigma^2 + A^2 (clutter_var +
    sense_noise_var / sense_power).
    """
    a_sq = cfg.hessian_bound ** 2
    out = np.empty(len(devices))
    for k, dev in enumerate(devices):
        corrupted = _safe_div(a_sq * cfg.sense_noise_var, sense_powers[k],
                              f"sense power of device {k}")
        out[k] = cfg.grad_var_bound + a_sq * dev.clutter_var + corrupted
    return out


def _channel_term(cfg: SystemConfig, eta: float) -> float:
    return _safe_div(cfg.channel_noise_var, eta, "receive magnitude eta")


def gradient_error_bound(inputs: BoundInputs) -> float:
    """Upper bound on E||aggregated gradient - true gradient||^2 for one round.

    Tight (an equality) when the loss gradient is affine in the sample and
    the hessian/variance bounds hold with equality, e.g. the scalar
    linear-probe task.
    """
    alloc, cfg = inputs.alloc, inputs.cfg
    total = alloc.total_batch
    if total <= 0:
        raise ValueError(f"total batch must be > 0, got {total}")
    levels = noise_levels(cfg, inputs.devices, alloc.sense_powers)
    batch_term = float(np.sum(alloc.batch_sizes / total ** 2 * levels))
    return batch_term + _channel_term(cfg, alloc.receive_magnitude_sq)


def variance_objective(inputs: BoundInputs) -> float:
    """The gradient-error bound in batch-fraction form.

    Evaluates channel_term + sum_k fractions[k]^2 / batch_sizes[k] * level_k,
    which coincides with :func:`gradient_error_bound` whenever the fractions
    equal batch_sizes / total_batch.  This is the objective the batch-size
    and resource solvers minimize.
    """
    alloc, cfg = inputs.alloc, inputs.cfg
    levels = noise_levels(cfg, inputs.devices, alloc.sense_powers)
    acc = 0.0
    for k in range(len(inputs.devices)):
        frac, b_k = alloc.batch_fractions[k], alloc.batch_sizes[k]
        acc += _safe_div(frac ** 2 * levels[k], b_k, f"batch size of device {k}")
    return acc + _channel_term(cfg, alloc.receive_magnitude_sq)


def lemma_rate(cfg: SystemConfig) -> float:
    """The fixed learning rate the per-round bound assumes: 1 / (sqrt(T) L)."""
    return 1.0 / (math.sqrt(cfg.total_rounds) * cfg.smoothness)


def round_loss_decrease_bound(inputs: BoundInputs,
                              learning_rate: float | None = None) -> float:
    """Lower bound on the expected loss decrease of one round.

    Valid only at learning rate 1 / (sqrt(T) L); passing a different
    ``learning_rate`` raises instead of silently evaluating a wrong bound.
    The result can be negative when noise dominates the gradient signal.
    """
    cfg = inputs.cfg
    rate = lemma_rate(cfg)
    if learning_rate is not None and not math.isclose(learning_rate, rate,
                                                      rel_tol=1e-12):
        raise ValueError(
            f"per-round bound assumes learning rate {rate:g} "
            f"(1/(sqrt(T) L)); got {learning_rate:g}"
        )
    t, smooth = cfg.total_rounds, cfg.smoothness
    signal_coeff = 1.0 / (math.sqrt(t) * smooth) - 1.0 / (2.0 * t * smooth)
    noise_coeff = 1.0 / (2.0 * t * smooth)
    return signal_coeff * inputs.true_grad_sq_norm - noise_coeff * gradient_error_bound(inputs)


def cumulative_convergence_bound(cfg: SystemConfig, devices, schedule,
                                 initial_gap: float) -> ConvergenceBound:
    """Bound the mean squared gradient norm over a schedule of rounds.

    ``schedule`` is one RoundAllocation per round.  Returns
    (2 L / sqrt(T)) * initial_gap plus the schedule's mean per-round noise
    term divided by sqrt(T); the per-round terms are reported alongside.
    """
    t = len(schedule)
    if t < 1:
        raise ValueError("schedule must contain at least one round")
    if initial_gap < 0:
        raise ValueError("initial_gap must be >= 0")
    term_cache: dict[int, float] = {}
    terms = []
    for alloc in schedule:
        key = id(alloc)
        if key not in term_cache:
            term_cache[key] = gradient_error_bound(
                BoundInputs(cfg=cfg, devices=devices, alloc=alloc))
        terms.append(term_cache[key])
    sqrt_t = math.sqrt(t)
    value = 2.0 * cfg.smoothness * initial_gap / sqrt_t + math.fsum(terms) / (t * sqrt_t)
    return ConvergenceBound(g_t_value=value, per_round_noise_terms=terms)
