"""Joint batch-size and resource allocation for one training round.

Minimizes the per-round gradient-error objective (channel term plus the
batch-weighted sample-noise terms) subject to the fraction-normalization,
per-device latency, and per-device energy constraints, by alternating two
convex subproblems:

* the batch subproblem: optimal batch sizes and aggregation fractions at
  fixed sensing powers, CPU frequencies, and receive magnitude, solved by a
  primal-dual iteration whose primal step uses the KKT closed forms;
* the resource subproblem: optimal sensing powers, frequencies, and receive
  magnitude at fixed batches, with frequencies pinned by the tight latency
  constraint and a primal-dual iteration over the remaining variables.

Both solvers can bootstrap their multipliers from an exact structural solve
(water-filling over the fraction price, a one-dimensional convex search
over the receive magnitude), which the primal-dual loop then verifies and
certifies via KKT residuals.  An exhaustive grid oracle over small
instances provides independent validation of the whole pipeline.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bounds import BoundInputs, noise_levels, variance_objective
from .core import (
    ConvergenceError,
    InfeasibleError,
    RoundAllocation,
    SystemConfig,
    upload_time,
)

__all__ = [
    "SolverOptions",
    "DualState",
    "BatchSolverTerms",
    "BatchSolveResult",
    "ResourceSolveResult",
    "AllocationResult",
    "GridSpec",
    "check_feasibility",
    "solve_batch_sizes",
    "refit_consistent_batches",
    "solve_resources",
    "optimize_allocation",
    "round_batches",
    "grid_oracle",
    "allocation_report",
]

_TINY = 1e-300


@dataclass(frozen=True)
class SolverOptions:
    """Tuning knobs for the primal-dual solvers and the alternation.

    Step sizes are dimensionless; they are rescaled internally by the
    instance's objective and constraint magnitudes and decay as 1/sqrt(i).
    ``lambda_floor`` keeps the closed forms finite when an energy constraint
    goes inactive; it is applied relative to the instance's multiplier scale.
    """

    step_mu: float = 1.0
    step_gamma: float = 0.5
    step_lambda: float = 0.5
    step_phi: float = 0.5
    step_psi: float = 0.5
    max_iters: int = 200_000
    tol: float = 1e-6
    alt_tol: float = 1e-6
    alt_max_iters: int = 100
    lambda_floor: float = 1e-12
    min_batch: float = 1.0
    structural_init: bool = True
    num_starts: int = 8
    init_retries: int = 1000
    eta_init_decades: tuple = (-3.0, 1.0)

    def __post_init__(self):
        for name in ("step_mu", "step_gamma", "step_lambda", "step_phi",
                     "step_psi", "tol", "alt_tol", "lambda_floor", "min_batch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SolverOptions.{name} must be > 0")
        for name in ("max_iters", "alt_max_iters", "num_starts", "init_retries"):
            if not getattr(self, name) >= 1:
                raise ValueError(f"SolverOptions.{name} must be >= 1")


@dataclass
class DualState:
    """Lagrange multipliers of both subproblems.

    ``mu`` prices the fraction-normalization equality (sign-unconstrained);
    ``gamma``/``lam`` are the batch subproblem's latency/energy multipliers,
    ``phi``/``psi`` the resource subproblem's.
    """

    mu: float
    gamma: np.ndarray
    lam: np.ndarray
    phi: np.ndarray
    psi: np.ndarray

    @classmethod
    def zeros(cls, num_devices: int) -> "DualState":
        return cls(mu=0.0, gamma=np.zeros(num_devices), lam=np.zeros(num_devices),
                   phi=np.zeros(num_devices), psi=np.zeros(num_devices))

    def check(self):
        for name in ("gamma", "lam", "phi", "psi"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"dual variables {name} must be nonnegative")


@dataclass(frozen=True)
class BatchSolverTerms:
    """Per-device intermediates of the batch subproblem's closed forms.

    ``shadow_cost`` is the dual-weighted resource cost of one extra sample
    (latency multiplier times per-sample time plus energy multiplier times
    per-sample energy); ``noise_level`` is the per-sample gradient noise.
    """

    shadow_cost: np.ndarray
    noise_level: np.ndarray


@dataclass
class BatchSolveResult:
    batch_sizes: np.ndarray
    fractions: np.ndarray          # consistent: batch_sizes / total
    solver_fractions: np.ndarray   # the decoupled primal iterate
    duals: DualState
    converged: bool
    iterations: int
    residuals: dict
    ratio_spread: float


@dataclass
class ResourceSolveResult:
    sense_powers: np.ndarray
    frequencies: np.ndarray
    eta: float
    duals: DualState
    converged: bool
    iterations: int
    residuals: dict
    notes: list = field(default_factory=list)


@dataclass
class AllocationResult:
    alloc: RoundAllocation             # batches rounded to integers
    alloc_continuous: RoundAllocation
    objective: float                   # at the continuous allocation
    objective_rounded: float
    trace: list
    duals: DualState
    batch_residuals: dict
    resource_residuals: dict
    init_attempts: int
    starts_used: int


# ---------------------------------------------------------------------------
# Instance geometry helpers
# ---------------------------------------------------------------------------

def _arrays(devices):
    h = np.array([d.channel_power_gain for d in devices])
    e_budget = np.array([d.energy_budget for d in devices])
    omega = np.array([d.cpu_constant for d in devices])
    f_max = np.array([d.max_frequency for d in devices])
    p_max = np.array([d.max_sense_power for d in devices])
    return h, e_budget, omega, f_max, p_max


def _per_sample_energy(cfg, omega, sense_powers, frequencies):
    return (sense_powers * cfg.sense_sample_time
            + omega * cfg.cycles_per_sample * frequencies ** 2)


def _per_sample_latency(cfg, frequencies):
    return cfg.sense_sample_time + cfg.cycles_per_sample / frequencies


def _latency_caps(cfg, frequencies):
    """Largest batch each device can sense and process inside the budget."""
    return (cfg.latency_budget - upload_time(cfg)) / _per_sample_latency(cfg, frequencies)


def _upload_coeffs(cfg, h, eta):
    """Upload energy per squared aggregation fraction: eta * N * tau_u / H."""
    return eta * cfg.grad_dim * cfg.symbol_time / h


def _objective(cfg, devices, fractions, batch_sizes, sense_powers, frequencies, eta):
    alloc = RoundAllocation(
        batch_sizes=np.asarray(batch_sizes, float),
        batch_fractions=np.asarray(fractions, float),
        total_batch=float(np.sum(batch_sizes)),
        sense_powers=np.asarray(sense_powers, float),
        frequencies=np.asarray(frequencies, float),
        receive_magnitude_sq=float(eta),
    )
    return variance_objective(BoundInputs(cfg=cfg, devices=list(devices), alloc=alloc))


def _objective_scale(cfg, devices, sense_powers, frequencies, eta):
    """Crude positive magnitude of the objective, used to scale dual steps."""
    h, e_budget, omega, _, _ = _arrays(devices)
    k = len(devices)
    caps = _latency_caps(cfg, frequencies)
    e_per = _per_sample_energy(cfg, omega, sense_powers, frequencies)
    b_ref = np.maximum(np.minimum(caps, e_budget / (2.0 * e_per)), 1.0)
    levels = noise_levels(cfg, devices, sense_powers)
    scale = float(np.sum(levels / (k ** 2 * b_ref)))
    if cfg.channel_noise_var > 0 and eta > 0:
        scale += cfg.channel_noise_var / eta
    return max(scale, 1e-30)


def allocation_report(cfg, devices, alloc: RoundAllocation) -> dict:
    """Per-device latency/energy usage and slacks for an allocation."""
    from .core import round_energy, round_latency

    lat = np.array([round_latency(k, alloc, cfg) for k in range(len(devices))])
    en = np.array([round_energy(k, alloc, devices[k], cfg) for k in range(len(devices))])
    budgets = np.array([d.energy_budget for d in devices])
    return {
        "latency": lat,
        "energy": en,
        "latency_slack": cfg.latency_budget - lat,
        "energy_slack": budgets - en,
        "fraction_sum": float(alloc.batch_fractions.sum()),
    }


# ---------------------------------------------------------------------------
# Feasibility
# ---------------------------------------------------------------------------

def check_feasibility(cfg: SystemConfig, devices, sense_powers, frequencies,
                      eta, min_batch: float = 1.0):
    """Largest attainable fraction sum at the given resources.

    The auxiliary program maximizing the fraction sum under the latency and
    energy constraints separates per device once the batch is pinned at
    ``min_batch``: fractions do not enter the latency constraint and batches
    only consume energy, so each device's maximum fraction follows in closed
    form.  Returns ``(max_fraction_sum, feasible)``; feasible means the sum
    reaches 1.
    """
    sense_powers = np.asarray(sense_powers, float)
    frequencies = np.asarray(frequencies, float)
    if np.any(sense_powers <= 0) or np.any(frequencies <= 0) or not eta > 0:
        raise ValueError("sense powers, frequencies, and eta must all be > 0")
    h, e_budget, omega, _, _ = _arrays(devices)
    lat_per = _per_sample_latency(cfg, frequencies)
    e_per = _per_sample_energy(cfg, omega, sense_powers, frequencies)
    total = 0.0
    for k in range(len(devices)):
        if min_batch * lat_per[k] + upload_time(cfg) > cfg.latency_budget:
            continue  # even the smallest batch misses the deadline
        leftover = e_budget[k] - e_per[k] * min_batch
        if leftover <= 0:
            continue
        total += math.sqrt(h[k] * leftover / (eta * cfg.grad_dim * cfg.symbol_time))
    return total, total >= 1.0


# ---------------------------------------------------------------------------
# Batch subproblem (fractions and batch sizes at fixed resources)
# ---------------------------------------------------------------------------

def _batch_alpha_of_price(nu, levels, e_per, u, caps, e_budget):
    """Per-device optimal fraction at marginal price ``nu``.

    The cost of carrying fraction alpha is alpha^2 * level / b*(alpha) with
    b*(alpha) the largest batch the latency cap or the leftover energy
    allows.  Its derivative is strictly increasing, so the fraction at a
    given price follows the branch structure: latency-capped batches give a
    linear response, energy-capped batches a scalar root, and the kink
    between them absorbs a whole price interval.
    """
    k = len(levels)
    alpha = np.zeros(k)
    if nu <= 0:
        return alpha
    for i in range(k):
        m = max(levels[i], _TINY)
        e, uu, cap, budget = e_per[i], u[i], caps[i], e_budget[i]
        switch_sq = (budget - e * cap) / uu
        if switch_sq > 0:
            a_switch = math.sqrt(switch_sq)
            a_lat = nu * cap / (2.0 * m)
            if a_lat <= a_switch:
                alpha[i] = a_lat
                continue
            price_hi = 2.0 * m * a_switch * budget / (e * cap ** 2)
            if nu <= price_hi:
                alpha[i] = a_switch  # both constraints tight at the kink
                continue
            lo = a_switch
        else:
            lo = 0.0
        hi = math.sqrt(budget / uu)
        # energy branch: 2 m e budget a = nu (budget - u a^2)^2, lhs increasing
        for _ in range(90):
            mid = 0.5 * (lo + hi)
            g = 2.0 * m * e * budget * mid - nu * (budget - uu * mid ** 2) ** 2
            if g < 0:
                lo = mid
            else:
                hi = mid
        alpha[i] = 0.5 * (lo + hi)
    return alpha


def _batch_best_sizes(alpha, e_per, u, caps, e_budget):
    """Largest feasible batch for each device at the given fractions."""
    leftover = np.maximum(e_budget - u * alpha ** 2, 0.0)
    return np.minimum(caps, leftover / e_per)


def _structural_batch_solve(levels, e_per, u, caps, e_budget):
    """Exact batch subproblem solve: price bisection to a unit fraction sum."""
    hi = 1.0
    for _ in range(400):
        if _batch_alpha_of_price(hi, levels, e_per, u, caps, e_budget).sum() >= 1.0:
            break
        hi *= 2.0
    else:
        raise InfeasibleError("fraction sum cannot reach 1 at the given resources")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _batch_alpha_of_price(mid, levels, e_per, u, caps, e_budget).sum() < 1.0:
            lo = mid
        else:
            hi = mid
    nu = 0.5 * (lo + hi)
    alpha = _batch_alpha_of_price(nu, levels, e_per, u, caps, e_budget)
    b = _batch_best_sizes(alpha, e_per, u, caps, e_budget)
    return nu, alpha, b


def _recover_batch_duals(nu, alpha, b, levels, e_per, u, caps, lat_per):
    """Multipliers consistent with the KKT conditions at (alpha, b)."""
    k = len(alpha)
    gamma = np.zeros(k)
    lam = np.zeros(k)
    for i in range(k):
        if alpha[i] <= 0 or b[i] <= 0:
            continue
        lam_energy = levels[i] * alpha[i] ** 2 / (e_per[i] * b[i] ** 2)
        if b[i] < caps[i] * (1.0 - 1e-9):
            lam[i] = lam_energy  # energy constraint active, latency slack
        else:
            # latency cap active; the fraction stationarity splits the price
            # between the energy multiplier and (via batch stationarity) gamma
            lam[i] = max((nu - 2.0 * alpha[i] * levels[i] / b[i])
                         / (2.0 * alpha[i] * u[i]), 0.0)
            lam[i] = min(lam[i], lam_energy)
            gamma[i] = max((levels[i] * (alpha[i] / b[i]) ** 2
                            - lam[i] * e_per[i]) / lat_per[i], 0.0)
    return gamma, lam


def _relative_residual(total, parts):
    denom = sum(abs(p) for p in parts)
    if denom <= 0:
        return 0.0
    return abs(total) / denom


def _batch_residuals(cfg, mu, gamma, lam, alpha, b, levels, e_per, u,
                     caps, lat_per, e_budget, obj_scale):
    t_total = cfg.latency_budget
    lat = b * lat_per + upload_time(cfg)
    energy = e_per * b + u * alpha ** 2
    r = {
        "c1": abs(float(alpha.sum()) - 1.0),
        "latency": float(np.max(np.maximum(lat - t_total, 0.0) / t_total)),
        "energy": float(np.max(np.maximum(energy - e_budget, 0.0) / e_budget)),
        "comp_latency": float(np.max(np.abs(gamma * (lat - t_total))) / obj_scale),
        "comp_energy": float(np.max(np.abs(lam * (energy - e_budget))) / obj_scale),
    }
    stat_b = 0.0
    stat_a = 0.0
    for i in range(len(alpha)):
        if b[i] <= 0 or alpha[i] <= 0:
            continue
        j_i = gamma[i] * lat_per[i] + lam[i] * e_per[i]
        g_b = -levels[i] * alpha[i] ** 2 / b[i] ** 2 + j_i
        if b[i] >= caps[i] * (1.0 - 1e-9):
            g_b = max(g_b, 0.0)  # pushing past the cap is not a violation
        stat_b = max(stat_b, _relative_residual(
            g_b, (levels[i] * alpha[i] ** 2 / b[i] ** 2, j_i)))
        g_a = 2.0 * alpha[i] * levels[i] / b[i] + mu + 2.0 * lam[i] * alpha[i] * u[i]
        stat_a = max(stat_a, _relative_residual(
            g_a, (2.0 * alpha[i] * levels[i] / b[i], mu,
                  2.0 * lam[i] * alpha[i] * u[i])))
    r["stat_batch"] = stat_b
    r["stat_fraction"] = stat_a
    r["max"] = max(v for key, v in r.items() if key != "max")
    return r


def solve_batch_sizes(cfg: SystemConfig, devices, sense_powers, frequencies,
                      eta, opts: SolverOptions = SolverOptions(),
                      warm_duals: DualState | None = None) -> BatchSolveResult:
    """Optimal batch sizes and fractions at fixed (powers, frequencies, eta).

    Runs the primal-dual iteration: the KKT closed forms give fraction and
    batch candidates from the current multipliers (projected to the
    nonnegative orthant and the latency box, with energy-inactive devices
    pinned to the box per the multiplier floor), then the multipliers ascend
    along the constraint violations with diminishing, magnitude-scaled
    steps.  With ``structural_init`` the multipliers start at the exact
    water-filling solution and the loop acts as a certification pass.

    Fractions of the returned allocation are recomputed from the batch
    sizes; the decoupled iterate is kept in ``solver_fractions`` and a
    warning flags a spread above 5% between the two parameterizations.
    A non-converged run returns the best iterate with ``converged=False``.
    """
    sense_powers = np.asarray(sense_powers, float)
    frequencies = np.asarray(frequencies, float)
    k = len(devices)
    max_sum, ok = check_feasibility(cfg, devices, sense_powers, frequencies,
                                    eta, opts.min_batch)
    if not ok:
        raise InfeasibleError(
            f"batch subproblem infeasible: max fraction sum {max_sum:.6g} < 1")

    h, e_budget, omega, _, _ = _arrays(devices)
    levels = noise_levels(cfg, devices, sense_powers)
    lat_per = _per_sample_latency(cfg, frequencies)
    e_per = _per_sample_energy(cfg, omega, sense_powers, frequencies)
    u = _upload_coeffs(cfg, h, eta)
    caps = _latency_caps(cfg, frequencies)
    obj_scale = _objective_scale(cfg, devices, sense_powers, frequencies, eta)
    lam_floor = opts.lambda_floor * obj_scale / e_budget

    def build_result(alpha, b, mu, gamma, lam, converged, iterations, residuals):
        total = float(b.sum())
        fractions = b / total if total > 0 else np.zeros(k)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratios = np.where(alpha > 1e-12, b / np.maximum(alpha, _TINY), np.nan)
        finite = ratios[np.isfinite(ratios)]
        spread = float((finite.max() - finite.min()) / finite.mean()) if finite.size else 0.0
        if spread > 0.05:
            warnings.warn(
                f"batch/fraction ratios spread {spread:.1%} across devices; the "
                "decoupled optimum deviates from a single shared total batch",
                RuntimeWarning,
            )
        duals = DualState(mu=float(mu), gamma=gamma.copy(), lam=lam.copy(),
                          phi=np.zeros(k), psi=np.zeros(k))
        return BatchSolveResult(
            batch_sizes=b.copy(),
            fractions=fractions,
            solver_fractions=alpha.copy(),
            duals=duals,
            converged=converged,
            iterations=iterations,
            residuals=residuals,
            ratio_spread=spread,
        )

    if opts.structural_init:
        # the closed forms lose precision when the upload term is a tiny
        # difference of near-equal prices, so check optimality at the exact
        # water-filling point first; the loop is the fallback
        nu, alpha0, b0 = _structural_batch_solve(levels, e_per, u, caps, e_budget)
        mu = -nu
        gamma, lam = _recover_batch_duals(nu, alpha0, b0, levels, e_per, u,
                                          caps, lat_per)
        residuals0 = _batch_residuals(cfg, mu, gamma, lam, alpha0, b0, levels,
                                      e_per, u, caps, lat_per, e_budget, obj_scale)
        if residuals0["max"] < opts.tol:
            return build_result(alpha0, b0, mu, gamma, lam, True, 0, residuals0)
    elif warm_duals is not None:
        mu, gamma, lam = warm_duals.mu, warm_duals.gamma.copy(), warm_duals.lam.copy()
    else:
        lam = obj_scale / e_budget
        gamma = np.zeros(k)
        j0 = lam * e_per
        mu = -3.0 * float(np.max(np.sqrt(j0 * levels)))

    alpha_box = np.sqrt(h * e_budget / (eta * cfg.grad_dim * cfg.symbol_time))
    s_gamma = opts.step_gamma * obj_scale / cfg.latency_budget ** 2
    s_lambda = opts.step_lambda * obj_scale / e_budget ** 2
    upload_unit = eta * cfg.grad_dim * cfg.symbol_time

    alpha = np.zeros(k)
    b = np.zeros(k)
    residuals = {}
    converged = False
    iterations = 0
    best = None  # (residual max, alpha, b, mu, gamma, lam, residuals)
    safe_levels = np.maximum(levels, _TINY)
    for i in range(1, opts.max_iters + 1):
        iterations = i
        lam_eff = np.maximum(lam, lam_floor)
        terms = BatchSolverTerms(
            shadow_cost=gamma * lat_per + lam_eff * e_per,
            noise_level=levels,
        )
        root = np.sqrt(terms.shadow_cost * terms.noise_level)
        denom = 2.0 * lam_eff * upload_unit / h
        energy_active = lam > lam_floor
        # energy-inactive devices sit on the latency box; their fraction
        # comes from the remaining stationarity condition
        alpha = np.where(energy_active,
                         (-mu - 2.0 * root) / np.maximum(denom, _TINY),
                         np.maximum(-mu, 0.0) * caps / (2.0 * safe_levels))
        alpha = np.clip(alpha, 0.0, alpha_box)
        b = np.where(energy_active,
                     alpha * np.sqrt(safe_levels / np.maximum(terms.shadow_cost, _TINY)),
                     caps)
        b = np.clip(b, 0.0, caps)
        b = np.where((alpha > 0) & (b <= 0), caps * 1e-12, b)

        residuals = _batch_residuals(cfg, mu, gamma, lam, alpha, b, levels,
                                     e_per, u, caps, lat_per, e_budget, obj_scale)
        if best is None or residuals["max"] < best[0]:
            best = (residuals["max"], alpha.copy(), b.copy(), mu,
                    gamma.copy(), lam.copy(), residuals)
        if residuals["max"] < opts.tol:
            converged = True
            break

        decay = 1.0 / math.sqrt(i)
        lat = b * lat_per + upload_time(cfg)
        energy = e_per * b + u * alpha ** 2
        # the fraction sum responds linearly to mu, so the equality step is
        # Newton-scaled by the exact slope of the closed forms
        slope = float(np.sum(np.where(energy_active,
                                      h / np.maximum(2.0 * lam_eff * upload_unit, _TINY),
                                      caps / (2.0 * safe_levels))))
        mu = mu + opts.step_mu * min(decay * 2.0, 1.0) * (float(alpha.sum()) - 1.0) / max(slope, _TINY)
        gamma = np.maximum(gamma + s_gamma * decay * (lat - cfg.latency_budget), 0.0)
        lam = np.maximum(lam + s_lambda * decay * (energy - e_budget), 0.0)

    if not converged and best is not None:
        _, alpha, b, mu, gamma, lam, residuals = best
    return build_result(alpha, b, mu, gamma, lam, converged, iterations, residuals)


def refit_consistent_batches(cfg: SystemConfig, devices, sense_powers,
                             frequencies, eta, grid_points: int = 512):
    """Optimal batches with aggregation weights pinned to batch shares.

    The decoupled subproblem treats fractions and batch sizes as
    independent, and its optimum generally has unequal batch/fraction
    ratios, so mapping it back to physical weights (fraction = batch /
    total) loses optimality.  This refit solves the physical problem
    directly: for a fixed total batch the objective is linear in the
    per-device batches (fill cleanest samples first, capped by latency and
    by the energy quadratic), and a one-dimensional search over the total
    picks the best consistent point.  Ties in sample quality split in
    proportion to the caps.  Returns ``(batch_sizes, objective)``.
    """
    sense_powers = np.asarray(sense_powers, float)
    frequencies = np.asarray(frequencies, float)
    h, e_budget, omega, _, _ = _arrays(devices)
    levels = noise_levels(cfg, devices, sense_powers)
    e_per = _per_sample_energy(cfg, omega, sense_powers, frequencies)
    u = _upload_coeffs(cfg, h, eta)
    caps_lat = _latency_caps(cfg, frequencies)
    channel = cfg.channel_noise_var / eta if cfg.channel_noise_var > 0 else 0.0
    order = np.argsort(levels, kind="stable")

    def caps_at_total(t):
        # energy cap: e b + u (b/t)^2 <= E, rationalized quadratic root
        root = 2.0 * e_budget / (e_per + np.sqrt(e_per ** 2 + 4.0 * u * e_budget / t ** 2))
        return np.minimum(caps_lat, root)

    def fill(t):
        caps = caps_at_total(t)
        if caps.sum() < t:
            return None, math.inf
        b = np.zeros(len(devices))
        remaining = t
        i = 0
        while i < len(order) and remaining > 0:
            j = i
            while (j + 1 < len(order)
                   and levels[order[j + 1]] <= levels[order[i]] * (1 + 1e-12)):
                j += 1
            group = order[i:j + 1]
            group_caps = caps[group]
            take = min(remaining, float(group_caps.sum()))
            if take > 0 and group_caps.sum() > 0:
                b[group] = take * group_caps / group_caps.sum()
            remaining -= take
            i = j + 1
        cost = float(np.sum(b * levels)) / t ** 2 + channel
        return b, cost

    t_hi = float(np.sum(np.minimum(caps_lat, e_budget / e_per)))
    if t_hi <= 0:
        raise InfeasibleError("no device can afford a single sample")
    totals = np.geomspace(t_hi * 1e-3, t_hi, grid_points)
    best_t, best_b, best_cost = None, None, math.inf
    for t in totals:
        b, cost = fill(t)
        if cost < best_cost:
            best_t, best_b, best_cost = t, b, cost
    if best_t is None:
        raise InfeasibleError("no feasible total batch found")
    lo = best_t / (totals[1] / totals[0])
    hi = min(best_t * (totals[1] / totals[0]), t_hi)
    for _ in range(80):  # golden-section polish around the grid incumbent
        m1 = lo + 0.381966 * (hi - lo)
        m2 = hi - 0.381966 * (hi - lo)
        _, c1 = fill(m1)
        _, c2 = fill(m2)
        if c1 <= c2:
            hi = m2
        else:
            lo = m1
    t = 0.5 * (lo + hi)
    b, cost = fill(t)
    if cost <= best_cost:
        best_b, best_cost = b, cost
    return best_b, best_cost


# ---------------------------------------------------------------------------
# Resource subproblem (powers, frequencies, receive magnitude at fixed batches)
# ---------------------------------------------------------------------------

def _tight_frequencies(cfg, batch_sizes, f_max):
    """Minimum frequencies meeting the latency budget; impossible batches raise."""
    window = cfg.latency_budget - upload_time(cfg) - batch_sizes * cfg.sense_sample_time
    freqs = np.empty(len(batch_sizes))
    for k, b_k in enumerate(batch_sizes):
        if b_k <= 0:
            freqs[k] = f_max[k]
            continue
        if window[k] <= 0:
            raise InfeasibleError(
                f"device {k}: batch {b_k:.6g} cannot meet the latency budget "
                "(sensing alone exhausts it)")
        f_star = b_k * cfg.cycles_per_sample / window[k]
        if f_star > f_max[k] * (1.0 + 1e-9):
            raise InfeasibleError(
                f"device {k}: batch {b_k:.6g} needs frequency {f_star:.4g} Hz "
                f"above the cap {f_max[k]:.4g} Hz")
        freqs[k] = min(f_star, f_max[k])
    return freqs


def _power_of_eta(eta, p_max, p_floor, sens_coeff, budgets, v, obj_coeff):
    """Per-device sensing power once the receive magnitude is fixed.

    Devices whose samples benefit from power spend their whole energy
    leftover on sensing (capped at the box); the rest idle at the floor.
    """
    leftover = budgets - eta * v
    power = np.where(
        obj_coeff > 0,
        np.minimum(p_max, np.maximum(leftover, 0.0) / np.maximum(sens_coeff, _TINY)),
        p_floor,
    )
    return np.maximum(power, p_floor)


def _eta_derivative(cfg, eta, p_max, sens_coeff, budgets, v, obj_coeff):
    """Objective derivative along the receive magnitude at induced powers."""
    d = -cfg.channel_noise_var / eta ** 2 if cfg.channel_noise_var > 0 else 0.0
    leftover = budgets - eta * v
    limited = ((obj_coeff > 0) & (sens_coeff > 0)
               & (leftover < p_max * sens_coeff))  # energy-limited power
    if np.any(limited):
        d += float(np.sum((obj_coeff * sens_coeff * v)[limited]
                          / np.maximum(leftover[limited], _TINY) ** 2))
    return d


def _resource_geometry(cfg, devices, fractions, batch_sizes):
    """Shared precomputation for the resource subproblem."""
    h, e_budget, omega, f_max, p_max = _arrays(devices)
    freqs = _tight_frequencies(cfg, batch_sizes, f_max)
    comp = omega * batch_sizes * cfg.cycles_per_sample * freqs ** 2
    budgets = e_budget - comp
    for i in range(len(devices)):
        if batch_sizes[i] > 0 and budgets[i] <= 0:
            raise InfeasibleError(
                f"device {i}: computation at the minimum latency-feasible "
                "frequency already exceeds the energy budget")
    sens_coeff = batch_sizes * cfg.sense_sample_time
    v = fractions ** 2 * cfg.grad_dim * cfg.symbol_time / h
    obj_coeff = np.where(batch_sizes > 0,
                         fractions ** 2 / np.maximum(batch_sizes, _TINY)
                         * cfg.hessian_bound ** 2 * cfg.sense_noise_var,
                         0.0)
    p_floor = p_max * 1e-9
    caps = []
    for i in range(len(devices)):
        if v[i] <= 0:
            continue
        reserve = p_floor[i] * sens_coeff[i] if obj_coeff[i] <= 0 else 0.0
        caps.append((budgets[i] - reserve) / v[i])
    eta_hi = min(caps) * (1.0 - 1e-12) if caps else 1.0
    if eta_hi <= 0:
        raise InfeasibleError("no receive magnitude leaves energy for sensing")
    return freqs, comp, budgets, sens_coeff, v, obj_coeff, p_floor, eta_hi


def _structural_resources(cfg, devices, fractions, batch_sizes):
    """Exact resource subproblem solve via the receive-magnitude search.

    Returns (powers, frequencies, eta, psi): the tight frequencies, the
    bisected optimum of the one-dimensional convex problem in the receive
    magnitude with powers spending the leftover budgets, and multipliers
    consistent with the stationarity conditions at that point.
    """
    _, e_budget, _, _, p_max = _arrays(devices)
    (freqs, comp, budgets, sens_coeff, v, obj_coeff,
     p_floor, eta_hi) = _resource_geometry(cfg, devices, fractions, batch_sizes)
    eta_lo = eta_hi * 1e-14
    if _eta_derivative(cfg, eta_hi, p_max, sens_coeff, budgets, v, obj_coeff) <= 0:
        eta = eta_hi
    elif _eta_derivative(cfg, eta_lo, p_max, sens_coeff, budgets, v, obj_coeff) >= 0:
        eta = eta_lo
    else:
        lo, hi = eta_lo, eta_hi
        noise = cfg.channel_noise_var
        w = obj_coeff * sens_coeff * v
        boundary = p_max * sens_coeff
        for _ in range(120):
            mid = 0.5 * (lo + hi)
            leftover = budgets - mid * v
            limited = (w > 0) & (leftover < boundary)
            d = float(np.sum(np.where(limited, w / np.maximum(leftover, _TINY) ** 2,
                                      0.0))) - noise / mid ** 2
            if d < 0:
                lo = mid
            else:
                hi = mid
        eta = 0.5 * (lo + hi)
    power = _power_of_eta(eta, p_max, p_floor, sens_coeff, budgets, v, obj_coeff)
    psi = np.zeros(len(devices))
    for i in range(len(devices)):
        if obj_coeff[i] > 0 and power[i] < p_max[i] * (1.0 - 1e-9):
            psi[i] = obj_coeff[i] / (batch_sizes[i] * power[i] ** 2
                                     * cfg.sense_sample_time)
    if cfg.channel_noise_var > 0:
        # the magnitude may stop at a kink (a power hitting its box) or at
        # the scarcest budget; devices with tight energy and power on a box
        # bound have a free multiplier that absorbs the stationarity gap
        gap = cfg.channel_noise_var / eta ** 2 - float(np.sum(psi * v))
        if gap > 0:
            energy = comp + power * sens_coeff + eta * v
            for j in range(len(devices)):
                if gap <= 0:
                    break
                if v[j] <= 0 or energy[j] < e_budget[j] * (1.0 - 1e-9):
                    continue
                if obj_coeff[j] <= 0:
                    room = math.inf  # power at its floor, no stationarity cap
                elif power[j] >= p_max[j] * (1.0 - 1e-9):
                    room = (obj_coeff[j] / (batch_sizes[j] * power[j] ** 2
                                            * cfg.sense_sample_time) - psi[j])
                else:
                    continue
                take = min(gap / v[j], room)
                if take > 0:
                    psi[j] += take
                    gap -= take * v[j]
    return power, freqs, float(eta), psi


def solve_resources(cfg: SystemConfig, devices, fractions, batch_sizes,
                    opts: SolverOptions = SolverOptions(),
                    warm_duals: DualState | None = None) -> ResourceSolveResult:
    """Optimal (sensing powers, frequencies, receive magnitude) at fixed batches.

    Frequencies come directly from the tight latency constraint, so a
    device's round always ends exactly on the budget unless its frequency
    cap intervenes.  The remaining primal-dual iteration alternates the
    closed-form power and receive-magnitude updates with ascent on the
    energy multipliers; with ``structural_init`` the multipliers start from
    the exact solution of the one-dimensional convex problem in the receive
    magnitude.  The latency multipliers are pinned by the frequency
    stationarity identity since their constraint holds with equality.
    """
    fractions = np.asarray(fractions, float)
    batch_sizes = np.asarray(batch_sizes, float)
    k = len(devices)
    h, e_budget, omega, f_max, p_max = _arrays(devices)
    (freqs, comp, budgets, sens_coeff, v, obj_coeff,
     p_floor, eta_hi) = _resource_geometry(cfg, devices, fractions, batch_sizes)
    eta_lo = eta_hi * 1e-14
    obj_scale = _objective_scale(cfg, devices, 0.5 * p_max, freqs, eta_hi)
    psi_floor = opts.lambda_floor * obj_scale / e_budget

    notes = []
    eta = eta_hi
    if opts.structural_init:
        _, _, eta, psi = _structural_resources(cfg, devices, fractions, batch_sizes)
    elif warm_duals is not None:
        psi = warm_duals.psi.copy()
    else:
        psi = obj_scale / e_budget

    s_psi = opts.step_psi * obj_scale / e_budget ** 2
    a_delta = cfg.hessian_bound * math.sqrt(cfg.sense_noise_var)

    power = np.full(k, 0.0)
    residuals = {}
    converged = False
    iterations = 0
    best = None  # (residual max, power, eta, psi, residuals)
    stale = 0
    for i in range(1, opts.max_iters + 1):
        iterations = i
        psi_eff = np.maximum(psi, psi_floor)
        if i == 1 and np.any((psi <= psi_floor) & (obj_coeff > 0)):
            notes.append("energy multiplier at floor for some device: its "
                         "constraint is inactive and the power sits on a box bound")
        power = np.where(
            (obj_coeff > 0) & (batch_sizes > 0),
            a_delta * fractions / np.maximum(
                batch_sizes * np.sqrt(psi_eff * cfg.sense_sample_time), _TINY),
            p_floor,
        )
        power = np.clip(power, p_floor, p_max)
        if cfg.channel_noise_var > 0:
            eta = math.sqrt(cfg.channel_noise_var
                            / max(float(np.sum(psi_eff * v)), _TINY))
            eta = min(max(eta, eta_lo), eta_hi)
        else:
            eta = eta_lo

        energy = comp + power * sens_coeff + eta * v
        viol = energy - e_budget
        stat_p = 0.0
        for j in range(k):
            if batch_sizes[j] <= 0:
                continue
            g_p = (-obj_coeff[j] / power[j] ** 2
                   + psi[j] * batch_sizes[j] * cfg.sense_sample_time)
            if power[j] >= p_max[j] * (1.0 - 1e-9):
                g_p = max(g_p, 0.0)
            elif power[j] <= p_floor[j] * (1.0 + 1e-9):
                g_p = min(g_p, 0.0)
            stat_p = max(stat_p, _relative_residual(
                g_p, (obj_coeff[j] / power[j] ** 2,
                      psi[j] * batch_sizes[j] * cfg.sense_sample_time)))
        if cfg.channel_noise_var > 0 and eta_lo < eta < eta_hi:
            g_eta = -cfg.channel_noise_var / eta ** 2 + float(np.sum(psi * v))
            stat_eta = _relative_residual(
                g_eta, (cfg.channel_noise_var / eta ** 2, float(np.sum(psi * v))))
        else:
            stat_eta = 0.0
        residuals = {
            "latency": 0.0,  # frequencies are pinned to the tight constraint
            "energy": float(np.max(np.maximum(viol, 0.0) / e_budget)),
            "comp_energy": float(np.max(np.abs(psi * viol)) / obj_scale),
            "stat_power": stat_p,
            "stat_eta": stat_eta,
        }
        residuals["max"] = max(residuals.values())
        if best is None or residuals["max"] < best[0]:
            best = (residuals["max"], power.copy(), eta, psi.copy(), residuals)
            stale = 0
        else:
            stale += 1
        if residuals["max"] < opts.tol:
            converged = True
            break
        if stale > 5000:
            break  # ascent has plateaued above tolerance
        decay = 1.0 / math.sqrt(i)
        psi = np.maximum(psi + s_psi * decay * viol, 0.0)

    if not converged and best is not None:
        _, power, eta, psi, residuals = best
    phi = 2.0 * psi * omega * freqs ** 3  # frequency stationarity pins it
    duals = DualState(mu=0.0, gamma=np.zeros(k), lam=np.zeros(k),
                      phi=phi, psi=psi.copy())
    return ResourceSolveResult(
        sense_powers=power,
        frequencies=freqs,
        eta=float(eta),
        duals=duals,
        converged=converged,
        iterations=iterations,
        residuals=residuals,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# Alternating optimization
# ---------------------------------------------------------------------------

def _reduced_objective(cfg, devices, batch_sizes):
    """Objective at physical weights with all resources re-solved exactly.

    Frequencies follow the tight latency rule from the batches, powers and
    the receive magnitude from the structural resource solve, so this is
    the whole problem reduced to the batch variables alone.
    """
    b = np.asarray(batch_sizes, float)
    total = float(b.sum())
    if total <= 0:
        return math.inf, None
    fractions = b / total
    try:
        power, freqs, eta, _ = _structural_resources(cfg, devices, fractions, b)
    except InfeasibleError:
        return math.inf, None
    return _objective(cfg, devices, fractions, b, power, freqs, eta), (power, freqs, eta)


def _golden_min(evaluate, lo, hi, iters=28):
    """Golden-section minimum of a scalar function on [lo, hi]."""
    invphi = 0.6180339887498949
    m1 = hi - invphi * (hi - lo)
    m2 = lo + invphi * (hi - lo)
    f1, f2 = evaluate(m1), evaluate(m2)
    for _ in range(iters):
        if f1 <= f2:
            hi, m2, f2 = m2, m1, f1
            m1 = hi - invphi * (hi - lo)
            f1 = evaluate(m1)
        else:
            lo, m1, f1 = m1, m2, f2
            m2 = lo + invphi * (hi - lo)
            f2 = evaluate(m2)
    return (m1, f1) if f1 <= f2 else (m2, f2)


def _polish_batches(cfg, devices, batch_sizes, sweeps: int = 6):
    """Descent on the reduced objective over the batch variables.

    The alternation cannot grow a batch past the latency cap its current
    frequency implies, so a block-coordinate stall below the joint optimum
    is possible; scanning each batch against the reduced objective (which
    re-tightens frequencies per candidate) escapes it.  Coordinate passes
    alternate with a joint-scaling line search to cut through the
    correlated valley.  Only improvements are accepted.
    """
    _, _, _, f_max, _ = _arrays(devices)
    caps_max = _latency_caps(cfg, f_max)
    b = np.asarray(batch_sizes, float).copy()
    obj, _ = _reduced_objective(cfg, devices, b)

    def coord_eval(k):
        def evaluate(val):
            trial = b.copy()
            trial[k] = val
            return _reduced_objective(cfg, devices, trial)[0]
        return evaluate

    for _ in range(sweeps):
        before = obj
        for k in range(len(devices)):
            evaluate = coord_eval(k)
            grid = np.geomspace(max(caps_max[k] * 1e-3, 0.25), caps_max[k], 12)
            vals = [evaluate(v) for v in grid]
            i = int(np.argmin(vals))
            if vals[i] > obj:
                grid_best, grid_obj = b[k], obj
            else:
                grid_best, grid_obj = grid[i], vals[i]
            lo = max(min(grid_best, b[k]) / 1.7, caps_max[k] * 1e-4)
            hi = min(max(grid_best, b[k]) * 1.7, caps_max[k])
            val, cand = _golden_min(evaluate, lo, hi)
            if grid_obj < cand:
                val, cand = grid_best, grid_obj
            if cand < obj:
                b[k] = val
                obj = cand
        if len(devices) > 1:
            scale, cand = _golden_min(
                lambda s: _reduced_objective(cfg, devices,
                                             np.minimum(b * s, caps_max))[0],
                0.5, 1.5, iters=20)
            if cand < obj:
                b = np.minimum(b * scale, caps_max)
                obj = cand
        if before - obj <= 1e-10 * (1.0 + abs(obj)):
            break
    return b, obj


def _eta_reference(cfg, devices):
    h, e_budget, _, _, _ = _arrays(devices)
    return float(np.median(e_budget * h)) / (cfg.grad_dim * cfg.symbol_time)


def _crossing_frequency(cfg, device, theta, power):
    """Frequency where the latency batch cap meets the energy batch cap.

    The latency cap grows with frequency while the energy cap shrinks
    (quadratic compute energy); starting the alternation near their
    crossing keeps the first batch solve from being boxed in by an
    arbitrary initial frequency.  ``theta`` is the assumed share of the
    budget available to sensing and computation.
    """
    lo, hi = device.max_frequency * 1e-6, device.max_frequency

    def gap(f):
        cap_lat = (cfg.latency_budget - upload_time(cfg)) / (
            cfg.sense_sample_time + cfg.cycles_per_sample / f)
        e_per = (power * cfg.sense_sample_time
                 + device.cpu_constant * cfg.cycles_per_sample * f ** 2)
        return cap_lat - theta * device.energy_budget / e_per

    if gap(hi) <= 0:
        return hi
    if gap(lo) >= 0:
        return lo
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _initial_points(cfg, devices, opts, rng):
    """Structured plus random candidate starting resources."""
    _, _, _, f_max, p_max = _arrays(devices)
    eta_ref = _eta_reference(cfg, devices)
    lo, hi = opts.eta_init_decades
    points = []
    for theta in (0.25, 0.5, 0.75, 1.0):
        p0 = 0.5 * p_max
        f0 = np.array([_crossing_frequency(cfg, d, theta, p)
                       for d, p in zip(devices, p0)])
        points.append((p0, f0, eta_ref * 10.0 ** lo))
    while len(points) < max(opts.num_starts, 4):
        p0 = rng.uniform(0.1, 1.0, len(devices)) * p_max
        f0 = rng.uniform(0.1, 1.0, len(devices)) * f_max
        eta0 = eta_ref * 10.0 ** rng.uniform(lo, hi)
        points.append((p0, f0, eta0))
    return points


def optimize_allocation(cfg: SystemConfig, devices,
                        opts: SolverOptions = SolverOptions(),
                        rng: np.random.Generator | None = None) -> AllocationResult:
    """Full joint design of one round's batches and resources.

    Gathers feasible starting resources (structured frequency/energy
    crossings plus random draws, bounded retries), alternates the batch and
    resource subproblems from each until the objective change drops below
    ``alt_tol``, keeps the best run, and rounds batches to integers.  The
    returned objective trace is non-increasing: a block update that fails to
    improve the last feasible iterate ends its run instead of being applied.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    _, _, _, f_max, p_max = _arrays(devices)
    attempts = 0
    feasible_points = []
    for p0, f0, eta0 in _initial_points(cfg, devices, opts, rng):
        if attempts >= opts.init_retries:
            break
        attempts += 1
        if check_feasibility(cfg, devices, p0, f0, eta0, opts.min_batch)[1]:
            feasible_points.append((p0, f0, eta0))
    eta_ref = _eta_reference(cfg, devices)
    while not feasible_points and attempts < opts.init_retries:
        attempts += 1
        p0 = rng.uniform(0.1, 1.0, len(devices)) * p_max
        f0 = rng.uniform(0.1, 1.0, len(devices)) * f_max
        eta0 = eta_ref * 10.0 ** rng.uniform(*opts.eta_init_decades)
        if check_feasibility(cfg, devices, p0, f0, eta0, opts.min_batch)[1]:
            feasible_points.append((p0, f0, eta0))
    if not feasible_points:
        raise InfeasibleError(
            f"no feasible starting resources found in {attempts} attempts")

    starts = feasible_points[: opts.num_starts]
    runs = []
    for p0, f0, eta0 in starts:
        run = _alternate(cfg, devices, p0, f0, eta0, opts, do_polish=False)
        if run is not None:
            runs.append((run["objective"], p0, f0, eta0))
    if not runs:
        raise InfeasibleError("all starting points lost feasibility while alternating")
    runs.sort(key=lambda r: r[0])
    best = None
    for _, p0, f0, eta0 in runs[:3]:  # polish only the most promising runs
        run = _alternate(cfg, devices, p0, f0, eta0, opts, do_polish=True)
        if run is None:
            continue
        if best is None or run["objective"] < best["objective"]:
            best = run
    if best is None:
        raise InfeasibleError("all starting points lost feasibility while alternating")

    alloc_cont = best["alloc"]
    rounded = round_batches(alloc_cont, cfg, devices)
    obj_rounded = variance_objective(
        BoundInputs(cfg=cfg, devices=list(devices), alloc=rounded))
    return AllocationResult(
        alloc=rounded,
        alloc_continuous=alloc_cont,
        objective=best["objective"],
        objective_rounded=obj_rounded,
        trace=best["trace"],
        duals=best["duals"],
        batch_residuals=best["batch_residuals"],
        resource_residuals=best["resource_residuals"],
        init_attempts=attempts,
        starts_used=len(feasible_points[: opts.num_starts]),
    )


def _alternate(cfg, devices, p0, f0, eta0, opts, do_polish=True):
    """One alternation run; returns the final feasible iterate or None.

    Alternates the two subproblem solvers until the objective settles, then
    runs the joint batch polish once (the alternation alone cannot grow a
    batch past the latency cap its current frequency implies) and closes
    with a final certification cycle of both solvers at the polished point.
    """
    run = {
        "p": np.asarray(p0, float), "f": np.asarray(f0, float),
        "eta": float(eta0), "trace": [], "state": None,
        "objective": math.inf, "duals": DualState.zeros(len(devices)),
        "batch_residuals": {}, "resource_residuals": {},
    }

    def cycle(batches_override=None):
        """One solve_p3 -> consistency projection -> solve_p4 pass."""
        res3 = solve_batch_sizes(cfg, devices, run["p"], run["f"], run["eta"],
                                 opts, warm_duals=run["duals"])
        if not res3.converged:
            raise ConvergenceError(
                "batch subproblem failed to converge "
                f"(residual {res3.residuals['max']:.3g})",
                trace=run["trace"], residual=res3.residuals["max"])
        # project the decoupled optimum onto physical weights: the batch
        # refit is exact for fractions pinned to batch shares, which the
        # relaxed solution only approximates (its ratio spread can be large)
        if batches_override is None:
            batches, _ = refit_consistent_batches(cfg, devices, run["p"],
                                                  run["f"], run["eta"])
        else:
            batches = batches_override
        total = float(batches.sum())
        fractions = batches / total if total > 0 else res3.fractions
        res4 = solve_resources(cfg, devices, fractions, batches, opts,
                               warm_duals=run["duals"])
        if not res4.converged:
            raise ConvergenceError(
                "resource subproblem failed to converge "
                f"(residual {res4.residuals['max']:.3g})",
                trace=run["trace"], residual=res4.residuals["max"])
        obj = _objective(cfg, devices, fractions, batches,
                         res4.sense_powers, res4.frequencies, res4.eta)
        if obj > run["objective"]:
            return False  # keep the previous feasible iterate
        run["trace"].append(obj)
        run["objective"] = obj
        run["duals"] = DualState(mu=res3.duals.mu, gamma=res3.duals.gamma,
                                 lam=res3.duals.lam, phi=res4.duals.phi,
                                 psi=res4.duals.psi)
        run["batch_residuals"] = res3.residuals
        run["resource_residuals"] = res4.residuals
        run["state"] = RoundAllocation(
            batch_sizes=np.asarray(batches, float).copy(),
            batch_fractions=np.asarray(fractions, float).copy(),
            total_batch=total,
            sense_powers=res4.sense_powers.copy(),
            frequencies=res4.frequencies.copy(),
            receive_magnitude_sq=res4.eta,
        )
        run["p"], run["f"], run["eta"] = (res4.sense_powers, res4.frequencies,
                                          res4.eta)
        return True

    for _ in range(opts.alt_max_iters):
        before = run["objective"]
        try:
            accepted = cycle()
        except InfeasibleError:
            break
        if not accepted or before - run["objective"] < opts.alt_tol:
            break
    if run["state"] is None:
        return None

    if do_polish:
        polished, polished_obj = _polish_batches(cfg, devices,
                                                 run["state"].batch_sizes)
        if polished_obj < run["objective"] - opts.alt_tol:
            try:
                cycle(batches_override=polished)
            except InfeasibleError:
                pass
    return {
        "alloc": run["state"],
        "objective": run["objective"],
        "trace": run["trace"],
        "duals": run["duals"],
        "batch_residuals": run["batch_residuals"],
        "resource_residuals": run["resource_residuals"],
    }


# ---------------------------------------------------------------------------
# Integer batches
# ---------------------------------------------------------------------------

def round_batches(alloc: RoundAllocation, cfg: SystemConfig,
                  devices) -> RoundAllocation:
    """Round batch sizes to integers without leaving the feasible set.

    Starts from nearest-integer candidates and decrements any device whose
    latency or energy constraint the rounding (including the fraction shifts
    it induces on the upload term) would violate; fractions and the total
    are recomputed from the rounded values.
    """
    from .core import round_energy, round_latency

    sizes = np.maximum(np.floor(np.asarray(alloc.batch_sizes, float) + 0.5), 0.0)
    for _ in range(10_000):
        candidate = RoundAllocation.consistent(
            sizes, alloc.sense_powers, alloc.frequencies,
            alloc.receive_magnitude_sq)
        if candidate.total_batch <= 0:
            return candidate
        bad = []
        for k, dev in enumerate(devices):
            if sizes[k] <= 0:
                continue
            if (round_latency(k, candidate, cfg) > cfg.latency_budget
                    or round_energy(k, candidate, dev, cfg) > dev.energy_budget):
                bad.append(k)
        if not bad:
            return candidate
        for k in bad:
            sizes[k] -= 1.0
    raise RuntimeError("batch rounding failed to stabilize")  # pragma: no cover


# ---------------------------------------------------------------------------
# Grid oracle
# ---------------------------------------------------------------------------

@dataclass
class GridSpec:
    """Axes of the exhaustive search; ``None`` axes stay at the fixed values."""

    batch_axes: list
    power_axes: list | None = None
    freq_axes: list | None = None
    eta_axis: np.ndarray | None = None
    fixed_powers: np.ndarray | None = None
    fixed_freqs: np.ndarray | None = None
    fixed_eta: float | None = None
    refine_rounds: int = 0
    max_points: int = int(2e7)
    log_axes: frozenset | None = None  # None: detect wide positive axes

    @classmethod
    def from_caps(cls, cfg, devices, points_per_axis: int = 8,
                  refine_rounds: int = 2) -> "GridSpec":
        """Full grid over every decision variable, spanning the device caps."""
        _, _, _, f_max, p_max = _arrays(devices)
        caps = _latency_caps(cfg, f_max)
        n = points_per_axis
        eta_ref = _eta_reference(cfg, devices)
        return cls(
            batch_axes=[np.linspace(1.0, c, n) for c in caps],
            power_axes=[np.geomspace(p * 1e-3, p, n) for p in p_max],
            freq_axes=[np.geomspace(f * 1e-2, f, n) for f in f_max],
            eta_axis=np.geomspace(eta_ref * 1e-4, eta_ref * 10.0, n),
            refine_rounds=refine_rounds,
        )


def _grid_pass(cfg, devices, axes, fixed, max_points, top_k=1):
    """Evaluate the objective over one Cartesian grid.

    Returns up to ``top_k`` feasible (point, objective) pairs, best first;
    ties resolve to the lexicographically smallest grid index.
    """
    h, e_budget, omega, _, _ = _arrays(devices)
    k = len(devices)
    names = list(axes.keys())
    sizes = [len(axes[n]) for n in names]
    n_points = int(np.prod(sizes)) if sizes else 1
    if n_points > max_points:
        raise ValueError(f"grid of {n_points} points exceeds the oracle budget")

    def view(name):
        if name in axes:
            i = names.index(name)
            shape = [1] * len(names)
            shape[i] = sizes[i]
            return np.asarray(axes[name], float).reshape(shape)
        return fixed[name]

    b = [view(f"b{i}") for i in range(k)]
    p = [view(f"p{i}") for i in range(k)]
    f = [view(f"f{i}") for i in range(k)]
    eta = view("eta")

    total = sum(b)
    t_up = upload_time(cfg)
    a_sq = cfg.hessian_bound ** 2
    objective = cfg.channel_noise_var / eta if cfg.channel_noise_var > 0 else 0.0
    feasible = True
    for i in range(k):
        level = (cfg.grad_var_bound
                 + a_sq * (devices[i].clutter_var + cfg.sense_noise_var / p[i]))
        objective = objective + b[i] / total ** 2 * level
        lat = (b[i] * cfg.sense_sample_time
               + b[i] * cfg.cycles_per_sample / f[i] + t_up)
        upload = eta * (b[i] / total) ** 2 * cfg.grad_dim * cfg.symbol_time / h[i]
        energy = (p[i] * b[i] * cfg.sense_sample_time
                  + omega[i] * b[i] * cfg.cycles_per_sample * f[i] ** 2 + upload)
        feasible = feasible & (lat <= cfg.latency_budget) & (energy <= e_budget[i])

    shape = tuple(sizes)
    objective = np.broadcast_to(np.asarray(objective, float), shape).copy()
    feasible = np.broadcast_to(feasible, shape)
    objective[~feasible] = np.inf
    flat = objective.reshape(-1)

    def point_at(at):
        idx = np.unravel_index(int(at), shape)
        point = dict(fixed)
        for name, i in zip(names, idx):
            point[name] = float(axes[name][i])
        return point

    winner = int(np.argmin(flat))  # first occurrence: smallest grid index
    if not np.isfinite(flat[winner]):
        raise InfeasibleError("grid oracle found no feasible point")
    candidates = [(point_at(winner), float(flat[winner]))]
    if top_k > 1:
        take = min(top_k, flat.size)
        extra = np.argpartition(flat, take - 1)[:take]
        extra = extra[np.lexsort((extra, flat[extra]))]
        for at in extra:
            if int(at) == winner or not np.isfinite(flat[at]):
                continue
            candidates.append((point_at(at), float(flat[at])))
            if len(candidates) >= top_k:
                break
    return candidates


def grid_oracle(cfg: SystemConfig, devices, grid: GridSpec):
    """Exhaustive minimization of the round objective over a Cartesian grid.

    Feasibility is checked per point; optional local refinement re-grids
    around the incumbent with the same axis counts.  Ties resolve to the
    lexicographically smallest grid index.  Returns (allocation, objective).
    """
    k = len(devices)
    axes = {}
    fixed = {}
    for i in range(k):
        axes[f"b{i}"] = np.asarray(grid.batch_axes[i], float)
        if grid.power_axes is not None:
            axes[f"p{i}"] = np.asarray(grid.power_axes[i], float)
        else:
            fixed[f"p{i}"] = float(grid.fixed_powers[i])
        if grid.freq_axes is not None:
            axes[f"f{i}"] = np.asarray(grid.freq_axes[i], float)
        else:
            fixed[f"f{i}"] = float(grid.fixed_freqs[i])
    if grid.eta_axis is not None:
        axes["eta"] = np.asarray(grid.eta_axis, float)
    else:
        fixed["eta"] = float(grid.fixed_eta)

    seeds = _grid_pass(cfg, devices, axes, fixed, grid.max_points, top_k=4)
    if grid.log_axes is not None:
        log_axes = set(grid.log_axes)
    else:  # wide strictly-positive axes refine on a log scale
        log_axes = {name for name, arr in axes.items()
                    if arr.min() > 0 and arr.max() / arr.min() > 30.0}
    warp = {name: (np.log10 if name in log_axes else (lambda x: x))
            for name in axes}
    unwarp = {name: ((lambda x: 10.0 ** x) if name in log_axes else (lambda x: x))
              for name in axes}
    base_bounds = {name: (float(warp[name](arr.min())), float(warp[name](arr.max())))
                   for name, arr in axes.items()}
    counts = {name: len(arr) for name, arr in axes.items()}

    best, best_obj = seeds[0]
    for center_point, center_obj in seeds:
        # shrink each axis around the seed, letting the window drift between
        # rounds instead of zooming onto the first coarse cell; several seeds
        # guard against the coarse pass picking the wrong basin
        incumbent, incumbent_obj = center_point, center_obj
        spans = {name: hi - lo for name, (lo, hi) in base_bounds.items()}
        for _ in range(grid.refine_rounds):
            new_axes = {}
            for name in axes:
                spans[name] *= 0.45
                center = float(warp[name](incumbent[name]))
                lo = max(base_bounds[name][0], center - 0.5 * spans[name])
                hi = min(base_bounds[name][1], lo + spans[name])
                lo = max(base_bounds[name][0], hi - spans[name])
                if hi <= lo:
                    hi = lo + 1e-12 * max(abs(lo), 1e-30)
                new_axes[name] = unwarp[name](np.linspace(lo, hi, counts[name]))
            try:
                cand, cand_obj = _grid_pass(cfg, devices, new_axes, fixed,
                                            grid.max_points)[0]
            except InfeasibleError:
                break  # window slid off the feasible set; keep the incumbent
            if cand_obj <= incumbent_obj:
                incumbent, incumbent_obj = cand, cand_obj
        if incumbent_obj < best_obj:
            best, best_obj = incumbent, incumbent_obj

    sizes = np.array([best[f"b{i}"] for i in range(k)])
    powers = np.array([best[f"p{i}"] for i in range(k)])
    freqs = np.array([best[f"f{i}"] for i in range(k)])
    alloc = RoundAllocation.consistent(sizes, powers, freqs, best["eta"])
    return alloc, best_obj
