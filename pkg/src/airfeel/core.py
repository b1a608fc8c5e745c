"""Per-round physical model of an ISCC federated edge learning system.

One training round has three billable phases on every device: wireless
sensing to acquire a batch of training samples, local gradient computation,
and analog gradient upload aggregated over the air (AirComp).  This module
holds the configuration types, the exact time/energy cost formulas of each
phase, and the stochastic corruption/aggregation primitives that the
simulator and the resource optimizer are built on.

All stochastic operations take an explicit ``numpy.random.Generator``;
nothing touches global random state.  Gaussian vectors are isotropic with
the configured *total* variance spread equally over their coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "InfeasibleError",
    "ConvergenceError",
    "DivergenceError",
    "SystemConfig",
    "DeviceConfig",
    "RoundAllocation",
    "SenseSample",
    "ChannelRealization",
    "sense_batch",
    "corruption_draws",
    "sensing_time",
    "sensing_energy",
    "compute_time",
    "compute_energy",
    "upload_time",
    "upload_energy",
    "tx_power_from_alignment",
    "aircomp_aggregate",
    "round_latency",
    "round_energy",
]


class InfeasibleError(RuntimeError):
    """No allocation can satisfy the latency/energy constraints."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its budget above tolerance."""

    def __init__(self, message: str, trace=None, residual=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
        self.residual = residual


class DivergenceError(RuntimeError):
    """Training produced non-finite model weights."""

    def __init__(self, message: str, round_index: int):
        super().__init__(message)
        self.round_index = round_index


def _positive(value, name, problems):
    if not value > 0:
        problems.append(f"{name} must be > 0, got {value}")


def _nonnegative(value, name, problems):
    if not value >= 0:
        problems.append(f"{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class SystemConfig:
    """Global constants shared by every device and round.

    Attributes:
        num_devices: number of participating edge devices.
        grad_dim: model/gradient dimension.
        num_subcarriers: orthogonal subcarriers available for upload.
        sense_sample_time: seconds to sense one training sample.
        symbol_time: seconds to transmit one gradient element per subcarrier.
        cycles_per_sample: CPU cycles to process one sample locally.
        latency_budget: per-round wall-clock budget for every device (s).
        sense_noise_var: total variance of the raw sensing noise vector.
        channel_noise_var: total variance of the uplink channel noise vector.
        grad_var_bound: bound on per-sample stochastic gradient variance.
        hessian_bound: bound on the mixed weight/input second-derivative norm.
        smoothness: smoothness constant of the training loss.
        total_rounds: number of training rounds the schedule targets.
    """

    num_devices: int
    grad_dim: int
    num_subcarriers: int
    sense_sample_time: float
    symbol_time: float
    cycles_per_sample: float
    latency_budget: float
    sense_noise_var: float
    channel_noise_var: float
    grad_var_bound: float
    hessian_bound: float
    smoothness: float
    total_rounds: int

    def __post_init__(self):
        problems = []
        if self.num_devices < 1:
            problems.append(f"num_devices must be >= 1, got {self.num_devices}")
        if self.grad_dim < 1:
            problems.append(f"grad_dim must be >= 1, got {self.grad_dim}")
        if self.num_subcarriers < 1:
            problems.append(f"num_subcarriers must be >= 1, got {self.num_subcarriers}")
        _positive(self.sense_sample_time, "sense_sample_time", problems)
        _positive(self.symbol_time, "symbol_time", problems)
        _positive(self.cycles_per_sample, "cycles_per_sample", problems)
        _positive(self.latency_budget, "latency_budget", problems)
        _nonnegative(self.sense_noise_var, "sense_noise_var", problems)
        _nonnegative(self.channel_noise_var, "channel_noise_var", problems)
        _nonnegative(self.grad_var_bound, "grad_var_bound", problems)
        _nonnegative(self.hessian_bound, "hessian_bound", problems)
        _positive(self.smoothness, "smoothness", problems)
        if self.total_rounds < 1:
            problems.append(f"total_rounds must be >= 1, got {self.total_rounds}")
        if not problems and not self.latency_budget > upload_time(self):
            problems.append(
                "latency_budget must exceed the upload time "
                f"({upload_time(self):g} s); no round can be feasible otherwise"
            )
        if problems:
            raise ValueError("invalid SystemConfig:\n  " + "\n  ".join(problems))

    @property
    def upload_symbol_slots(self) -> int:
        """Subcarrier time slots needed to upload one gradient vector."""
        return math.ceil(self.grad_dim / self.num_subcarriers)


@dataclass(frozen=True)
class DeviceConfig:
    """Static per-device parameters.

    ``channel_power_gain`` is the mean squared channel magnitude; devices
    with weak channels are assumed excluded by scheduling before a round
    starts, so it must be strictly positive.
    """

    channel_power_gain: float
    energy_budget: float
    cpu_constant: float
    max_frequency: float
    max_sense_power: float
    clutter_var: float

    def __post_init__(self):
        problems = []
        _positive(self.channel_power_gain, "channel_power_gain", problems)
        _positive(self.energy_budget, "energy_budget", problems)
        _nonnegative(self.cpu_constant, "cpu_constant", problems)
        _positive(self.max_frequency, "max_frequency", problems)
        _positive(self.max_sense_power, "max_sense_power", problems)
        _nonnegative(self.clutter_var, "clutter_var", problems)
        if problems:
            raise ValueError("invalid DeviceConfig:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class RoundAllocation:
    """Decision variables of one round.

    ``batch_sizes`` are real-valued; the optimizer rounds them to integers
    only as its final step.  Treat instances as immutable value objects.
    """

    batch_sizes: np.ndarray
    batch_fractions: np.ndarray
    total_batch: float
    sense_powers: np.ndarray
    frequencies: np.ndarray
    receive_magnitude_sq: float

    @classmethod
    def consistent(cls, batch_sizes, sense_powers, frequencies,
                   receive_magnitude_sq) -> "RoundAllocation":
        """Build an allocation with fractions derived from the batch sizes."""
        batch_sizes = np.asarray(batch_sizes, dtype=float)
        total = float(batch_sizes.sum())
        if total > 0:
            fractions = batch_sizes / total
        else:
            fractions = np.zeros_like(batch_sizes)
        return cls(
            batch_sizes=batch_sizes,
            batch_fractions=fractions,
            total_batch=total,
            sense_powers=np.asarray(sense_powers, dtype=float),
            frequencies=np.asarray(frequencies, dtype=float),
            receive_magnitude_sq=float(receive_magnitude_sq),
        )

    def check_consistent(self, devices=None, tol: float = 1e-9) -> None:
        """Raise ValueError unless the allocation is internally consistent.

        Checks the fraction normalization, the batch total, and (when
        ``devices`` is given) the per-device power/frequency boxes.
        """
        problems = []
        if abs(float(self.batch_fractions.sum()) - 1.0) > tol:
            problems.append(
                f"batch fractions sum to {float(self.batch_fractions.sum())!r}, expected 1"
            )
        if abs(float(self.batch_sizes.sum()) - self.total_batch) > tol:
            problems.append(
                f"total_batch {self.total_batch!r} != sum of batch sizes "
                f"{float(self.batch_sizes.sum())!r}"
            )
        if np.any(self.batch_sizes < 0):
            problems.append("batch sizes must be nonnegative")
        if devices is not None:
            for k, dev in enumerate(devices):
                p, f = self.sense_powers[k], self.frequencies[k]
                if not 0 < p <= dev.max_sense_power * (1 + tol):
                    problems.append(
                        f"device {k}: sense power {p:g} outside (0, {dev.max_sense_power:g}]"
                    )
                if not 0 < f <= dev.max_frequency * (1 + tol):
                    problems.append(
                        f"device {k}: frequency {f:g} outside (0, {dev.max_frequency:g}]"
                    )
        if problems:
            raise ValueError("inconsistent RoundAllocation:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class SenseSample:
    """One sensed training sample decomposed into its additive parts.

    ``observed == truth + clutter + noise_scaled`` holds exactly by
    construction; ``noise_scaled`` is the raw sensing noise already divided
    by the square root of the sensing power.
    """

    truth: np.ndarray
    clutter: np.ndarray
    noise_scaled: np.ndarray
    observed: np.ndarray


@dataclass(frozen=True)
class ChannelRealization:
    """Uplink channel magnitudes of one round plus the channel noise level."""

    magnitudes: np.ndarray
    noise_var: float

    def tx_powers(self, receive_magnitude_sq: float) -> np.ndarray:
        """Per-device transmit powers that align all signals at the server."""
        return np.array([
            tx_power_from_alignment(receive_magnitude_sq, h) for h in self.magnitudes
        ])


# ---------------------------------------------------------------------------
# Sensing
# ---------------------------------------------------------------------------

def corruption_draws(cfg: SystemConfig, device: DeviceConfig, sense_power: float,
                     shape: tuple, rng: np.random.Generator):
    """Draw (clutter, scaled sensing noise) arrays for sensed samples.

    Each row is corrupted independently.  Per-coordinate variances are the
    configured totals divided by the sample dimension ``shape[-1]``.
    """
    if sense_power <= 0:
        raise ValueError(f"sense power must be > 0, got {sense_power}")
    dim = shape[-1]
    clutter_std = math.sqrt(device.clutter_var / dim)
    noise_std = math.sqrt(cfg.sense_noise_var / sense_power / dim)
    clutter = rng.normal(0.0, clutter_std, size=shape)
    noise_scaled = rng.normal(0.0, noise_std, size=shape)
    return clutter, noise_scaled


def sense_batch(cfg: SystemConfig, device: DeviceConfig, sense_power: float,
                batch_size: int, truth_source, rng: np.random.Generator) -> list:
    """Acquire ``batch_size`` corrupted samples from ``truth_source``.

    ``truth_source(rng, n)`` must return an ``(n, d)`` array of ground-truth
    samples.  Each observed sample is the truth plus independent zero-mean
    Gaussian clutter (total variance = device clutter_var) and sensing noise
    scaled by the sensing power (total variance = sense_noise_var / power).
    """
    n = int(batch_size)
    if n < 0:
        raise ValueError(f"batch_size must be >= 0, got {batch_size}")
    if sense_power <= 0:
        raise ValueError(f"sense power must be > 0, got {sense_power}")
    truth = np.atleast_2d(np.asarray(truth_source(rng, n), dtype=float))
    if truth.shape[0] != n:
        raise ValueError(f"truth source returned {truth.shape[0]} samples, expected {n}")
    if n == 0:
        return []
    clutter, noise_scaled = corruption_draws(cfg, device, sense_power, truth.shape, rng)
    observed = truth + clutter + noise_scaled
    return [
        SenseSample(truth=truth[i], clutter=clutter[i],
                    noise_scaled=noise_scaled[i], observed=observed[i])
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# Per-phase costs
# ---------------------------------------------------------------------------

def sensing_time(batch_size, cfg: SystemConfig):
    """Seconds spent sensing a batch: one sample period per sample."""
    return batch_size * cfg.sense_sample_time


def sensing_energy(sense_power, batch_size, cfg: SystemConfig):
    """Joules spent sensing: power times sensing time."""
    return sense_power * batch_size * cfg.sense_sample_time


def compute_time(batch_size, frequency, cfg: SystemConfig):
    """Seconds to compute the local gradient at the given CPU frequency."""
    if np.any(np.asarray(frequency) <= 0):
        raise ValueError(f"frequency must be > 0, got {frequency}")
    return batch_size * cfg.cycles_per_sample / frequency


def compute_energy(batch_size, frequency, device: DeviceConfig, cfg: SystemConfig):
    """Joules of local computation; scales with frequency squared."""
    return device.cpu_constant * batch_size * cfg.cycles_per_sample * frequency ** 2


def upload_time(cfg: SystemConfig):
    """Upload seconds, identical for all devices (simultaneous transmission)."""
    return cfg.upload_symbol_slots * cfg.symbol_time


def upload_energy(eta, batch_size, total_batch, device: DeviceConfig, cfg: SystemConfig):
    """Joules to upload the aggregation-weighted gradient of one device.

    ``eta`` is the squared receive magnitude the channel alignment targets.
    """
    if np.any(np.asarray(total_batch) <= 0):
        raise ValueError(f"total_batch must be > 0, got {total_batch}")
    if device.channel_power_gain <= 0:
        raise ValueError("channel power gain must be > 0")
    weight_sq = (batch_size / total_batch) ** 2
    return eta * weight_sq * cfg.grad_dim * cfg.symbol_time / device.channel_power_gain


def tx_power_from_alignment(eta, channel_magnitude):
    """Transmit power making a device's signal arrive with magnitude sqrt(eta)."""
    if channel_magnitude <= 0:
        raise ValueError(f"channel magnitude must be > 0, got {channel_magnitude}")
    return eta / channel_magnitude ** 2


def round_latency(k: int, alloc: RoundAllocation, cfg: SystemConfig) -> float:
    """Total sensing + computation + upload seconds for device ``k``."""
    return float(
        sensing_time(alloc.batch_sizes[k], cfg)
        + compute_time(alloc.batch_sizes[k], alloc.frequencies[k], cfg)
        + upload_time(cfg)
    )


def round_energy(k: int, alloc: RoundAllocation, device: DeviceConfig,
                 cfg: SystemConfig) -> float:
    """Total sensing + computation + upload joules for device ``k``."""
    b_k = alloc.batch_sizes[k]
    if alloc.total_batch > 0:
        e_up = upload_energy(alloc.receive_magnitude_sq, b_k, alloc.total_batch,
                             device, cfg)
    else:
        e_up = 0.0
    return float(
        sensing_energy(alloc.sense_powers[k], b_k, cfg)
        + compute_energy(b_k, alloc.frequencies[k], device, cfg)
        + e_up
    )


# ---------------------------------------------------------------------------
# AirComp aggregation
# ---------------------------------------------------------------------------

def aircomp_aggregate(local_grads, batch_sizes, eta, cfg: SystemConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Aggregate local gradients over the air.

    Returns the batch-weighted mean of the local gradients plus channel
    noise scaled by the receive magnitude: sum_k (b_k / b) g_k + n / sqrt(eta),
    where n has total variance ``channel_noise_var``.
    """
    grads = np.asarray(local_grads, dtype=float)
    if grads.ndim != 2 or grads.shape[1] != cfg.grad_dim:
        raise ValueError(
            f"expected {len(batch_sizes)} gradient vectors of length {cfg.grad_dim}, "
            f"got array of shape {grads.shape}"
        )
    weights = np.asarray(batch_sizes, dtype=float)
    if weights.shape[0] != grads.shape[0]:
        raise ValueError("one batch size per gradient vector required")
    total = float(weights.sum())
    if total <= 0:
        raise ValueError("total batch size must be > 0")
    mixed = (weights / total) @ grads
    if cfg.channel_noise_var > 0:
        if eta <= 0:
            raise ValueError(
                f"receive magnitude eta must be > 0 with channel noise present, got {eta}"
            )
        noise_std = math.sqrt(cfg.channel_noise_var / cfg.grad_dim / eta)
        mixed = mixed + rng.normal(0.0, noise_std, size=cfg.grad_dim)
    return mixed
