"""Latent-space diagnostics: per-variable statistics, inactive-unit detection,
the KL-versus-rho analysis, reconstruction gain and the noise-injection probe.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DomainError, PreconditionError
from .model import LatentNoise, TrainConfig, VaeModel, decode, encode, train
from .nn import Rng

VAR_THRESHOLD = 0.01
SIGMA_THRESHOLD = 0.8
CHUNK = 4096


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("VAE_LAB_THREADS", "1")))
    except ValueError:
        return 1


def _map_chunks(fn, n: int, chunk: int = CHUNK):
    """Apply ``fn(start, stop)`` over row chunks; results come back in chunk order."""
    bounds = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    workers = min(_threads(), len(bounds))
    if workers <= 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


def _frozen_mask(frozen, k):
    if frozen is None:
        return None
    f = np.asarray(frozen)
    if f.dtype == bool:
        return f
    mask = np.zeros(k, dtype=bool)
    mask[f.astype(np.int64)] = True
    return mask


def _encode_all(model, images, frozen=None):
    def run(a, b):
        enc = encode(model, images[a:b])
        return enc.mu, enc.logvar

    parts = _map_chunks(run, len(images))
    mu = np.concatenate([p[0] for p in parts])
    lv = np.concatenate([p[1] for p in parts])
    if frozen is not None and frozen.any():
        mu[:, frozen] = 0.0
        lv[:, frozen] = 0.0
    return mu, lv


@dataclass
class LatentStats:
    global_mu_variance: np.ndarray
    mean_local_variance: np.ndarray
    mean_mu: np.ndarray

    @property
    def latent_dim(self) -> int:
        return len(self.global_mu_variance)


def _stats_from(mu, lv) -> LatentStats:
    mean_mu = mu.mean(axis=0)
    centred = mu - mean_mu
    gvar = (centred * centred).mean(axis=0)
    return LatentStats(gvar, np.exp(lv).mean(axis=0), mean_mu)


def latent_stats(model: VaeModel, dataset, frozen=None) -> LatentStats:
    """Dataset-wide variance of each mean coordinate and mean predicted variance.

    Deterministic: uses the encoder heads directly, never samples.
    """
    images = getattr(dataset, "images", dataset)
    mu, lv = _encode_all(model, images, _frozen_mask(frozen, model.latent_dim))
    return _stats_from(mu, lv)


@dataclass
class VariableReport:
    status: list
    global_mu_variance: np.ndarray
    mean_local_variance: np.ndarray
    stationarity_sum: np.ndarray
    var_threshold: float = VAR_THRESHOLD
    sigma_threshold: float = SIGMA_THRESHOLD

    @property
    def inactive(self) -> list:
        return [i for i, s in enumerate(self.status) if s == "inactive"]

    @property
    def active(self) -> list:
        return [i for i, s in enumerate(self.status) if s == "active"]


def is_inactive(global_mu_variance, mean_local_variance,
                var_threshold=VAR_THRESHOLD, sigma_threshold=SIGMA_THRESHOLD) -> bool:
    return bool(global_mu_variance < var_threshold and mean_local_variance > sigma_threshold)


def classify_variables(stats: LatentStats, var_threshold: float = VAR_THRESHOLD,
                       sigma_threshold: float = SIGMA_THRESHOLD) -> VariableReport:
    """A variable is inactive iff its mean barely moves across the data while
    its predicted variance stays near the prior's."""
    g = np.asarray(stats.global_mu_variance, dtype=np.float64)
    m = np.asarray(stats.mean_local_variance, dtype=np.float64)
    status = ["inactive" if is_inactive(gi, mi, var_threshold, sigma_threshold) else "active"
              for gi, mi in zip(g, m)]
    return VariableReport(status, g, m, g + m, var_threshold, sigma_threshold)


@dataclass
class Stationarity:
    sums: np.ndarray
    mean: float
    variance: float


def stationarity_check(stats: LatentStats) -> Stationarity:
    sums = np.asarray(stats.global_mu_variance) + np.asarray(stats.mean_local_variance)
    return Stationarity(sums, float(sums.mean()), float(sums.var()))


def kl_rho_minimum(rho2: float) -> float:
    """Variance minimising the KL when variance/mean^2 is held at ``rho2``."""
    if rho2 < 0:
        raise DomainError(f"rho^2 must be non-negative, got {rho2}")
    return rho2 / (1.0 + rho2)


def kl_rho_value(rho2, sigma2):
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    return 0.5 * (sigma2 * (1.0 + rho2) / rho2 - np.log(sigma2) - 1.0)


@dataclass
class RhoAnalysis:
    rho2: float
    sigma2_grid: np.ndarray
    kl_values: np.ndarray
    sigma2_min: float

    @property
    def grid_argmin(self) -> float:
        return float(self.sigma2_grid[int(np.argmin(self.kl_values))])


def kl_rho_curve(rho2: float, sigma2_grid) -> RhoAnalysis:
    if not rho2 > 0:
        raise DomainError(f"rho^2 must be positive, got {rho2}")
    grid = np.asarray(sigma2_grid, dtype=np.float64)
    if np.any(grid <= 0):
        raise DomainError("variance grid must be strictly positive")
    return RhoAnalysis(float(rho2), grid, kl_rho_value(rho2, grid), kl_rho_minimum(rho2))


def _check_index(model, var_index):
    if not 0 <= var_index < model.latent_dim:
        raise IndexError(f"latent index {var_index} out of range for latent_dim {model.latent_dim}")


def _gain_from_mu(model, images, mu, var_index):
    def run(a, b):
        x, m = images[a:b], mu[a:b]
        full = decode(model, m) - x
        zeroed = m.copy()
        zeroed[:, var_index] = 0.0
        cut = decode(model, zeroed) - x
        return float(np.sum(cut * cut) - np.sum(full * full))

    return sum(_map_chunks(run, len(images))) / len(images)


def reconstruction_gain(model: VaeModel, dataset, var_index: int, frozen=None) -> float:
    """Mean increase in per-image SSE when latent ``var_index`` is zeroed (at z = mean)."""
    _check_index(model, var_index)
    images = getattr(dataset, "images", dataset)
    mu, _ = _encode_all(model, images, _frozen_mask(frozen, model.latent_dim))
    return _gain_from_mu(model, images, mu, var_index)


def relative_mse(reference, other) -> float:
    """Per-pixel MSE between two image batches, relative to the reference's mean energy."""
    reference, other = np.asarray(reference), np.asarray(other)
    return float(np.mean((reference - other) ** 2) / np.mean(reference ** 2))


@dataclass
class NoiseSchedule:
    step: float = 0.25
    max_amplitude: float = 5.0
    hold_epochs: int = 10
    recovery_epochs: int = 20
    # end the hold phase as soon as the probed variable classifies as inactive
    stop_hold_on_collapse: bool = True


@dataclass
class ProbeRecord:
    step: int
    phase: str
    amplitude: float
    kl_contribution: float
    reconstruction_gain: float
    global_mu_variance: float
    mean_local_variance: float


@dataclass
class ExperimentLog:
    var_index: int
    frozen: list
    records: list = field(default_factory=list)

    COLUMNS = ("step", "amplitude", "kl_contribution", "reconstruction_gain",
               "global_mu_variance", "mean_local_variance", "phase")

    def rows(self):
        for r in self.records:
            yield [r.step, r.amplitude, r.kl_contribution, r.reconstruction_gain,
                   r.global_mu_variance, r.mean_local_variance, r.phase]

    def phase(self, name):
        return [r for r in self.records if r.phase == name]

    def trigger(self) -> Optional[ProbeRecord]:
        """First injection step whose gain fell below the variable's KL."""
        for r in self.phase("inject"):
            if r.reconstruction_gain < r.kl_contribution:
                return r
        return None


def probe_variable(model, images, var_index, frozen=None):
    """``(kl_contribution, gain, global_mu_variance, mean_local_variance)`` for one latent."""
    mu, lv = _encode_all(model, images, frozen)
    m, l = mu[:, var_index], lv[:, var_index]
    kl = float(np.mean(0.5 * (m * m + np.exp(l) - l - 1.0)))
    gain = _gain_from_mu(model, images, mu, var_index)
    return kl, gain, float(m.var()), float(np.exp(l).mean())


def noise_injection_experiment(model: VaeModel, dataset, var_index: int,
                               schedule: NoiseSchedule = None,
                               config: TrainConfig = None, log_fn=None) -> ExperimentLog:
    """Degrade one active latent with growing Gaussian noise and watch it collapse.

    Variables already inactive at the start are pinned to the prior for the
    whole run. Phases: ``baseline`` (no training), ``inject`` (one epoch per
    amplitude increment until the gain drops below the KL contribution or the
    maximum amplitude is reached), ``hold`` (fixed amplitude, until the variable
    classifies as inactive or ``hold_epochs`` run out), ``recover`` (noise
    removed). The model is trained in place.
    """
    schedule = schedule or NoiseSchedule()
    config = replace(config or TrainConfig(), epochs=1).validate()
    _check_index(model, var_index)
    report = classify_variables(latent_stats(model, dataset))
    if report.status[var_index] == "inactive":
        raise PreconditionError(f"latent variable {var_index} is already inactive")
    frozen = np.zeros(model.latent_dim, dtype=bool)
    frozen[report.inactive] = True
    log = ExperimentLog(var_index, report.inactive)
    images = dataset.images
    rng = Rng(config.seed).child(3)
    opt = model.optimizer(config.learning_rate)

    def record(phase, amp):
        kl, gain, gv, ml = probe_variable(model, images, var_index, frozen)
        rec = ProbeRecord(len(log.records), phase, amp, kl, gain, gv, ml)
        log.records.append(rec)
        if log_fn:
            log_fn(rec)
        return rec

    def epoch(amp):
        train(model, dataset, config, optimizer=opt, rng=rng,
              noise=LatentNoise(var_index, amp), frozen=frozen)

    record("baseline", 0.0)
    amp = 0.0
    while True:
        amp = min(amp + max(schedule.step, 0.0), schedule.max_amplitude)
        epoch(amp)
        rec = record("inject", amp)
        if rec.reconstruction_gain < rec.kl_contribution:
            break
        if schedule.step <= 0 or amp >= schedule.max_amplitude:
            break
    for _ in range(schedule.hold_epochs):
        epoch(amp)
        rec = record("hold", amp)
        if schedule.stop_hold_on_collapse and is_inactive(rec.global_mu_variance,
                                                          rec.mean_local_variance):
            break
    for _ in range(schedule.recovery_epochs):
        epoch(0.0)
        record("recover", 0.0)
    return log
