"""Truncated stochastic amplitude-flow refinement.

One sensing equation is processed per iteration. The update direction is the
(Wirtinger) gradient of ``0.5 * (psi_i - |a_i^H z|)^2``, and it is discarded
when ``|a_i^H z| < psi_i / (1 + gamma)``. The step is either a constant ``mu``
or the Kaczmarz step ``1 / ||a_i||^2``.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels
from .core import (
    DataError, DivergenceError, Field, Iterate, MeasurementSet, NumericalError,
    SeedLike, SensingEnsemble, Signal, align_phase, amplitude_loss, as_vector, describe_seed,
    make_rng, relative_error, _psi,
)

log = logging.getLogger(__name__)

#: A run counts as an exact recovery below this relative error.
SUCCESS_THRESHOLD = 1e-5
DIVERGENCE_LIMIT = 1e6
PLATEAU_RTOL = 1e-12
PLATEAU_PASSES = 5


class StepRule(str, enum.Enum):
    CONSTANT = "constant"
    KACZMARZ = "kaczmarz"


class Sampling(str, enum.Enum):
    UNIFORM = "uniform"
    NORM = "norm"
    CYCLIC = "cyclic"


def default_mu(n: int, field: Field | str) -> float:
    return (0.8 if Field(field) is Field.REAL else 1.2) / n


@dataclass(frozen=True)
class SolverConfig:
    """Refinement settings.

    ``mu=None`` resolves to ``0.8/n`` (real) or ``1.2/n`` (complex);
    ``sampling=None`` resolves to norm-proportional sampling for the Kaczmarz
    rule and uniform sampling otherwise. ``target_rel_err=0`` disables the
    early stop on known ground truth.
    """

    gamma: float = 0.7
    step_rule: StepRule = StepRule.KACZMARZ
    mu: Optional[float] = None
    sampling: Optional[Sampling] = None
    max_passes: float = 1000.0
    target_rel_err: float = 0.0
    seed: SeedLike = None

    def __post_init__(self):
        object.__setattr__(self, "step_rule", StepRule(self.step_rule))
        if self.sampling is not None:
            object.__setattr__(self, "sampling", Sampling(self.sampling))
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.mu is not None and not self.mu > 0:
            raise ValueError("mu must be positive")
        if not self.max_passes > 0:
            raise ValueError("max_passes must be positive")
        if self.target_rel_err < 0:
            raise ValueError("target_rel_err must be nonnegative")

    def resolved(self, n: int, field: Field | str) -> "SolverConfig":
        """Copy with ``mu`` and ``sampling`` filled in for a problem size."""
        mu = default_mu(n, field) if self.mu is None else self.mu
        sampling = self.sampling
        if sampling is None:
            sampling = Sampling.NORM if self.step_rule is StepRule.KACZMARZ else Sampling.UNIFORM
        return replace(self, mu=mu, sampling=sampling)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_rule"] = self.step_rule.value
        d["sampling"] = None if self.sampling is None else self.sampling.value
        d["seed"] = describe_seed(self.seed)
        return d


@dataclass
class RunTrace:
    """Per-pass history of one refinement run (entry 0 is the initial iterate)."""

    rel_err_per_pass: list
    loss_per_pass: list
    final: Iterate
    passes_used: float
    success: bool
    config: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        errs = self.rel_err_per_pass or [float("nan")] * len(self.loss_per_pass)
        with open(path, "w") as fh:
            fh.write("pass,rel_err,loss\n")
            for p, (e, l) in enumerate(zip(errs, self.loss_per_pass)):
                fh.write(f"{p},{e:.17g},{l:.17g}\n")

    def summary(self) -> dict:
        return {
            "passes_used": self.passes_used,
            "final_rel_err": self.rel_err_per_pass[-1] if self.rel_err_per_pass else None,
            "success": self.success,
            "config_echo": self.config,
        }


def truncation_indicator(inner, psi_i: float, gamma: float) -> bool:
    """Whether ``|a_i^H z| >= psi_i / (1 + gamma)``."""
    return bool(abs(inner) >= psi_i / (1.0 + gamma))


def _phase(c):
    a = abs(c)
    if a == 0:
        return 1.0
    return c / a


def _residual(a_i: np.ndarray, z: np.ndarray, psi_i: float, gamma: float):
    c = np.vdot(a_i, z)  # a_i^H z
    if not truncation_indicator(c, psi_i, gamma):
        return None
    return c - psi_i * _phase(c)


def _finite(z: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite iterate")
    return z


def stochastic_step(z, a_i, psi_i: float, mu: float, gamma: float = 0.7) -> np.ndarray:
    """One truncated constant-step update on equation ``i``."""
    zv = as_vector(z)
    a_i = np.asarray(a_i)
    if a_i.shape != zv.shape:
        raise ValueError("row and iterate dimensions differ")
    if not mu > 0:
        raise ValueError("mu must be positive")
    with np.errstate(all="ignore"):
        r = _residual(a_i, zv, psi_i, gamma)
        if r is None:
            return zv.copy()
        return _finite(zv - mu * r * a_i)


def kaczmarz_step(z, a_i, psi_i: float, gamma: float = 0.7) -> np.ndarray:
    """Truncated update with step ``1/||a_i||^2``.

    When it fires, the new iterate satisfies ``a_i^H z' = psi_i * phase(a_i^H z)``.
    """
    a_i = np.asarray(a_i)
    sq = float(np.vdot(a_i, a_i).real)
    if sq == 0:
        raise DataError("Kaczmarz step on a zero row")
    zv = as_vector(z)
    with np.errstate(all="ignore"):
        r = _residual(a_i, zv, psi_i, gamma)
        if r is None:
            return zv.copy()
        return _finite(zv - (r / sq) * a_i)


def sampling_probabilities(ens: SensingEnsemble) -> np.ndarray:
    return ens.row_sq_norms / ens.row_sq_norms.sum()


def sample_index(scheme: Sampling | str, ens: SensingEnsemble, step_counter: int,
                 rng: np.random.Generator) -> int:
    """Draw one equation index (0-based)."""
    scheme = Sampling(scheme)
    if scheme is Sampling.CYCLIC:
        return int(step_counter % ens.m)
    if scheme is Sampling.UNIFORM:
        return int(rng.integers(ens.m))
    return int(rng.choice(ens.m, p=sampling_probabilities(ens)))


def sample_indices(scheme: Sampling | str, ens: SensingEnsemble, start: int, count: int,
                   rng: np.random.Generator, probs: Optional[np.ndarray] = None) -> np.ndarray:
    """Vectorised :func:`sample_index` for ``count`` consecutive steps."""
    scheme = Sampling(scheme)
    if scheme is Sampling.CYCLIC:
        return (start + np.arange(count, dtype=np.int64)) % ens.m
    if scheme is Sampling.UNIFORM:
        return rng.integers(0, ens.m, size=count)
    p = sampling_probabilities(ens) if probs is None else probs
    return rng.choice(ens.m, size=count, p=p)


def _truncated_terms(z, ens: SensingEnsemble, meas, gamma: float) -> np.ndarray:
    zv = as_vector(z)
    psi = _psi(meas)
    if zv.size != ens.n or psi.size != ens.m:
        raise ValueError("dimension mismatch between iterate, ensemble and measurements")
    c = ens.apply(zv)
    ac = np.abs(c)
    keep = ac >= psi / (1.0 + gamma)
    ph = np.where(ac > 0, c / np.where(ac > 0, ac, 1.0), 1.0)
    return (c - psi * ph) * keep


def truncated_gradient(z, ens: SensingEnsemble, meas, gamma: float = 0.7) -> np.ndarray:
    """Sum over kept equations of ``(a_i^H z - psi_i phase(a_i^H z)) a_i``, unscaled."""
    return ens.rows.T @ _truncated_terms(z, ens, meas, gamma)


def taf_full_step(z, ens: SensingEnsemble, meas, mu: float, gamma: float = 0.7) -> np.ndarray:
    """Deterministic truncated amplitude-flow step ``z - (mu/m) grad``."""
    zv = as_vector(z)
    return _finite(zv - (mu / ens.m) * truncated_gradient(zv, ens, meas, gamma))


def regularity_inner_product(z, x, ens: SensingEnsemble, meas, gamma: float = 0.7) -> float:
    """``Re <h, grad / m>`` with ``h = z - x`` after aligning ``z`` to ``x``."""
    zv = align_phase(z, x)
    h = zv - as_vector(x)
    g = truncated_gradient(zv, ens, meas, gamma)
    return float(np.vdot(h, g).real) / ens.m


def run_staf(ens: SensingEnsemble, meas: MeasurementSet, z0, cfg: SolverConfig = SolverConfig(),
             truth: Optional[Signal] = None) -> RunTrace:
    """Refine ``z0`` with truncated single-equation updates.

    Runs ``max_passes * m`` steps, recording relative error (if ``truth`` is
    given) and loss after each pass of ``m`` steps. Stops early once the
    relative error drops below ``target_rel_err`` or, without ground truth,
    once the loss stalls (relative change below 1e-12 over 5 passes) or
    reaches the rounding floor ``0.5 * (n * eps)^2 * sum(psi^2)``.
    """
    z = np.array(as_vector(z0))
    if z.shape != (ens.n,):
        raise ValueError(f"initial iterate of shape {z.shape} for n={ens.n}")
    if np.iscomplexobj(z) and ens.field is Field.REAL:
        raise ValueError("complex iterate for a real ensemble")
    z = z.astype(ens.field.dtype)
    psi = np.ascontiguousarray(_psi(meas))
    if psi.size != ens.m:
        raise ValueError(f"{psi.size} measurements for {ens.m} sensing rows")
    cfg = cfg.resolved(ens.n, ens.field)
    log.debug("run_staf config: %s", cfg.to_dict())
    rng = make_rng(cfg.seed)
    A = ens.rows
    Ac = ens.conj_rows
    sq = ens.row_sq_norms
    if cfg.step_rule is StepRule.KACZMARZ and np.any(sq == 0):
        raise DataError("Kaczmarz rule needs nonzero rows")
    probs = sampling_probabilities(ens) if cfg.sampling is Sampling.NORM else None
    kaczmarz = cfg.step_rule is StepRule.KACZMARZ
    m = ens.m
    x = None if truth is None else as_vector(truth)
    floor = 0.5 * (ens.n * np.finfo(float).eps) ** 2 * float(psi @ psi)

    errs: list = []
    losses: list = []

    def record() -> Optional[float]:
        with np.errstate(over="ignore", invalid="ignore"):
            losses.append(amplitude_loss(z, ens, psi))
        if x is None:
            return None
        e = relative_error(z, x)
        errs.append(e)
        if not math.isfinite(e) or e > DIVERGENCE_LIMIT:
            raise DivergenceError(f"relative error {e:.3g} after {len(errs) - 1} passes")
        return e

    total = int(round(cfg.max_passes * m))
    done = 0
    e = record()
    while done < total:
        if e is not None and e < cfg.target_rel_err:
            break
        if x is None and (losses[-1] <= floor or _plateaued(losses)):
            break
        count = min(m, total - done)
        idx = sample_indices(cfg.sampling, ens, done, count, rng, probs)
        status = _kernels.staf_sweep(A, Ac, psi, sq, z, idx, cfg.mu, kaczmarz, cfg.gamma)
        if status < 0:
            if x is not None:
                raise DivergenceError(f"iterate overflowed after {done + count} steps")
            raise NumericalError(f"iterate overflowed after {done + count} steps")
        done += count
        e = record()

    passes = done / m
    success = bool(errs) and errs[-1] < SUCCESS_THRESHOLD
    return RunTrace(errs, losses, Iterate(z, passes), passes, success, cfg.to_dict())


def _plateaued(losses: list) -> bool:
    if losses and losses[-1] == 0.0:
        return True
    if len(losses) <= PLATEAU_PASSES:
        return False
    old, new = losses[-1 - PLATEAU_PASSES], losses[-1]
    return abs(old - new) <= PLATEAU_RTOL * max(abs(old), np.finfo(float).tiny)
