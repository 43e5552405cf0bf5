"""Orthogonality-promoting initialization.

The rows most aligned with the unknown signal (largest ``psi_i / ||a_i||``)
are normalised and stacked; the principal eigenvector of their averaged outer
product, rescaled by a norm estimate, is the initial guess. Two eigen-solvers
are provided: the power method and a variance-reduced stochastic solver that
touches one row per inner iteration.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from . import _kernels
from .core import (
    DataError, Iterate, MeasurementSet, NumericalError, SeedLike, SensingEnsemble,
    make_rng, _psi,
)

log = logging.getLogger(__name__)

DENSE_EIG_MAX_N = 512

Callback = Callable[[np.ndarray, float], None]


def default_init_size(m: int) -> int:
    """Number of rows kept for the eigenproblem, ``ceil(m / 6)``."""
    return max(1, math.ceil(m / 6))


@dataclass(frozen=True)
class InitProblem:
    """Normalised selected rows ``d_i = a_i / ||a_i||`` (one per row of ``rows``)."""

    selected: np.ndarray
    rows: np.ndarray
    source_dims: tuple[int, int]

    @property
    def size(self) -> int:
        return self.rows.shape[0]

    @property
    def n(self) -> int:
        return self.rows.shape[1]

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.rows)

    @property
    def conj_rows(self) -> np.ndarray:
        return self.rows.conj() if self.is_complex else self.rows

    @classmethod
    def from_rows(cls, rows, selected=None, source_dims=None) -> "InitProblem":
        """Build a problem directly from (not necessarily normalised) rows."""
        rows = np.atleast_2d(np.asarray(rows))
        rows = rows.astype(np.complex128 if np.iscomplexobj(rows) else np.float64)
        norms = np.linalg.norm(rows, axis=1)
        if np.any(norms == 0):
            raise DataError("zero row in eigenproblem data")
        rows = np.ascontiguousarray(rows / norms[:, None])
        rows.setflags(write=False)
        if selected is None:
            selected = np.arange(rows.shape[0])
        if source_dims is None:
            source_dims = (rows.shape[0], rows.shape[1])
        return cls(np.asarray(selected), rows, tuple(source_dims))

    def dense(self) -> np.ndarray:
        """Explicit ``n x n`` matrix; only for small ``n``."""
        return self.rows.T @ self.conj_rows / self.size


@dataclass(frozen=True)
class EigenReport:
    lambda1: float
    lambda2: float
    delta: Optional[float]
    v1: Optional[np.ndarray] = None

    @property
    def defined(self) -> bool:
        return self.delta is not None

    def to_dict(self) -> dict:
        return {"lambda1": self.lambda1, "lambda2": self.lambda2, "delta": self.delta}


@dataclass(frozen=True)
class VrOpiConfig:
    """Variance-reduced solver settings.

    ``eta`` is a step on the normalised rows (each ``d_i d_i^H`` has unit
    spectral norm). ``epoch_len=None`` means one pass over the selected rows.
    """

    eta: float = 1.0
    epochs: int = 100
    epoch_len: Optional[int] = None
    seed: SeedLike = None

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.epoch_len is not None and self.epoch_len < 1:
            raise ValueError("epoch_len must be positive")


def select_index_set(meas: MeasurementSet, ens: SensingEnsemble, size: int) -> InitProblem:
    """Keep the ``size`` rows with the largest ``psi_i / ||a_i||``.

    Ties go to the lower index. The returned indices are sorted.
    """
    psi = _psi(meas)
    m = ens.m
    if psi.size != m:
        raise ValueError(f"{psi.size} measurements for {m} sensing rows")
    if isinstance(size, bool) or int(size) != size or not 1 <= size <= m:
        raise ValueError(f"size must be in [1, {m}], got {size!r}")
    norms = np.sqrt(ens.row_sq_norms)
    if np.any(norms == 0):
        raise DataError("sensing ensemble contains a zero row")
    ratio = psi / norms
    order = np.argsort(-ratio, kind="stable")
    sel = np.sort(order[: int(size)])
    rows = np.ascontiguousarray(ens.rows[sel] / norms[sel, None])
    rows.setflags(write=False)
    return InitProblem(sel, rows, (m, ens.n))


def apply_Y(prob: InitProblem, u) -> np.ndarray:
    """Matrix-free product ``(1/|I|) sum_i d_i d_i^H u``."""
    u = np.asarray(u)
    if u.shape != (prob.n,):
        raise ValueError(f"vector of shape {u.shape} for n={prob.n}")
    return prob.rows.T @ (prob.conj_rows @ u) / prob.size


def random_unit(n: int, complex_: bool, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal(n)
    if complex_:
        u = u + 1j * rng.standard_normal(n)
    return u / np.linalg.norm(u)


def power_method(prob: InitProblem, iters: int = 100, seed: SeedLike = None,
                 u0=None, callback: Optional[Callback] = None) -> np.ndarray:
    """Normalised power iterations from a random (or given) unit vector.

    ``callback(u, passes)`` is invoked after each iteration; one iteration is
    one pass over the selected rows.
    """
    if iters < 1:
        raise ValueError("iters must be positive")
    rng = make_rng(seed)
    u = random_unit(prob.n, prob.is_complex, rng) if u0 is None else np.array(u0, dtype=prob.rows.dtype)
    u = u / np.linalg.norm(u)
    restarts = 0
    t = 0
    while t < iters:
        v = apply_Y(prob, u)
        nv = np.linalg.norm(v)
        if nv == 0:
            if restarts == 3:
                raise NumericalError("power method hit the null space repeatedly")
            restarts += 1
            u = random_unit(prob.n, prob.is_complex, rng)
            continue
        u = v / nv
        t += 1
        if callback is not None:
            callback(u, float(t))
    return u


def vr_opi(prob: InitProblem, cfg: VrOpiConfig = VrOpiConfig(), u0=None,
           callback: Optional[Callback] = None) -> np.ndarray:
    """Variance-reduced stochastic principal eigenvector.

    Each epoch evaluates the full product at the anchor once and then takes
    ``epoch_len`` single-row corrected steps with uniformly sampled rows.
    ``callback(u, passes)`` runs after each epoch with the cumulative number
    of data passes (one for the anchor product plus ``epoch_len / |I|``).
    """
    rng = make_rng(cfg.seed)
    k = prob.size
    T = cfg.epoch_len or k
    u = random_unit(prob.n, prob.is_complex, rng) if u0 is None else np.array(u0, dtype=prob.rows.dtype)
    u = np.ascontiguousarray(u / np.linalg.norm(u))
    rows, crows = prob.rows, np.ascontiguousarray(prob.conj_rows)
    passes = 0.0
    for _ in range(cfg.epochs):
        anchor = u.copy()
        w = apply_Y(prob, anchor)
        idx = rng.integers(0, k, size=T)
        skipped = _kernels.vr_opi_epoch(rows, crows, u, anchor, w, cfg.eta, idx)
        if skipped > T / 10:
            raise NumericalError(f"{skipped} of {T} variance-reduced steps degenerated")
        passes += 1.0 + T / k
        if callback is not None:
            callback(u, passes)
    return u


def scale_estimate(u, meas) -> Iterate:
    """Rescale a unit vector by ``sqrt(mean(psi_i^2))``."""
    u = np.asarray(u)
    if abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise ValueError("scale_estimate expects a unit vector")
    psi = _psi(meas)
    return Iterate(math.sqrt(float(np.mean(psi * psi))) * u)


def eigen_report(prob: InitProblem) -> EigenReport:
    """Two leading eigenvalues and the normalised eigengap.

    Dense decomposition up to ``n = 512``; above that a Lanczos solver run on
    the matrix-free operator.
    """
    n = prob.n
    if n <= DENSE_EIG_MAX_N:
        w, V = np.linalg.eigh(prob.dense())
        lam1 = float(w[-1])
        lam2 = float(w[-2]) if n > 1 else 0.0
        v1 = V[:, -1]
    else:
        op = LinearOperator((n, n), matvec=lambda v: apply_Y(prob, np.ravel(v)),
                            dtype=prob.rows.dtype)
        w, V = eigsh(op, k=2, which="LA", tol=1e-10)
        order = np.argsort(w)[::-1]
        lam1, lam2 = float(w[order[0]]), float(w[order[1]])
        v1 = V[:, order[0]]
    lam1 = max(lam1, 0.0)
    lam2 = min(max(lam2, 0.0), lam1)
    delta = (lam1 - lam2) / lam1 if lam1 > 0 else None
    return EigenReport(lam1, lam2, delta, v1)


def init_orthogonality_promoting(ens: SensingEnsemble, meas: MeasurementSet,
                                 solver: str = "vr_opi", size: Optional[int] = None,
                                 iters: int = 100, vr: Optional[VrOpiConfig] = None,
                                 seed: SeedLike = None) -> Iterate:
    """Select rows, solve the eigenproblem and rescale.

    ``iters`` is the power-method iteration count; the variance-reduced solver
    is configured through ``vr`` (its seed defaults to ``seed``).
    """
    size = default_init_size(ens.m) if size is None else size
    prob = select_index_set(meas, ens, size)
    if solver in ("power", "Power"):
        u = power_method(prob, iters, seed=seed)
    elif solver in ("vr_opi", "VrOpi", "vr-opi"):
        cfg = vr or VrOpiConfig(seed=seed)
        if cfg.seed is None and seed is not None:
            cfg = VrOpiConfig(cfg.eta, cfg.epochs, cfg.epoch_len, seed)
        u = vr_opi(prob, cfg)
    else:
        raise ValueError(f"unknown initialization solver {solver!r}")
    log.debug("init: solver=%s size=%d of m=%d", solver, size, ens.m)
    return scale_estimate(u, meas)
