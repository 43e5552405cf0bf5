"""Signals, sensing ensembles, amplitude measurements and distances.

Conventions used throughout the package:

* inner products conjugate the sensing vector, ``<a_i, z> = a_i^H z``;
* indices are 0-based;
* every stochastic function takes an explicit ``seed`` that may be an int, a
  :class:`numpy.random.SeedSequence` or a :class:`numpy.random.Generator`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


class NumericalError(ArithmeticError):
    """An iteration produced a non-finite or degenerate quantity."""


class DivergenceError(NumericalError):
    """A solver run left every reasonable neighbourhood of the solution."""


class DataError(ValueError):
    """Input data violates a structural requirement (e.g. a zero sensing row)."""


class Field(str, enum.Enum):
    REAL = "real"
    COMPLEX = "complex"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64) if self is Field.REAL else np.dtype(np.complex128)

    @classmethod
    def of(cls, arr: np.ndarray) -> "Field":
        return cls.COMPLEX if np.iscomplexobj(arr) else cls.REAL


def make_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def describe_seed(seed: SeedLike) -> dict[str, Any]:
    """JSON-friendly provenance record for ``seed``."""
    if seed is None:
        return {"kind": "none"}
    if isinstance(seed, (int, np.integer)):
        return {"kind": "int", "seed": int(seed)}
    if isinstance(seed, np.random.SeedSequence):
        return {"kind": "seed_sequence", "entropy": int(seed.entropy),
                "spawn_key": [int(k) for k in seed.spawn_key]}
    return {"kind": "generator"}


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} has non-finite entries")


@dataclass(frozen=True)
class Signal:
    """Unknown vector ``x``."""

    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("signal must be a non-empty 1-D vector")
        arr = arr.astype(Field.of(arr).dtype, copy=True)
        _check_finite(arr, "signal")
        object.__setattr__(self, "entries", _frozen(arr))

    @property
    def n(self) -> int:
        return self.entries.size

    @property
    def field(self) -> Field:
        return Field.of(self.entries)

    def norm(self) -> float:
        return float(np.linalg.norm(self.entries))


@dataclass(frozen=True)
class SensingEnsemble:
    """Stack of sensing vectors ``a_1..a_m`` as the rows of an ``(m, n)`` array."""

    rows: np.ndarray
    row_sq_norms: np.ndarray = field(init=False, repr=False)
    conj_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        arr = np.asarray(self.rows)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("sensing rows must form a non-empty (m, n) array")
        arr = arr.astype(Field.of(arr).dtype, copy=True)
        _check_finite(arr, "sensing rows")
        sq = np.einsum("ij,ij->i", arr.real, arr.real)
        if np.iscomplexobj(arr):
            sq = sq + np.einsum("ij,ij->i", arr.imag, arr.imag)
        object.__setattr__(self, "rows", _frozen(arr))
        object.__setattr__(self, "row_sq_norms", _frozen(sq))
        object.__setattr__(self, "conj_rows", _frozen(arr.conj()) if np.iscomplexobj(arr) else self.rows)

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    @property
    def n(self) -> int:
        return self.rows.shape[1]

    @property
    def field(self) -> Field:
        return Field.of(self.rows)

    def apply(self, z: np.ndarray) -> np.ndarray:
        """All inner products ``a_i^H z``."""
        return self.conj_rows @ z


@dataclass(frozen=True)
class MeasurementSet:
    """Amplitude data ``psi`` with its noise level and RNG provenance."""

    psi: np.ndarray
    noise_sigma: float = 0.0
    seed_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.psi, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("psi must be a non-empty 1-D vector")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        _check_finite(arr, "psi")
        object.__setattr__(self, "psi", _frozen(arr.copy()))

    @property
    def m(self) -> int:
        return self.psi.size

    @property
    def y(self) -> np.ndarray:
        """Intensities ``psi_i ** 2``."""
        return self.psi * self.psi


@dataclass(frozen=True)
class Iterate:
    """Current estimate ``z`` together with how many data passes produced it."""

    z: np.ndarray
    pass_count: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.z)
        if arr.ndim != 1:
            raise ValueError("iterate must be a 1-D vector")
        arr = arr.astype(Field.of(arr).dtype, copy=True)
        _check_finite(arr, "iterate")
        object.__setattr__(self, "z", _frozen(arr))


def as_vector(obj) -> np.ndarray:
    """Underlying array of a Signal, Iterate or array-like."""
    if isinstance(obj, Signal):
        return obj.entries
    if isinstance(obj, Iterate):
        return obj.z
    return np.asarray(obj)


def _psi(obj) -> np.ndarray:
    return obj.psi if isinstance(obj, MeasurementSet) else np.asarray(obj, dtype=np.float64)


def _check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def _gaussian(rng: np.random.Generator, shape, fld: Field) -> np.ndarray:
    if fld is Field.REAL:
        return rng.standard_normal(shape)
    # CN(0, 1): N(0, 1/2) per component
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def gen_gaussian_signal(n: int, field: Field | str = Field.REAL, seed: SeedLike = None) -> Signal:
    """Draw ``x ~ N(0, I_n)`` or ``CN(0, I_n)``."""
    n = _check_positive_int(n, "n")
    return Signal(_gaussian(make_rng(seed), n, Field(field)))


def gen_gaussian_sensing(m: int, n: int, field: Field | str = Field.REAL,
                         seed: SeedLike = None) -> SensingEnsemble:
    """Draw ``m`` i.i.d. Gaussian sensing vectors of length ``n``."""
    m = _check_positive_int(m, "m")
    n = _check_positive_int(n, "n")
    fld = Field(field)
    rng = make_rng(seed)
    rows = _gaussian(rng, (m, n), fld)
    # zero rows have probability zero; redraw them if they ever occur
    zero = ~np.any(rows != 0, axis=1)
    while np.any(zero):
        rows[zero] = _gaussian(rng, (int(zero.sum()), n), fld)
        zero = ~np.any(rows != 0, axis=1)
    return SensingEnsemble(rows)


def measure(ens: SensingEnsemble, x, sigma: float = 0.0, seed: SeedLike = None) -> MeasurementSet:
    """Amplitudes ``|a_i^H x| + eta_i`` with ``eta_i ~ N(0, sigma^2 ||x||^2)``.

    Noisy amplitudes are not clamped, so they may be negative.
    """
    xv = as_vector(x)
    if xv.ndim != 1 or xv.size != ens.n:
        raise ValueError(f"signal length {xv.size} does not match ensemble n={ens.n}")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    psi = np.abs(ens.apply(xv))
    if sigma > 0:
        rng = make_rng(seed)
        psi = psi + sigma * np.linalg.norm(xv) * rng.standard_normal(ens.m)
    return MeasurementSet(psi, float(sigma), describe_seed(seed))


def align_phase(z, x) -> np.ndarray:
    """Return ``z`` rotated by the global sign/phase that brings it closest to ``x``."""
    zv, xv = as_vector(z), as_vector(x)
    if zv.shape != xv.shape:
        raise ValueError(f"dimension mismatch: {zv.shape} vs {xv.shape}")
    c = np.vdot(zv, xv)  # z^H x
    if np.iscomplexobj(zv) or np.iscomplexobj(xv):
        ph = c / abs(c) if abs(c) > 0 else 1.0
        return zv * ph
    return zv if c >= 0 else -zv


def dist(z, x) -> float:
    """Distance from ``z`` to the solution set ``{x e^{i phi}}`` (``{+-x}`` if real)."""
    zv, xv = as_vector(z), as_vector(x)
    if zv.shape != xv.shape:
        raise ValueError(f"dimension mismatch: {zv.shape} vs {xv.shape}")
    if np.iscomplexobj(zv) or np.iscomplexobj(xv):
        # the minimiser over phi is arg(x^H z); evaluating the aligned difference
        # directly avoids cancellation in ||z||^2 + ||x||^2 - 2|x^H z|
        return float(np.linalg.norm(align_phase(zv, xv) - xv))
    return float(min(np.linalg.norm(zv - xv), np.linalg.norm(zv + xv)))


def relative_error(z, x) -> float:
    nx = np.linalg.norm(as_vector(x))
    if nx == 0:
        raise ValueError("relative error is undefined for x = 0")
    return dist(z, x) / float(nx)


def amplitude_loss(z, ens: SensingEnsemble, meas) -> float:
    """``0.5 * sum_i (psi_i - |a_i^H z|)^2``."""
    zv = as_vector(z)
    psi = _psi(meas)
    if zv.size != ens.n or psi.size != ens.m:
        raise ValueError("dimension mismatch between iterate, ensemble and measurements")
    r = psi - np.abs(ens.apply(zv))
    return 0.5 * float(r @ r)
