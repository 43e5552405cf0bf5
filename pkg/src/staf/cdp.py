"""Coded diffraction patterns: ``psi^(k) = |F D^(k) x|`` for ``k = 1..K``.

``F`` is the unitary DFT and ``D^(k)`` a diagonal mask with entries drawn from
``{1, -1, j, -j}``, so every block operator ``B_k = F D^(k)`` is unitary and
every equivalent sensing row has unit norm. All products go through the FFT.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    DivergenceError, Iterate, NumericalError, SeedLike, SensingEnsemble, as_vector,
    make_rng, relative_error,
)
from .initialization import default_init_size, random_unit
from .refine import DIVERGENCE_LIMIT, SUCCESS_THRESHOLD, RunTrace

PHASE_DELAYS = np.array([1.0, -1.0, 1j, -1j])


@dataclass(frozen=True)
class MaskSet:
    masks: np.ndarray  # (K, n)

    @property
    def K(self) -> int:
        return self.masks.shape[0]

    @property
    def n(self) -> int:
        return self.masks.shape[1]


@dataclass(frozen=True)
class CdpMeasurements:
    psi_blocks: np.ndarray  # (K, n)

    @property
    def m(self) -> int:
        return self.psi_blocks.size


def gen_masks(n: int, K: int, seed: SeedLike = None) -> MaskSet:
    if n < 1 or K < 1:
        raise ValueError("n and K must be positive")
    masks = make_rng(seed).choice(PHASE_DELAYS, size=(K, n))
    masks.setflags(write=False)
    return MaskSet(masks)


def _masks(masks) -> np.ndarray:
    return masks.masks if isinstance(masks, MaskSet) else np.atleast_2d(masks)


def _psi_blocks(meas) -> np.ndarray:
    return meas.psi_blocks if isinstance(meas, CdpMeasurements) else np.atleast_2d(meas)


def cdp_apply(z, masks) -> np.ndarray:
    """``B_k z`` for every block, shape ``(K, n)``."""
    M = _masks(masks)
    zv = as_vector(z)
    if zv.shape != (M.shape[1],):
        raise ValueError(f"vector of length {zv.size} for masks of length {M.shape[1]}")
    return np.fft.fft(M * zv[None, :], axis=1, norm="ortho")


def cdp_adjoint(R, masks) -> np.ndarray:
    """``sum_k B_k^H R_k``."""
    M = _masks(masks)
    return (np.conj(M) * np.fft.ifft(R, axis=1, norm="ortho")).sum(axis=0)


def cdp_forward(x, masks) -> CdpMeasurements:
    return CdpMeasurements(np.abs(cdp_apply(x, masks)))


def dft_matrix(n: int) -> np.ndarray:
    j = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(j, j) / n) / math.sqrt(n)


def as_row_ensemble(masks) -> SensingEnsemble:
    """Explicit ``(nK, n)`` sensing rows (block-major); small ``n`` only.

    Row ``k*n + j`` is ``a`` with ``a^H x = (F D^(k) x)_j``.
    """
    M = _masks(masks)
    F = dft_matrix(M.shape[1])
    rows = np.concatenate([np.conj(F * mk[None, :]) for mk in M], axis=0)
    return SensingEnsemble(rows)


def _truncated_residual(U: np.ndarray, psi: np.ndarray, gamma: float) -> np.ndarray:
    a = np.abs(U)
    ph = np.where(a > 0, U / np.where(a > 0, a, 1.0), 1.0)
    return (U - psi * ph) * (a >= psi / (1.0 + gamma))


def block_staf_step(z, masks, psi_blocks, k: int, mu: float = 1.0, gamma: float = 0.7) -> np.ndarray:
    """Truncated update using every pattern of mask ``k`` (0-based).

    ``z - mu * B_k^H r`` with ``r`` the truncated amplitude residual of block
    ``k``. Since ``B_k`` is unitary, ``mu = 1`` projects the kept patterns onto
    their measured moduli.
    """
    M = _masks(masks)
    psi = _psi_blocks(psi_blocks)
    if not 0 <= k < M.shape[0]:
        raise ValueError(f"block index {k} out of range for K={M.shape[0]}")
    if psi.shape != M.shape:
        raise ValueError(f"measurement blocks {psi.shape} do not match masks {M.shape}")
    zv = np.asarray(as_vector(z), dtype=np.complex128)
    with np.errstate(all="ignore"):
        U = np.fft.fft(M[k] * zv, norm="ortho")
        r = _truncated_residual(U, psi[k], gamma)
        out = zv - mu * np.conj(M[k]) * np.fft.ifft(r, norm="ortho")
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite iterate in block step")
    return out


def _selection(psi: np.ndarray, size: int) -> np.ndarray:
    flat = psi.ravel()
    keep = np.zeros(flat.size, dtype=bool)
    keep[np.argsort(-flat, kind="stable")[:size]] = True
    return keep.reshape(psi.shape)


def norm_estimate(psi_blocks) -> float:
    """``||x||`` recovered exactly from the block energy identity."""
    psi = _psi_blocks(psi_blocks)
    return math.sqrt(float(np.sum(psi * psi)) / psi.shape[0])


def cdp_init(masks, psi_blocks, solver: str = "vr_opi", size: Optional[int] = None,
             passes: int = 100, eta: float = 1.0, seed: SeedLike = None) -> Iterate:
    """Orthogonality-promoting initialization for CDP data.

    Rows have unit norm, so the kept set is simply the largest moduli over all
    ``nK`` patterns. The variance-reduced solver works block-wise: each epoch
    is one full product plus ``K`` sampled block corrections (two data passes).
    """
    M = _masks(masks)
    psi = _psi_blocks(psi_blocks)
    K, n = M.shape
    size = default_init_size(K * n) if size is None else size
    S = _selection(psi, size)
    rng = make_rng(seed)

    def Y(u):
        return cdp_adjoint(S * cdp_apply(u, M), M) / size

    u = random_unit(n, True, rng)
    if solver in ("power", "Power"):
        for _ in range(passes):
            v = Y(u)
            u = v / np.linalg.norm(v)
    elif solver in ("vr_opi", "VrOpi", "vr-opi"):
        # per-block step scaled by the rows a block holds on average
        step = eta * size / K
        for _ in range(max(1, passes // 2)):
            anchor = u.copy()
            w = Y(anchor)
            for kk in rng.integers(0, K, size=K):
                d = np.fft.fft(M[kk] * (u - anchor), norm="ortho")
                g = np.conj(M[kk]) * np.fft.ifft(S[kk] * d, norm="ortho") * (K / size)
                nu = u + step * (g + w)
                nn = np.linalg.norm(nu)
                if nn > 0 and np.isfinite(nn):
                    u = nu / nn
    else:
        raise ValueError(f"unknown initialization solver {solver!r}")
    return Iterate(norm_estimate(psi) * u)


def run_block_staf(masks, psi_blocks, z0, mu: float = 1.0, gamma: float = 0.7,
                   max_passes: int = 300, target_rel_err: float = 0.0, truth=None,
                   seed: SeedLike = None) -> RunTrace:
    """Block refinement: each pass draws ``K`` mask indices uniformly at random."""
    M = _masks(masks)
    psi = _psi_blocks(psi_blocks)
    K = M.shape[0]
    rng = make_rng(seed)
    z = np.array(as_vector(z0), dtype=np.complex128)
    x = None if truth is None else as_vector(truth)
    errs, losses = [], []

    def record():
        R = np.abs(cdp_apply(z, M)) - psi
        losses.append(0.5 * float(np.sum(R * R)))
        if x is None:
            return None
        e = relative_error(z, x)
        errs.append(e)
        if not math.isfinite(e) or e > DIVERGENCE_LIMIT:
            raise DivergenceError(f"relative error {e:.3g}")
        return e

    e = record()
    p = 0
    while p < max_passes:
        if e is not None and e < target_rel_err:
            break
        for kk in rng.integers(0, K, size=K):
            z = block_staf_step(z, M, psi, int(kk), mu, gamma)
        p += 1
        e = record()
    success = bool(errs) and errs[-1] < SUCCESS_THRESHOLD
    cfg = {"mu": mu, "gamma": gamma, "max_passes": max_passes, "K": K}
    return RunTrace(errs, losses, Iterate(z, float(p)), float(p), success, cfg)
