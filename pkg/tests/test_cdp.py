import numpy as np
import pytest

from staf.cdp import (
    PHASE_DELAYS, MaskSet, as_row_ensemble, block_staf_step, cdp_adjoint, cdp_apply,
    cdp_forward, cdp_init, dft_matrix, gen_masks, norm_estimate, run_block_staf,
)
from staf.core import NumericalError, gen_gaussian_signal, measure, relative_error
from staf.initialization import eigen_report, select_index_set
from staf.refine import stochastic_step


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_masks_are_unimodular_and_balanced():
    M = gen_masks(12_500, 8, 0).masks
    assert np.allclose(np.abs(M), 1.0)
    for s in PHASE_DELAYS:
        assert 0.23 <= np.mean(M == s) <= 0.27
    np.testing.assert_array_equal(gen_masks(10, 3, 5).masks, gen_masks(10, 3, 5).masks)
    with pytest.raises(ValueError):
        gen_masks(0, 3)


def test_forward_examples():
    n = 16
    e1 = np.zeros(n)
    e1[0] = 1.0
    ones = np.ones((1, n), dtype=complex)
    np.testing.assert_allclose(cdp_forward(e1, ones).psi_blocks, np.full((1, n), n ** -0.5))
    np.testing.assert_array_equal(cdp_forward(np.zeros(n), gen_masks(n, 3, 0)).psi_blocks, 0.0)
    with pytest.raises(ValueError):
        cdp_forward(np.ones(n + 1), ones)


def test_forward_isometry():
    rng = np.random.default_rng(0)
    x = crandn(rng, 256)
    psi = cdp_forward(x, gen_masks(256, 8, 1)).psi_blocks
    np.testing.assert_allclose(np.linalg.norm(psi, axis=1), np.linalg.norm(x), rtol=1e-12)
    assert np.sum(psi ** 2) == pytest.approx(8 * np.linalg.norm(x) ** 2, rel=1e-9)
    assert norm_estimate(psi) == pytest.approx(np.linalg.norm(x), rel=1e-12)


@pytest.mark.parametrize("n", [8, 64, 256])
def test_adjoint(n):
    rng = np.random.default_rng(n)
    masks = gen_masks(n, 4, n)
    for _ in range(100):
        z, R = crandn(rng, n), crandn(rng, 4, n)
        lhs = np.vdot(cdp_apply(z, masks).ravel(), R.ravel())
        rhs = np.vdot(z, cdp_adjoint(R, masks))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("n", [1, 5, 32, 64])
def test_fft_matches_dense_dft(n):
    rng = np.random.default_rng(n)
    masks = gen_masks(n, 3, n)
    x = crandn(rng, n)
    F = dft_matrix(n)
    dense = np.stack([F @ (m * x) for m in masks.masks])
    np.testing.assert_allclose(cdp_apply(x, masks), dense, atol=1e-10)
    np.testing.assert_allclose(np.abs(dense), cdp_forward(x, masks).psi_blocks, atol=1e-10)


def test_row_ensemble_equivalence():
    rng = np.random.default_rng(1)
    masks = gen_masks(16, 3, 2)
    ens = as_row_ensemble(masks)
    x = crandn(rng, 16)
    np.testing.assert_allclose(measure(ens, x).psi, cdp_forward(x, masks).psi_blocks.ravel(), atol=1e-12)
    np.testing.assert_allclose(ens.row_sq_norms, 1.0)


def test_block_step_fixed_point_and_validation():
    rng = np.random.default_rng(2)
    x = crandn(rng, 32)
    masks = gen_masks(32, 4, 3)
    psi = cdp_forward(x, masks).psi_blocks
    for k in range(4):
        np.testing.assert_allclose(block_staf_step(x, masks, psi, k), x, atol=1e-12)
        np.testing.assert_allclose(block_staf_step(1j * x, masks, psi, k), 1j * x, atol=1e-12)
    with pytest.raises(ValueError):
        block_staf_step(x, masks, psi, 4)
    with pytest.raises(NumericalError):
        block_staf_step(x, masks, psi * np.inf, 0)


def test_block_step_degenerate_case_is_stochastic_step():
    ones = np.ones((1, 1), dtype=complex)
    for z, psi in ((1.5, 2.0), (1.0, 2.0), (-0.7, 0.5)):
        got = block_staf_step(np.array([z + 0j]), ones, np.array([[psi]]), 0, mu=0.3)
        want = stochastic_step(np.array([z + 0j]), np.array([1.0 + 0j]), psi, 0.3)
        np.testing.assert_allclose(got, want)


def test_unit_block_step_projects_kept_moduli():
    rng = np.random.default_rng(4)
    x = crandn(rng, 64)
    masks = gen_masks(64, 2, 5)
    psi = cdp_forward(x, masks).psi_blocks
    z = x + 0.05 * crandn(rng, 64)
    U = np.abs(cdp_apply(block_staf_step(z, masks, psi, 1, mu=1.0), masks)[1])
    kept = np.abs(cdp_apply(z, masks)[1]) >= psi[1] / 1.7
    np.testing.assert_allclose(U[kept], psi[1][kept], rtol=1e-10)


def test_init_matches_row_ensemble_eigenvector():
    rng = np.random.default_rng(6)
    n, K = 24, 6
    x = crandn(rng, n)
    masks = gen_masks(n, K, 7)
    psi = cdp_forward(x, masks)
    ens = as_row_ensemble(masks)
    size = 30
    v1 = eigen_report(select_index_set(measure(ens, x), ens, size)).v1
    for solver in ("power", "vr_opi"):
        z0 = cdp_init(masks, psi, solver, size=size, passes=400, seed=1).z
        assert abs(np.vdot(v1, z0)) ** 2 / np.vdot(z0, z0).real == pytest.approx(1.0, abs=1e-6)
        assert np.linalg.norm(z0) == pytest.approx(np.linalg.norm(x))
    with pytest.raises(ValueError):
        cdp_init(masks, psi, "svd")


def test_run_from_truth_and_determinism():
    rng = np.random.default_rng(8)
    x = crandn(rng, 64)
    masks = gen_masks(64, 8, 9)
    psi = cdp_forward(x, masks)
    tr = run_block_staf(masks, psi, x, truth=x, target_rel_err=1e-5)
    assert tr.success and tr.passes_used == 0
    z0 = cdp_init(masks, psi, seed=3)
    a = run_block_staf(masks, psi, z0, max_passes=5, truth=x, seed=4)
    b = run_block_staf(masks, psi, z0, max_passes=5, truth=x, seed=4)
    assert a.rel_err_per_pass == b.rel_err_per_pass


def test_complex_recovery_n1024_K8():
    ok = 0
    for t in range(100):
        sx, sm, si, sr = np.random.SeedSequence(31, spawn_key=(t,)).spawn(4)
        x = gen_gaussian_signal(1024, "complex", sx).entries
        masks = gen_masks(1024, 8, sm)
        psi = cdp_forward(x, masks)
        z0 = cdp_init(masks, psi, seed=si)
        tr = run_block_staf(masks, psi, z0, max_passes=300, target_rel_err=1e-5, truth=x, seed=sr)
        ok += tr.success
    assert ok >= 90


def test_single_mask_is_insufficient():
    rng = np.random.default_rng(10)
    x = rng.uniform(0, 255, 256).astype(complex)
    masks = gen_masks(256, 1, 11)
    psi = cdp_forward(x, masks)
    tr = run_block_staf(masks, psi, cdp_init(masks, psi, seed=1), max_passes=300, truth=x, seed=2)
    assert relative_error(tr.final, x) > 0.1
