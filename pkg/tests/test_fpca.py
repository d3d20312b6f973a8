import numpy as np
import pytest

from tenrul.fpca import (
    FpcaBasis,
    fit_fpca,
    fit_fpca_lls,
    load_basis,
    reconstruct,
    save_basis,
    score,
    to_intensity,
)
from tenrul.prognosis import build_model_library, load_library, predict_rul, save_library
from tests.test_prognosis import synthetic_study


def two_component_signals(rng, n_signals=40, length=12):
    t = np.linspace(0.0, 1.0, length)
    base = np.sin(2 * np.pi * t), np.cos(np.pi * t)
    coef = rng.normal(size=(n_signals, 2)) * np.array([3.0, 1.0])
    mean = 2.0 + t
    return mean + coef @ np.stack(base)


def test_intensity_is_the_frame_mean():
    const = np.full((4, 5, 3), 0.0)
    const[..., 0], const[..., 1], const[..., 2] = 2.5, -1.0, 7.0
    assert np.array_equal(to_intensity(const), [2.5, -1.0, 7.0])

    checker = np.indices((4, 4)).sum(axis=0) % 2 * 2.0 - 1.0
    stream = np.repeat(checker[..., np.newaxis], 3, axis=-1)
    assert np.abs(to_intensity(stream)).max() == 0.0

    rng = np.random.default_rng(0)
    random_stream = rng.normal(size=(5, 7, 4))
    brute = [np.mean([random_stream[i, j, t] for i in range(5)
                      for j in range(7)]) for t in range(4)]
    assert np.abs(to_intensity(random_stream) - brute).max() < 1e-12

    with pytest.raises(ValueError):
        to_intensity(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        to_intensity(np.zeros((2, 2, 2, 2)))


def test_basis_recovers_exact_two_dim_family():
    rng = np.random.default_rng(1)
    signals = two_component_signals(rng)
    basis = fit_fpca(signals, fve_threshold=0.999)
    assert basis.n_components == 2
    assert basis.signal_length == signals.shape[1]
    gram = basis.components.T @ basis.components
    assert np.abs(gram - np.eye(2)).max() < 1e-10
    assert basis.eigenvalues[0] >= basis.eigenvalues[1] >= 0.0
    recon = reconstruct(score(signals, basis), basis)
    assert np.abs(recon - signals).max() < 1e-8


def test_degenerate_and_invalid_inputs():
    flat = np.tile(np.arange(5.0), (4, 1))
    with pytest.raises(ValueError):
        fit_fpca(flat)  # identical signals carry no variance
    with pytest.raises(ValueError):
        fit_fpca(np.ones((1, 5)))
    with pytest.raises(ValueError):
        fit_fpca(np.random.default_rng(0).normal(size=(4, 5)), fve_threshold=0.0)
    with pytest.raises(ValueError):
        fit_fpca(np.random.default_rng(0).normal(size=(4, 5)), fve_threshold=1.1)
    basis = fit_fpca(np.random.default_rng(0).normal(size=(6, 5)))
    with pytest.raises(ValueError):
        score(np.ones((2, 4)), basis)


def test_scores_center_and_diagonalize():
    rng = np.random.default_rng(2)
    signals = rng.normal(size=(60, 9))
    basis = fit_fpca(signals, fve_threshold=1.0)
    s = score(signals, basis)
    # scoring copies of the mean gives exactly zero
    assert np.abs(score(np.tile(basis.mean, (3, 1)), basis)).max() == 0.0
    assert np.abs(s.mean(axis=0)).max() < 1e-12
    cov = s.T @ s / (signals.shape[0] - 1)
    assert np.abs(cov - np.diag(basis.eigenvalues)).max() < 1e-10


def test_reconstruction_error_nonincreasing_in_q():
    rng = np.random.default_rng(3)
    signals = rng.normal(size=(30, 8)) + 4.0
    full = fit_fpca(signals, fve_threshold=1.0)
    errors = []
    for q in range(1, full.n_components + 1):
        part = FpcaBasis(mean=full.mean, components=full.components[:, :q],
                         eigenvalues=full.eigenvalues[:q],
                         fve_threshold=full.fve_threshold)
        recon = reconstruct(score(signals, part), part)
        errors.append(float(np.sum((recon - signals) ** 2)))
    assert all(a >= b - 1e-9 for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 1e-18


def test_score_regression_recovers_slopes():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(80, 2)) * np.array([2.0, 0.5])
    beta = np.array([1.5, -0.7])
    sigma = 0.2
    y = 3.0 + x @ beta + sigma * rng.normal(size=80)
    model = fit_fpca_lls(x, y, "normal", restarts=2, tol=1e-8, seed=0)
    design = np.column_stack([np.ones(80), x])
    theta, rss, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid_var = float(rss[0]) / (80 - 3)
    se = np.sqrt(resid_var * np.diag(np.linalg.inv(design.T @ design)))
    assert abs(model.alpha - 3.0) <= 2 * se[0]
    assert np.all(np.abs(model.coefficient() - beta) <= 2 * se[1:])


def test_zero_scores_fit_intercept_only():
    y = np.array([3.0, 5.0, 4.0, 8.0, 6.0])
    model = fit_fpca_lls(np.zeros((5, 2)), y, "normal", restarts=1,
                         tol=1e-8, seed=0)
    locs = model.location(np.zeros((5, 2)))
    assert np.abs(locs - y.mean()).max() < 1e-6
    assert model.sigma == pytest.approx(float(np.std(y)), rel=1e-4)


def test_response_rescaling_rescales_the_fit():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(50, 3))
    y = 2.0 + x @ np.array([1.0, 0.0, -0.5]) + 0.1 * rng.normal(size=50)
    a = fit_fpca_lls(x, y, "normal", restarts=2, tol=1e-9, seed=0)
    c = 3.5
    b = fit_fpca_lls(x, c * y, "normal", restarts=2, tol=1e-9, seed=0)
    assert b.alpha == pytest.approx(c * a.alpha, rel=1e-6)
    assert b.sigma == pytest.approx(c * a.sigma, rel=1e-6)
    np.testing.assert_allclose(b.coefficient(), c * a.coefficient(),
                               rtol=1e-5, atol=1e-8)


def test_basis_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    basis = fit_fpca(rng.normal(size=(25, 7)), fve_threshold=0.9)
    path = tmp_path / "basis.fpca"
    save_basis(path, basis)
    loaded = load_basis(path)
    assert np.array_equal(loaded.mean, basis.mean)
    assert np.array_equal(loaded.components, basis.components)
    assert np.array_equal(loaded.eigenvalues, basis.eigenvalues)
    assert loaded.fve_threshold == basis.fve_threshold
    save_basis(tmp_path / "again.fpca", loaded)
    assert (tmp_path / "again.fpca").read_bytes() == path.read_bytes()


def test_intensity_pipeline_plugs_into_the_epoch_library(tmp_path):
    data = synthetic_study(n_systems=16, frames=5, seed=13)
    library, failures = build_model_library(
        data, method="fpca", family="normal", restarts=2, tol=1e-6,
        fve=0.95, seed=4)
    assert failures == {}
    assert sorted(library) == [2, 3, 4, 5]
    assert all(em.kind == "fpca" for em in library.values())

    prefix = data.streams[0][..., :3]
    rec = predict_rul(library, prefix, system_id=0)
    assert np.isfinite(rec.pred_ttf)
    with pytest.raises(ValueError):
        predict_rul(library, data.streams[0][:, 0, :3])

    save_library(tmp_path / "lib", library, failures)
    assert (tmp_path / "lib" / "epoch_2.fpca").exists()
    assert (tmp_path / "lib" / "epoch_2.cpm").exists()
    loaded, _ = load_library(tmp_path / "lib")
    again = predict_rul(loaded, prefix, system_id=0)
    assert again.pred_ttf == rec.pred_ttf
