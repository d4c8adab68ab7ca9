import numpy as np
import pytest
import scipy.linalg as sla

from mmrag.embed_store import EmbeddingMatrix, Modality, ModalityTag
from mmrag.fusion import (
    Avg,
    Cca,
    Concat,
    FusionError,
    Pca,
    fit,
    fit_cca,
    fit_pca,
    fuse_avg,
    fuse_concat,
    load_model,
    save_model,
    transform,
    transform_cca,
    transform_pca,
)

A = ModalityTag(Modality.TEXTUAL)
B = ModalityTag(Modality.VISUAL)


def view(x, tag=A, ids=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return EmbeddingMatrix(tag, np.arange(len(x)) if ids is None else ids, x)


def data_with_covariance(sigma, n, seed):
    """Samples whose unbiased sample covariance equals ``sigma`` exactly."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, sigma.shape[0]))
    z -= z.mean(axis=0)
    emp = z.T @ z / (n - 1)
    z = z @ np.linalg.inv(np.linalg.cholesky(emp)).T  # sample cov = I
    return z @ np.linalg.cholesky(sigma).T


def cca_oracle(sigma, da):
    """Canonical correlations from the generalized eigenproblem Sab Sbb^-1 Sba v = rho^2 Saa v."""
    saa, sab, sbb = sigma[:da, :da], sigma[:da, da:], sigma[da:, da:]
    m = sab @ np.linalg.solve(sbb, sab.T)
    evals = sla.eigh(m, saa, eigvals_only=True)
    return np.sqrt(np.clip(np.sort(evals)[::-1], 0, None))


class TestConcatAvg:
    def test_concat(self):
        s = fuse_concat([view([[1.0, 2.0]]), view([[3.0]], B)])
        assert s.vectors.tolist() == [[1.0, 2.0, 3.0]]

    def test_concat_single_view_identity(self):
        x = np.random.default_rng(0).standard_normal((5, 3))
        assert np.array_equal(fuse_concat([view(x)]).vectors, x)

    def test_concat_dims(self):
        rng = np.random.default_rng(0)
        s = fuse_concat([view(rng.standard_normal((20, 384))), view(rng.standard_normal((20, 2048)), B)])
        assert s.vectors.shape == (20, 2432) and s.model.output_dim == 2432

    def test_avg(self):
        s = fuse_avg([view([[1.0, 3.0]]), view([[3.0, 5.0]], B)])
        assert s.vectors.tolist() == [[2.0, 4.0]]

    def test_avg_single_identity(self):
        x = np.arange(6.0).reshape(3, 2)
        assert np.array_equal(fuse_avg([view(x)]).vectors, x)

    def test_avg_three_views_oracle(self):
        rng = np.random.default_rng(4)
        xs = [rng.standard_normal((10, 8)) for _ in range(3)]
        s = fuse_avg([view(x) for x in xs])
        oracle = [[sum(x[i, j] for x in xs) / 3 for j in range(8)] for i in range(10)]
        assert np.max(np.abs(s.vectors - oracle)) < 1e-12

    def test_avg_dim_mismatch(self):
        with pytest.raises(FusionError):
            fuse_avg([view([[1.0]]), view([[1.0, 2.0]], B)])

    def test_unaligned(self):
        with pytest.raises(FusionError, match="aligned"):
            fuse_concat([view([[1.0], [2.0]]), view([[1.0], [2.0]], B, ids=np.array([5, 6]))])


class TestPca:
    def test_collinear_line(self):
        t = np.linspace(-3, 5, 40)
        x = np.column_stack([t, 2 * t])
        m = fit_pca([view(x)], 1)
        assert abs(m.explained_variance_ratio[0] - 1.0) < 1e-12
        z = transform_pca(m, [view(x)]).vectors
        recon = z @ m.params["components"] + m.params["mean"]
        assert np.max(np.abs(recon - x)) < 1e-9

    def test_full_dim_reconstruction(self):
        x = np.random.default_rng(2).standard_normal((50, 6))
        m = fit_pca([view(x[:, :4]), view(x[:, 4:], B)], 6)
        z = transform_pca(m, [view(x[:, :4]), view(x[:, 4:], B)]).vectors
        assert np.max(np.abs(z @ m.params["components"] + m.params["mean"] - x)) < 1e-9

    def test_explained_variance_matches_covariance_eigen_oracle(self):
        x = np.random.default_rng(3).standard_normal((200, 20)) @ np.diag(np.linspace(3, 0.2, 20))
        m = fit_pca([view(x[:, :12]), view(x[:, 12:], B)], 5)
        cov = np.cov(x, rowvar=False)
        evals = sla.eigh(cov, eigvals_only=True)[::-1]
        assert np.max(np.abs(m.params["explained_variance"] - evals[:5])) < 1e-8
        assert np.max(np.abs(m.explained_variance_ratio - evals[:5] / evals.sum())) < 1e-8

    def test_invariants(self):
        x = np.random.default_rng(5).standard_normal((80, 10))
        m = fit_pca([view(x)], 7)
        r = m.explained_variance_ratio
        assert np.all(np.diff(r) <= 1e-15) and r.sum() <= 1 + 1e-9
        p = m.params["components"]
        assert np.max(np.abs(p @ p.T - np.eye(7))) < 1e-9

    def test_out_of_sample_matches_eigen_projection(self):
        rng = np.random.default_rng(6)
        train = rng.standard_normal((300, 8)) @ rng.standard_normal((8, 8))
        held = rng.standard_normal((25, 8)) @ rng.standard_normal((8, 8))
        m = fit_pca([view(train)], 3)
        z = transform_pca(m, [view(held)]).vectors
        evals, evecs = sla.eigh(np.cov(train, rowvar=False))
        basis = evecs[:, ::-1][:, :3]
        oracle = (held - train.mean(axis=0)) @ basis
        signs = np.sign(np.sum(oracle * z, axis=0))
        assert np.max(np.abs(z - oracle * signs)) < 1e-8

    def test_target_too_large(self):
        with pytest.raises(FusionError):
            fit_pca([view(np.zeros((3, 2)) + np.arange(3)[:, None])], 3)

    def test_rank_deficient_rejected(self):
        t = np.linspace(0, 1, 10)
        with pytest.raises(FusionError, match="rank"):
            fit_pca([view(np.column_stack([t, 2 * t]))], 2)

    def test_dim_mismatch_on_transform(self):
        m = fit_pca([view(np.random.default_rng(0).standard_normal((10, 3)))], 2)
        with pytest.raises(FusionError):
            transform_pca(m, [view(np.zeros((4, 2)))])

    def test_standardize_flag(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((100, 3)) * [1.0, 100.0, 1.0]
        plain = fit_pca([view(x)], 1)
        scaled = fit_pca([view(x)], 1, standardize=True)
        assert abs(plain.params["components"][0, 1]) > 0.99
        assert abs(scaled.params["components"][0, 1]) < 0.99


class TestCca:
    def test_perfect_linear_relation(self):
        a = np.random.default_rng(0).standard_normal(100)
        m = fit_cca(view(a), view(3 * a, B), 1, ridge=0.0)
        assert abs(m.correlations[0] - 1.0) < 1e-9

    def test_independent_views_null(self):
        rng = np.random.default_rng(1)
        m = fit_cca(view(rng.standard_normal((10_000, 3))), view(rng.standard_normal((10_000, 3)), B), 1, ridge=0.0)
        assert m.correlations[0] < 0.05

    def test_closed_form_diagonal(self):
        sigma = np.eye(4)
        sigma[0, 2] = sigma[2, 0] = 0.8
        sigma[1, 3] = sigma[3, 1] = 0.3
        x = data_with_covariance(sigma, 500, 2)
        m = fit_cca(view(x[:, :2]), view(x[:, 2:], B), 2, ridge=0.0)
        assert np.max(np.abs(m.correlations - [0.8, 0.3])) < 1e-6

    def test_generalized_eigen_oracle(self):
        sigma = np.array([
            [1.0, 0.3, 0.5, 0.2],
            [0.3, 2.0, 0.1, 0.6],
            [0.5, 0.1, 1.5, -0.2],
            [0.2, 0.6, -0.2, 1.0],
        ])
        x = data_with_covariance(sigma, 400, 3)
        m = fit_cca(view(x[:, :2]), view(x[:, 2:], B), 2, ridge=0.0)
        assert np.max(np.abs(m.correlations - cca_oracle(sigma, 2))) < 1e-6

    def test_variates_orthonormal_ridge_zero(self):
        rng = np.random.default_rng(4)
        latent = rng.standard_normal((400, 3))
        xa = latent @ rng.standard_normal((3, 6)) + 0.5 * rng.standard_normal((400, 6))
        xb = latent @ rng.standard_normal((3, 5)) + 0.5 * rng.standard_normal((400, 5))
        m = fit_cca(view(xa), view(xb, B), 4, ridge=0.0)
        z = transform_cca(m, view(xa), view(xb, B)).vectors
        za, zb = z[:, :4], z[:, 4:]
        for block in (za, zb):
            assert np.max(np.abs(np.cov(block, rowvar=False) - np.eye(4))) < 1e-6
        cross = za.T @ zb / (len(za) - 1)
        assert np.max(np.abs(cross - np.diag(m.correlations))) < 1e-6
        rho = m.correlations
        assert np.all(np.diff(rho) <= 1e-12) and rho.min() >= 0 and rho.max() <= 1 + 1e-9

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        xa = rng.standard_normal((300, 4))
        xb = xa[:, :2] @ rng.standard_normal((2, 3)) + rng.standard_normal((300, 3))
        m1 = fit_cca(view(xa), view(xb, B), 2, ridge=0.0)
        m2 = fit_cca(view(7.5 * xa), view(xb, B), 2, ridge=0.0)
        assert np.max(np.abs(m1.correlations - m2.correlations)) < 1e-9

    def test_deterministic_and_sign_convention(self):
        rng = np.random.default_rng(6)
        xa, xb = rng.standard_normal((100, 4)), rng.standard_normal((100, 4))
        m1 = fit_cca(view(xa), view(xb, B), 3)
        m2 = fit_cca(view(xa), view(xb, B), 3)
        for k in m1.params:
            assert m1.params[k].tobytes() == m2.params[k].tobytes()
        for j in range(3):
            col = m1.params["proj_a"][:, j]
            assert col[np.nonzero(np.abs(col) > 1e-12 * np.abs(col).max())[0][0]] > 0

    def test_perfect_pair_halves_correlate(self):
        a = np.random.default_rng(7).standard_normal(60)
        m = fit_cca(view(a), view(-2 * a + 1, B), 1, ridge=0.0)
        z = transform_cca(m, view(a), view(-2 * a + 1, B)).vectors
        assert abs(np.corrcoef(z[:, 0], z[:, 1])[0, 1] - 1.0) < 1e-9
        assert m.output_dim == 2

    def test_zero_variance_columns_with_ridge(self):
        rng = np.random.default_rng(8)
        xa = np.column_stack([rng.standard_normal(50), np.zeros(50), np.full(50, 3.0)])
        xb = np.column_stack([rng.standard_normal(50), np.zeros(50)])
        m = fit_cca(view(xa), view(xb, B), 2, ridge=1e-3)
        z = transform_cca(m, view(xa), view(xb, B)).vectors
        assert np.all(np.isfinite(z))

    def test_held_out_correlations(self):
        rng = np.random.default_rng(9)
        n = 10_000
        latent = rng.standard_normal((n, 2))
        xa = latent @ rng.standard_normal((2, 5)) + rng.standard_normal((n, 5))
        xb = latent @ rng.standard_normal((2, 4)) + rng.standard_normal((n, 4))
        tr, te = slice(0, 5000), slice(5000, n)
        m = fit_cca(view(xa[tr]), view(xb[tr], B), 2)
        z = transform_cca(m, view(xa[te]), view(xb[te], B)).vectors
        held = [np.corrcoef(z[:, j], z[:, 2 + j])[0, 1] for j in range(2)]
        assert np.max(np.abs(np.array(held) - m.correlations)) < 0.05

    def test_errors(self):
        with pytest.raises(FusionError, match="at least 3"):
            fit_cca(view([1.0, 2.0]), view([1.0, 3.0], B), 1)
        with pytest.raises(FusionError, match="exceeds"):
            fit_cca(view(np.zeros((10, 2)) + np.arange(10)[:, None]), view(np.arange(10.0), B), 2)
        t = np.arange(10.0)
        with pytest.raises(FusionError, match="rank"):
            fit_cca(view(np.column_stack([t, 2 * t])), view(np.column_stack([t, t**2]), B), 2, ridge=0.0)

    def test_transform_dim_mismatch(self):
        rng = np.random.default_rng(0)
        m = fit_cca(view(rng.standard_normal((20, 3))), view(rng.standard_normal((20, 3)), B), 1)
        with pytest.raises(FusionError):
            transform_cca(m, view(rng.standard_normal((5, 2))), view(rng.standard_normal((5, 3)), B))


class TestGenericAndSidecar:
    @pytest.mark.parametrize("kind", [Concat(), Avg(), Pca(3), Cca(2, 1e-3)])
    def test_fus1_round_trip(self, tmp_path, kind):
        rng = np.random.default_rng(1)
        views = [view(rng.standard_normal((30, 4))), view(rng.standard_normal((30, 4)), B)]
        m = fit(kind, views)
        save_model(m, tmp_path / "m.fus")
        back = load_model(tmp_path / "m.fus")
        assert back.kind == m.kind and back.input_dims == m.input_dims and back.output_dim == m.output_dim
        assert set(back.params) == set(m.params)
        for k in m.params:
            assert back.params[k].tobytes() == np.asarray(m.params[k], dtype="<f8").tobytes()
        assert np.array_equal(transform(back, views).vectors, transform(m, views).vectors)

    def test_fus1_corruption(self, tmp_path):
        rng = np.random.default_rng(1)
        m = fit(Pca(2), [view(rng.standard_normal((10, 3)))])
        p = tmp_path / "m.fus"
        save_model(m, p)
        data = bytearray(p.read_bytes())
        data[-10] ^= 1
        p.write_bytes(bytes(data))
        with pytest.raises(FusionError, match="checksum"):
            load_model(p)
        p.write_bytes(b"EMB1" + bytes(data[4:]))
        with pytest.raises(FusionError, match="magic"):
            load_model(p)

    def test_cca_needs_two_views(self):
        with pytest.raises(FusionError):
            fit(Cca(1), [view(np.zeros((5, 1)))])

    def test_kind_validation(self):
        with pytest.raises(FusionError):
            Pca(0)
        with pytest.raises(FusionError):
            Cca(1, -1.0)
