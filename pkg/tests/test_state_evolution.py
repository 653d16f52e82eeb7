import numpy as np
import pytest

from cfdeep.ep_detector import PREC_CEIL, PREC_FLOOR
from cfdeep.modem import make_constellation
from cfdeep.state_evolution import (run_se, se_combine, se_fixed_point,
                                    se_lambda_update, se_step_empirical,
                                    se_step_iid, se_step_iid_exact)


class TestStepForms:
    def test_literal_form_pinned_value(self):
        # alpha=2, sigma2=1, lambda=1: b = 2 + 1 = 3,
        # v = 3/2 + sqrt(9 + 8)/2 = (3 + sqrt(17))/2
        assert np.isclose(se_step_iid(2.0, 1.0, 1.0), (3 + np.sqrt(17)) / 2,
                          atol=1e-12)

    def test_forms_coincide_at_unit_lambda(self):
        for alpha in (0.5, 1.0, 4.0):
            for s2 in (0.01, 1.0):
                assert np.isclose(se_step_iid(alpha, s2, 1.0),
                                  se_step_iid_exact(alpha, s2, 1.0), atol=1e-12)

    @pytest.mark.parametrize("lam", [0.3, 1.0, 5.0, 40.0])
    def test_exact_form_matches_empirical_spectrum(self, lam):
        # oracle: large-dimension sampled Wishart spectrum
        rng = np.random.default_rng(0)
        n, k = 256, 512
        s2 = 0.1
        # unit-variance channel entries; the closed form takes the noise per
        # unit of column energy, i.e. sigma2 / K for the raw noise level
        h = (rng.standard_normal((n, k)) + 1j * rng.standard_normal((n, k))) / np.sqrt(2)
        eigs = np.linalg.eigvalsh(h.conj().T @ h)
        emp = se_step_empirical(eigs, s2 * k, lam)
        ana = se_step_iid_exact(k / n, s2, lam)
        assert abs(emp - ana) / ana < 0.03

    def test_bad_inputs_raise(self):
        with pytest.raises(ValueError):
            se_step_iid(0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            se_step_iid_exact(1.0, 1.0, 0.0)
        with pytest.raises(ValueError):
            se_step_empirical(np.array([-1.0]), 1.0, 1.0)


class TestCombineAndUpdate:
    def test_harmonic_combine(self):
        assert np.isclose(se_combine([1.0, 1.0]), 0.5, atol=1e-15)
        assert np.isclose(se_combine([0.5, 0.25]), 1.0 / 6.0, atol=1e-15)
        with pytest.raises(ValueError):
            se_combine([1.0, -1.0])

    def test_lambda_update_plain(self):
        lam, cl = se_lambda_update(0.1, 1.0)
        assert np.isclose(lam, 9.0) and not cl

    def test_lambda_update_clamps_improper(self):
        lam, cl = se_lambda_update(2.0, 1.0)   # 0.5 - 1 < 0
        assert lam == PREC_FLOOR and cl

    def test_lambda_update_zero_mse_hits_ceiling(self):
        lam, cl = se_lambda_update(0.0, 1.0)
        assert lam == PREC_CEIL and cl


class TestRecursion:
    def test_variance_decreases_over_iterations(self):
        cons = make_constellation(4)
        tr = run_se(0.05, n_aps=4, n_users=8, n_antennas=8, cons=cons, n_iter=6)
        assert tr.v_combined.shape == (6,)
        assert all(a >= b - 1e-12 for a, b in
                   zip(tr.v_combined, tr.v_combined[1:]))
        assert tr.ber[-1] <= tr.ber[0]

    def test_more_aps_help(self):
        cons = make_constellation(4)
        a = run_se(0.1, 2, 8, 8, cons, 5).v_combined[-1]
        b = run_se(0.1, 8, 8, 8, cons, 5).v_combined[-1]
        assert b < a

    def test_empirical_spectra_path(self):
        rng = np.random.default_rng(1)
        cons = make_constellation(4)
        n, k, L = 16, 8, 4
        spectra = []
        for _ in range(L):
            h = (rng.standard_normal((n, k)) + 1j * rng.standard_normal((n, k))) / np.sqrt(2)
            spectra.append(np.linalg.eigvalsh(h.conj().T @ h))
        tr = run_se(0.5, L, k, n, cons, 4, spectra=np.array(spectra))
        assert np.all(tr.v_combined > 0)
        assert tr.v_ap.shape == (4, L)

    def test_fixed_point_consistency(self):
        cons = make_constellation(4)
        v, lam, iters = se_fixed_point(0.2, 4, 8, 8, cons)
        tr = run_se(0.2, 4, 8, 8, cons, n_iter=max(iters, 50))
        assert iters < 2000
        assert np.isclose(v, tr.v_combined[-1], rtol=1e-6)

    def test_rejects_bad_args(self):
        cons = make_constellation(4)
        with pytest.raises(ValueError):
            run_se(0.1, 1, 1, 1, cons, 0)
        with pytest.raises(ValueError):
            run_se(0.1, 1, 1, 1, cons, 1, iid_form="nope")
