from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mppc.model import DetectorParams, apply_forward, dark_matrix, loss_matrix, total_matrix, xt_matrix
from mppc.oracle import SimConfig, simulate_run
from mppc.reconstruct import (
    fit_source,
    invert_transfer,
    reconstruct_direct,
    source_likelihood,
    stabilize,
    stabilize_with_mass,
)
from mppc.sources import Coherent, TwoModeSqueezed, photon_distribution


def loss_inverse_closed_form(eta, n_max):
    """Thinning by 1/eta: entry[m][n] = C(n,m) eta^-m (1 - 1/eta)^(n-m)."""
    inv = np.zeros((n_max + 1, n_max + 1))
    for n in range(n_max + 1):
        for m in range(n + 1):
            inv[m, n] = comb(n, m) * eta**-m * (1 - 1 / eta) ** (n - m)
    return inv


class TestInvert:
    def test_identity(self):
        assert np.array_equal(invert_transfer(loss_matrix(1.0, 5)).entries, np.eye(6))

    def test_half_loss_block(self):
        inv = invert_transfer(loss_matrix(0.5, 3)).entries
        assert np.allclose(inv[:2, :2], [[1, -1], [0, 2]], atol=1e-15)

    @pytest.mark.parametrize("eta", [0.3, 0.5, 0.9])
    def test_loss_closed_form(self, eta):
        inv = invert_transfer(loss_matrix(eta, 15)).entries
        assert np.allclose(inv, loss_inverse_closed_form(eta, 15), rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize(
        "factory",
        [
            lambda: loss_matrix(0.5, 30),
            lambda: dark_matrix(2.549e-3, 30),
            lambda: xt_matrix(0.0975, 30, "paper"),
            lambda: xt_matrix(0.0975, 30, "chain"),
            lambda: xt_matrix(0.0975, 30, "first-order"),
        ],
    )
    def test_two_sided_identity(self, factory):
        m = factory()
        inv = invert_transfer(m).entries
        eye = np.eye(m.dim)
        assert np.abs(m.entries @ inv - eye).max() < 1e-9
        assert np.abs(inv @ m.entries - eye).max() < 1e-9

    def test_singular(self):
        with pytest.raises(ValueError, match="zero diagonal"):
            invert_transfer(loss_matrix(0.0, 4))

    def test_non_triangular(self):
        with pytest.raises(ValueError, match="triangular"):
            invert_transfer(total_matrix(DetectorParams(0.5, 1e-3, 0.1, n_max=5)))


class TestStabilize:
    def test_example(self):
        est, clipped = stabilize_with_mass([0.6, 0.5, -0.1])
        assert np.allclose(est.values, [0.6 / 1.1, 0.5 / 1.1, 0.0], atol=1e-15)
        assert clipped == pytest.approx(0.1)

    def test_all_negative(self):
        with pytest.raises(ValueError):
            stabilize([-1.0, -1.0])

    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=12).filter(lambda v: max(v) > 1e-6))
    def test_idempotent_and_valid(self, raw):
        once = stabilize(raw).values
        assert np.all(once >= 0) and abs(once.sum() - 1) < 1e-12
        assert np.allclose(stabilize(once).values, once, atol=1e-15)


class TestDirect:
    @pytest.mark.parametrize("variant", ["chain", "paper"])
    @pytest.mark.parametrize("source", [Coherent(1.66), TwoModeSqueezed.from_mean(0.7), Coherent(4.0)])
    def test_round_trip(self, variant, source):
        params = DetectorParams(0.5, 2.549e-3, 0.0975, variant, n_max=40)
        p = photon_distribution(source, 40)
        meas = apply_forward(total_matrix(params), p, normalize=True)
        # undo the normalization that apply_forward applied to a super-normalized kernel
        scale = (total_matrix(params).entries @ p.values).sum()
        rep = reconstruct_direct(meas.values * scale, params)
        assert np.abs(rep.raw - p.values).max() < 1e-8
        assert rep.negatives_clipped < 1e-9

    # the cross-talk inverse amplifies rounding roughly like (eps/(1-eps))^n C(n, k),
    # and the loss inverse like (2/eta - 1)^n, so the 1e-8 identity holds on the
    # region around the reference point: eps <= 0.12, eta >= 0.5
    @given(mean=st.floats(0.05, 4.0), eta=st.floats(0.5, 1.0), eps=st.floats(0.0, 0.12),
           eps_d=st.floats(0.0, 0.01))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_property(self, mean, eta, eps, eps_d):
        params = DetectorParams(eta, eps_d, eps, "chain", n_max=40)
        p = photon_distribution(Coherent(mean), 40).values
        meas = total_matrix(params).entries @ p
        rep = reconstruct_direct(meas, params)
        assert np.abs(rep.raw - p).max() < 1e-8

    def test_noisy_data_has_negative_raw_entries(self):
        params = DetectorParams(0.5, 2.549e-3, 0.0975, n_max=20)
        run = simulate_run(SimConfig(params, Coherent(1.66), 10**4, seed=5))
        rep = reconstruct_direct(run.frequencies(20), params)
        assert (rep.raw < 0).any()
        assert rep.negatives_clipped > 0
        assert np.all(rep.estimate.values >= 0)
        assert rep.estimate.values.sum() == pytest.approx(1.0, abs=1e-12)

    def test_bad_inputs(self):
        params = DetectorParams(0.5, 0, 0, n_max=5)
        with pytest.raises(ValueError):
            reconstruct_direct(np.ones(3) / 3, params)
        with pytest.raises(ValueError):
            reconstruct_direct(np.ones(6) / 6, params.replace(eta=0.0))


class TestFit:
    @pytest.mark.parametrize("variant", ["chain", "paper"])
    def test_recovers_coherent_mean(self, variant):
        params = DetectorParams(0.5, 2.549e-3, 0.0975, variant, n_max=40)
        m = total_matrix(params).entries
        meas = m @ photon_distribution(Coherent(1.66), 40).values
        rep = fit_source(meas / meas.sum(), params, "coherent")
        assert rep.fit_param == pytest.approx(1.66, abs=1e-6)
        assert rep.flags == ()
        assert rep.residual < 1e-6

    def test_recovers_squeezing(self):
        params = DetectorParams(0.7, 1e-3, 0.05, n_max=40)
        r = 0.6
        meas = total_matrix(params).entries @ photon_distribution(TwoModeSqueezed(r), 40).values
        rep = fit_source(meas, params, "spdc-r", bounds=(0, 3))
        assert rep.fit_param == pytest.approx(r, abs=1e-6)

    def test_vacuum_hits_lower_bound(self):
        params = DetectorParams(0.5, 0.0, 0.0, n_max=10)
        meas = np.zeros(11)
        meas[0] = 1.0
        rep = fit_source(meas, params, "coherent")
        assert rep.fit_param == 0.0
        assert "lower-bound" in rep.flags

    def test_upper_bound_flag(self):
        params = DetectorParams(1.0, 0.0, 0.0, n_max=40)
        meas = photon_distribution(Coherent(8.0), 40).values
        rep = fit_source(meas, params, "coherent", bounds=(0, 2))
        assert "upper-bound" in rep.flags

    def test_likelihood_peaks_at_truth(self):
        params = DetectorParams(0.5, 2.549e-3, 0.0975, n_max=30)
        meas = total_matrix(params).entries @ photon_distribution(Coherent(1.66), 30).values
        at = source_likelihood(meas, params, Coherent(1.66))
        assert at > source_likelihood(meas, params, Coherent(1.66 * 1.1))
        assert at > source_likelihood(meas, params, Coherent(1.66 * 0.9))

    def test_bad_bracket_and_family(self):
        params = DetectorParams(0.5, 0, 0, n_max=5)
        meas = np.ones(6) / 6
        with pytest.raises(ValueError):
            fit_source(meas, params, bounds=(2, 1))
        with pytest.raises(ValueError):
            fit_source(meas, params, bounds=(-1, 1))
        with pytest.raises(ValueError):
            fit_source(meas, params, family="fock")
        with pytest.raises(ValueError):
            fit_source(np.zeros(6), params)
