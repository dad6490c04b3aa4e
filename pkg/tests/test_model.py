import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import nbinom

from mppc.model import (
    DetectorParams,
    ProbDist,
    TransferMatrix,
    XtVariant,
    apply_forward,
    build_povm,
    dark_matrix,
    loss_matrix,
    total_matrix,
    xt_matrix,
)
from mppc.sources import Coherent, photon_distribution

from conftest import EPS_D, EPS_XT


def brute_loss_column(m, eta):
    """Enumerate survive/lose for each of m photons."""
    col = np.zeros(m + 1)
    for pattern in itertools.product((0, 1), repeat=m):
        k = sum(pattern)
        col[k] += eta**k * (1 - eta) ** (m - k)
    return col


def chain_column(m, eps, n_max):
    """m-fold convolution of the per-avalanche chain length law."""
    single = np.array([eps**j * (1 - eps) for j in range(n_max + 1)])
    dist = np.zeros(n_max + 1)
    dist[0] = 1.0
    for _ in range(m):
        dist = np.convolve(dist, single)[: n_max + 1]
    # dist[j] = P(j induced); shift by the m primaries
    col = np.zeros(n_max + 1)
    col[m:] = dist[: n_max + 1 - m]
    return col


class TestLoss:
    def test_lossless_is_identity(self):
        assert np.array_equal(loss_matrix(1.0, 10).entries, np.eye(11))

    def test_symmetric_binomial_column(self):
        col = loss_matrix(0.5, 6).entries[:, 2]
        assert np.allclose(col, [0.25, 0.5, 0.25, 0, 0, 0, 0], atol=0, rtol=0)

    def test_low_efficiency_entries(self):
        m = loss_matrix(0.08, 5).entries
        assert m[1, 1] == pytest.approx(0.08, abs=1e-15)
        assert m[0, 1] == pytest.approx(0.92, abs=1e-15)

    @pytest.mark.parametrize("eta", [0.0, 0.08, 0.37, 0.5, 0.9])
    def test_matches_enumeration(self, eta):
        m = loss_matrix(eta, 8).entries
        for col in range(9):
            expected = np.zeros(9)
            expected[: col + 1] = brute_loss_column(col, eta)
            assert np.allclose(m[:, col], expected, atol=1e-15)

    def test_support_is_upper(self):
        m = loss_matrix(0.3, 12).entries
        assert not np.any(np.tril(m, -1))

    @pytest.mark.parametrize("eta", [0, 1, 1.5, -0.1, float("nan")])
    def test_bad_eta(self, eta):
        if eta in (0, 1):
            loss_matrix(eta, 3)
        else:
            with pytest.raises(ValueError):
                loss_matrix(eta, 3)


class TestDark:
    def test_zero_is_identity(self):
        assert np.array_equal(dark_matrix(0.0, 6).entries, np.eye(7))

    def test_reference_dark_rate(self):
        eps_d = 2.3e-3 / (1 - 0.0975)
        assert eps_d == pytest.approx(2.549e-3, abs=1e-6)
        m = dark_matrix(eps_d, 5).entries
        assert np.allclose(np.diag(m), 1 - eps_d)
        assert np.allclose(np.diag(m, -1), eps_d)
        assert np.diag(m)[0] == pytest.approx(0.997451, abs=1e-6)

    def test_vacuum_input(self):
        out = apply_forward(dark_matrix(0.01, 4), ProbDist.point_mass(0, 4))
        assert np.allclose(out.values, [0.99, 0.01, 0, 0, 0])

    def test_last_column_leaks(self):
        sums = dark_matrix(0.02, 6).column_sums()
        assert np.allclose(sums[:-1], 1.0, atol=1e-15)
        assert sums[-1] == pytest.approx(0.98)

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            dark_matrix(1.0, 3)


class TestCrossTalk:
    @pytest.mark.parametrize("variant", list(XtVariant))
    def test_zero_is_identity(self, variant):
        assert np.array_equal(xt_matrix(0.0, 8, variant).entries, np.eye(9))

    def test_paper_entry(self):
        m = xt_matrix(EPS_XT, 10, "paper").entries
        assert m[2, 1] == pytest.approx(2 * 0.0975 * 0.9025, abs=1e-15)
        assert m[2, 1] == pytest.approx(0.17599, abs=1e-5)

    def test_chain_entry(self):
        m = xt_matrix(EPS_XT, 30, "chain")
        assert m.entries[2, 1] == pytest.approx(0.08799, abs=1e-5)
        assert m.column_sums()[1] == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("eps", [0.02, EPS_XT, 0.15])
    def test_chain_matches_convolution(self, eps):
        n_max = 25
        m = xt_matrix(eps, n_max, "chain").entries
        for col in range(0, 8):
            assert np.allclose(m[:, col], chain_column(col, eps, n_max), atol=1e-15)

    def test_paper_kernel_closed_form(self):
        eps, n_max = 0.12, 15
        m = xt_matrix(eps, n_max, "paper").entries
        for n in range(n_max + 1):
            for k in range(1, n + 1):
                assert m[n, k] == pytest.approx(math.comb(n, n - k) * eps ** (n - k) * (1 - eps) ** k)
        # vacuum never clicks
        assert m[0, 0] == 1.0 and not m[1:, 0].any()

    def test_first_order_band(self):
        for base in ("paper", "chain"):
            full = xt_matrix(EPS_XT, 20, base).entries
            fo = xt_matrix(EPS_XT, 20, "first-order", base=base).entries
            assert np.array_equal(np.diag(fo), np.diag(full))
            assert np.array_equal(np.diag(fo, -1), np.diag(full, -1))
            assert not np.any(np.tril(fo, -2)) and not np.any(np.triu(fo, 1))

    def test_support_is_lower(self):
        for v in XtVariant:
            assert not np.any(np.triu(xt_matrix(0.2, 12, v).entries, 1))

    def test_bad_variant(self):
        with pytest.raises(ValueError):
            xt_matrix(0.1, 5, "bounded")
        with pytest.raises(ValueError):
            xt_matrix(1.0, 5)


class TestColumnSums:
    @given(eta=st.floats(0, 1), eps_d=st.floats(0, 0.2), n_max=st.integers(1, 60))
    @settings(max_examples=60, deadline=None)
    def test_loss_and_dark_stochastic(self, eta, eps_d, n_max):
        assert np.allclose(loss_matrix(eta, n_max).column_sums(), 1.0, atol=1e-12, rtol=0)
        assert np.allclose(dark_matrix(eps_d, n_max).column_sums()[:-1], 1.0, atol=1e-12, rtol=0)

    @given(eps=st.floats(0, 0.15), m=st.integers(0, 14))
    @settings(max_examples=60, deadline=None)
    def test_chain_columns_with_margin(self, eps, m):
        sums = xt_matrix(eps, m + 20, "chain").column_sums()
        assert abs(sums[m] - 1.0) < 1e-9

    @given(eps=st.floats(0.001, 0.3), m=st.integers(1, 40), margin=st.integers(0, 40))
    @settings(max_examples=80, deadline=None)
    def test_chain_leak_is_negative_binomial_tail(self, eps, m, margin):
        # mass lost past n_max is P(more than `margin` induced avalanches)
        sums = xt_matrix(eps, m + margin, "chain").column_sums()
        assert 1.0 - sums[m] == pytest.approx(nbinom.sf(margin, m, 1 - eps), abs=1e-13)

    def test_margin_twenty_not_enough_for_many_avalanches(self):
        sums = xt_matrix(0.15, 35, "chain").column_sums()
        assert 1.0 - sums[15] > 1e-9

    @given(eps=st.floats(0.0, 0.15), m=st.integers(1, 20))
    @settings(max_examples=60, deadline=None)
    def test_paper_columns_super_normalized(self, eps, m):
        sums = xt_matrix(eps, m + 200, "paper").column_sums()
        assert abs(sums[m] - 1.0 / (1.0 - eps)) < 1e-9


class TestTotal:
    def test_ideal_identity(self):
        assert np.allclose(total_matrix(DetectorParams(n_max=12)).entries, np.eye(13))

    def test_loss_only(self):
        p = DetectorParams(eta=0.3, n_max=12)
        assert np.allclose(total_matrix(p).entries, loss_matrix(0.3, 12).entries, atol=0)

    def test_half_efficiency_closed_form(self):
        m = total_matrix(DetectorParams(eta=0.5, n_max=10)).entries
        for n in range(11):
            for k in range(11):
                expected = math.comb(k, n) * 2.0**-k if n <= k else 0.0
                assert m[n, k] == pytest.approx(expected, abs=1e-15)

    def test_order(self, paper_params):
        n = paper_params.n_max
        expected = (xt_matrix(EPS_XT, n).entries @ dark_matrix(EPS_D, n).entries
                    @ loss_matrix(0.5, n).entries)
        assert np.allclose(total_matrix(paper_params).entries, expected, atol=0)


class TestApplyForward:
    def test_identity(self):
        p = photon_distribution(Coherent(1.3), 20)
        assert np.array_equal(apply_forward(TransferMatrix(np.eye(21)), p).values, p.values)

    def test_poisson_thinning(self):
        p = photon_distribution(Coherent(1.66), 40)
        out = apply_forward(loss_matrix(0.5, 40), p)
        assert np.allclose(out.values, photon_distribution(Coherent(0.83), 40).values, atol=1e-10)

    def test_preserves_mass(self, paper_params):
        p = photon_distribution(Coherent(2.0), 40)
        out = apply_forward(total_matrix(paper_params), p)
        assert out.total == pytest.approx(1.0, abs=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            apply_forward(loss_matrix(0.5, 5), ProbDist.point_mass(0, 6))

    def test_inverse_rejected(self):
        inv = TransferMatrix(np.linalg.inv(loss_matrix(0.5, 5).entries))
        with pytest.raises(ValueError, match="negative"):
            apply_forward(inv, ProbDist.point_mass(3, 5))

    def test_super_normalized_needs_flag(self):
        m = xt_matrix(0.1, 30, "paper")
        p = ProbDist.point_mass(2, 30)
        with pytest.raises(ValueError, match="normalize"):
            apply_forward(m, p)
        assert apply_forward(m, p, normalize=True).total == pytest.approx(1.0)


class TestProbDist:
    def test_deficit(self):
        p = photon_distribution(Coherent(5.0), 6)
        assert p.deficit > 0.1
        assert p.deficit == pytest.approx(1 - p.values.sum())

    def test_rejects_negative_and_excess(self):
        with pytest.raises(ValueError):
            ProbDist([0.5, -0.1, 0.6])
        with pytest.raises(ValueError):
            ProbDist([0.7, 0.7])

    def test_roundtrip_dict(self):
        p = photon_distribution(Coherent(1.0), 8)
        assert np.array_equal(ProbDist.from_dict(p.to_dict()).values, p.values)


class TestPovm:
    def test_ideal(self):
        povm = build_povm(DetectorParams(n_max=10))
        assert np.allclose(povm.theta, np.eye(11))

    def test_transpose_readout(self, paper_params):
        povm = build_povm(paper_params, normalize=False)
        assert np.array_equal(povm.theta, total_matrix(paper_params).entries.T)

    def test_peak_near_n_over_eta(self):
        theta = build_povm(DetectorParams(eta=0.5, n_max=40)).theta
        for n in range(1, 9):
            # exhaustive argmax over k; argmax picks the smaller k on ties
            assert int(np.argmax(theta[:, n])) in (2 * n - 1, 2 * n)

    @pytest.mark.parametrize("variant", ["paper", "chain"])
    def test_crosstalk_shifts_left(self, variant):
        base = build_povm(DetectorParams(eta=0.5, n_max=40)).theta
        xt = build_povm(DetectorParams(eta=0.5, eps_xt=EPS_XT, xt_variant=variant, n_max=40)).theta
        for n in range(1, 9):
            assert np.argmax(xt[:, n]) <= np.argmax(base[:, n])

    def test_normalized_rows(self, paper_params):
        povm = build_povm(paper_params.replace(xt_variant="paper"), normalize=True)
        sums = povm.theta.sum(axis=1)
        assert np.allclose(sums, 1.0, atol=1e-9)
        assert povm.normalized

    def test_chain_unnormalized_rows_leak_only_at_top(self):
        params = DetectorParams(eta=0.5, eps_xt=EPS_XT, n_max=40)
        povm = build_povm(params, normalize=False)
        sums = povm.theta.sum(axis=1)
        assert np.allclose(sums, 1.0 - povm.leakage, atol=1e-12)
        ok = np.setdiff1d(np.arange(41), povm.flagged)
        assert np.allclose(sums[ok], 1.0, atol=1e-9)
        assert 40 in povm.flagged and 0 not in povm.flagged


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            DetectorParams(eta=1.2)
        with pytest.raises(ValueError):
            DetectorParams(eps_xt=1.0)
        with pytest.raises(ValueError):
            DetectorParams(n_max=0)
        with pytest.raises(ValueError):
            DetectorParams(xt_variant="nope")

    def test_dict_roundtrip(self, paper_params):
        assert DetectorParams.from_dict(paper_params.to_dict()) == paper_params
