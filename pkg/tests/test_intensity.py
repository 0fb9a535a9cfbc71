import math

import numpy as np
import pytest
from scipy import integrate, stats

from tppgraph import diffcore as dc
from tppgraph import intensity as it
from tppgraph.diffcore import DomainError, Tensor

from util import param_grad_check


def k1(kind, **fields):
    row = {"w": np.array([1.0])}
    row.update({k: np.array([float(v)]) for k, v in fields.items()})
    return row


def density_mass(kind, row, q=1.0 - it.TAIL_MASS):
    """Adaptive quadrature of exp(log_pdf) up to the q-quantile.

    Heavy-tailed log-domain families are integrated in u = ln(tau) space.
    """
    hi = it.quantile(kind, row, q)
    if kind in ("lognorm", "logcauchy"):
        # integrate in u = ln(tau); split at the mass center so the adaptive
        # rule cannot step over the peak of a wide-domain integrand
        u_hi = math.log(hi)
        f = lambda u: (math.exp(it.log_pdf(kind, row, math.exp(u)) + u)
                       if math.exp(u) > 0 else 0.0)
        c = min(float(np.average(row["mu"], weights=row["w"])), u_hi - 1.0)
        mass = (integrate.quad(f, -np.inf, c, limit=300)[0]
                + integrate.quad(f, c, u_hi, limit=300)[0])
    else:
        f = lambda t: math.exp(it.log_pdf(kind, row, t)) if t > 0 else 0.0
        mass, _ = integrate.quad(f, 0.0, hi, limit=300)
    return mass


class TestLogPdfValues:
    def test_lognorm_standard_at_one(self):
        assert it.log_pdf("lognorm", k1("lognorm", mu=0, sigma=1), 1.0) == pytest.approx(
            math.log(1.0 / math.sqrt(2 * math.pi)), abs=1e-9)

    def test_weibull_exponential_special_case(self):
        # beta = 1 reduces to Exp(eta): f(tau) = 2 exp(-1) at tau = 0.5
        assert it.log_pdf("weibull", k1("weibull", eta=2, beta=1), 0.5) == pytest.approx(
            math.log(2.0 * math.exp(-1.0)), abs=1e-9)

    def test_gompertz_at_origin_equals_log_eta(self):
        val = it.log_pdf("gompertz", k1("gompertz", eta=1, beta=1), 1e-12)
        assert val == pytest.approx(0.0, abs=1e-9)

    def test_positive_support_rejects_nonpositive(self):
        for kind in it.POSITIVE_SUPPORT:
            with pytest.raises(DomainError):
                it.log_pdf(kind, it.random_params(kind, 2, np.random.default_rng(0)), 0.0)

    def test_gaussian_accepts_negative(self):
        val = it.log_pdf("gaussian", k1("gaussian", mu=0, sigma=1), -0.5)
        assert val == pytest.approx(math.log(stats.norm.pdf(-0.5)), abs=1e-9)


class TestCdfValues:
    def test_zero_at_origin(self):
        rng = np.random.default_rng(1)
        for kind in it.POSITIVE_SUPPORT:
            assert it.cdf(kind, it.random_params(kind, 3, rng), 0.0) == pytest.approx(0.0)

    def test_weibull_exponential_median(self):
        assert it.cdf("weibull", k1("weibull", eta=1, beta=1), math.log(2)) == pytest.approx(
            0.5, abs=1e-12)

    def test_logcauchy_median(self):
        assert it.cdf("logcauchy", k1("logcauchy", mu=0, sigma=1), 1.0) == pytest.approx(
            0.5, abs=1e-12)

    def test_monotone_to_one(self):
        rng = np.random.default_rng(2)
        for kind in it.MIXTURE_KINDS:
            row = it.random_params(kind, 3, rng)
            taus = np.linspace(0.0, it.quantile(kind, row, 0.999), 200)
            vals = np.asarray(it.cdf(kind, row, taus))
            assert np.all(np.diff(vals) >= -1e-12)
            assert 0.999 - 1e-9 <= vals[-1] <= 1.0 + 1e-9


class TestHazardIdentities:
    def test_weibull_closed_form(self):
        row = k1("weibull", eta=1.5, beta=2.2)
        taus = np.linspace(0.05, 2.0, 50)
        built = np.asarray(it.cif("weibull", row, taus))
        direct = 1.5 * 2.2 * (1.5 * taus) ** 1.2
        rel = np.abs(built - direct) / direct
        assert rel.max() < 1e-8

    @pytest.mark.parametrize("kind", ["weibull", "gompertz", "expdecay"])
    def test_mixture_closed_form_hazard(self, kind):
        rng = np.random.default_rng(3)
        for _ in range(10):
            row = it.random_params(kind, 3, rng)
            taus = np.linspace(0.05, it.quantile(kind, row, 0.95), 40)
            built = np.asarray(it.cif(kind, row, taus))
            closed = np.asarray(it.closed_form_cif(kind, row, taus))
            rel = np.abs(built - closed) / np.maximum(closed, 1e-300)
            assert rel.max() < 1e-8

    def test_chf_zero_at_origin(self):
        rng = np.random.default_rng(4)
        for kind in it.MIXTURE_KINDS:
            row = it.random_params(kind, 2, rng)
            assert it.chf(kind, row, 0.0) == pytest.approx(0.0, abs=1e-12)

    def test_lognorm_hazard_matches_survival_slope(self):
        """lambda = f/(1-F) against the independent -d/dtau ln(1-F) route."""
        row = k1("lognorm", mu=0.2, sigma=0.8)
        h = 1e-6
        for tau in (0.3, 0.8, 1.5, 2.5):
            slope = (it.chf("lognorm", row, tau + h) - it.chf("lognorm", row, tau - h)) / (2 * h)
            lam = it.cif("lognorm", row, tau)
            assert abs(lam - slope) / lam < 1e-5

    def test_chf_monotone_every_family(self):
        rng = np.random.default_rng(5)
        for kind in it.MIXTURE_KINDS:
            row = it.random_params(kind, 3, rng)
            grid = np.linspace(0.0, it.quantile(kind, row, 0.999), 100)
            vals = np.asarray(it.chf(kind, row, grid))
            assert np.all(np.diff(vals) >= -1e-10), kind


class TestDensityNormalization:
    @pytest.mark.parametrize("kind", it.MIXTURE_KINDS)
    def test_mass_near_one(self, kind):
        rng = np.random.default_rng(6)
        for _ in range(3):
            row = it.random_params(kind, 3, rng)
            assert 0.999 <= density_mass(kind, row) <= 1.001


class TestCdfPdfConsistency:
    @pytest.mark.parametrize("kind", it.MIXTURE_KINDS)
    def test_central_difference(self, kind):
        rng = np.random.default_rng(7)
        row = it.random_params(kind, 3, rng)
        lo = it.quantile(kind, row, 0.05)
        hi = it.quantile(kind, row, 0.9)
        for tau in np.linspace(lo, hi, 12):
            h = 1e-4 * tau   # local step: densities vary on the scale of tau
            fd = (it.cdf(kind, row, tau + h) - it.cdf(kind, row, tau - h)) / (2 * h)
            f = math.exp(it.log_pdf(kind, row, tau))
            assert abs(fd - f) / max(f, 1e-12) < 1e-4


class TestParamHeads:
    def test_lognorm_overall_shapes(self):
        head = it.MixtureHead("lognorm", K=16, in_dim=6)
        params = head.forward(Tensor(np.random.default_rng(8).normal(size=(4, 6))))
        assert params["w"].value.shape == (4, 16)
        assert params["mu"].value.shape == (4, 16)
        assert params["sigma"].value.shape == (4, 16)
        assert head.w.value.shape == (6, 3 * 16)

    def test_weights_on_simplex(self):
        head = it.MixtureHead("weibull", K=5, in_dim=4)
        params = head.forward(Tensor(np.random.default_rng(9).normal(size=(7, 4))))
        w = params["w"].value
        assert np.all(w > 0)
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-9

    def test_expdecay_has_four_groups(self):
        head = it.MixtureHead("expdecay", K=2, in_dim=3)
        assert head.w.value.shape == (3, 4 * 2)
        params = head.forward(Tensor(np.zeros((1, 3))))
        assert set(params) == {"w", "log_w", "eta", "beta", "alpha"}

    def test_typewise_bundles(self):
        head = it.MixtureHead("lognorm", K=4, in_dim=5, num_types=3)
        assert head.w.value.shape == (5, 3 * 4 * 3)
        h = Tensor(np.random.default_rng(10).normal(size=(2, 5)))
        p1 = head.forward_type(h, 1)
        p3 = head.forward_type(h, 3)
        assert p1["mu"].value.shape == (2, 4)
        assert not np.allclose(p1["mu"].value, p3["mu"].value)
        with pytest.raises(it.ConfigError):
            head.forward(h)
        with pytest.raises(it.ConfigError):
            head.forward_type(h, 4)

    def test_gompertz_clamps_active(self):
        head = it.MixtureHead("gompertz", K=3, in_dim=2, t_ref=50.0)
        h = Tensor(np.array([[100.0, 100.0], [-100.0, -100.0]]))
        beta = head.forward(h)["beta"].value
        assert beta.max() <= head.beta_hi + 1e-15
        assert beta.min() >= it.BETA_CLAMP[0]
        assert math.exp(beta.max() * 50.0) < it.GOMPERTZ_EXP_CAP * (1 + 1e-9)

    def test_positivity_after_transform(self):
        rng = np.random.default_rng(11)
        for kind in it.MIXTURE_KINDS:
            head = it.MixtureHead(kind, K=3, in_dim=4, rng=rng)
            params = head.forward(Tensor(rng.normal(size=(5, 4)) * 3))
            for name, t in params.items():
                if name in ("sigma", "eta", "beta", "alpha"):
                    assert np.all(t.value > 0), (kind, name)


class TestFnnIntegral:
    def setup_method(self):
        self.head = it.FNNIntegralHead(in_dim=4, hidden=8, rng=np.random.default_rng(12))
        self.h = Tensor(np.random.default_rng(13).normal(size=(1, 4)))

    def _chf_grid(self, taus):
        return self.head.chf(self.h, Tensor(taus.reshape(-1, 1))).value[:, 0]

    def test_linear_lower_bound(self):
        taus = np.linspace(0.0, 20.0, 200)
        bt = float(dc.softplus(self.head.bt).value)
        assert np.all(self._chf_grid(taus) >= bt * taus - 1e-10)

    def test_intensity_nonnegative_on_grid(self):
        taus = np.linspace(0.01, 20.0, 200)
        lam = self.head.intensity(self.h, Tensor(taus.reshape(-1, 1))).value
        assert np.all(lam >= 0.0)

    def test_chf_monotone_and_diverging(self):
        taus = np.linspace(0.0, 200.0, 400)
        vals = self._chf_grid(taus)
        assert np.all(np.diff(vals) >= -1e-12)
        assert vals[-1] > 20.0

    def test_intensity_is_chf_slope(self):
        taus = np.array([0.5, 1.0, 3.0])
        h = 1e-5
        lam = self.head.intensity(self.h, Tensor(taus.reshape(-1, 1))).value[:, 0]
        fd = (self._chf_grid(taus + h) - self._chf_grid(taus - h)) / (2 * h)
        assert np.abs(lam - fd).max() < 1e-6

    def test_density_integrates_to_one(self):
        f = lambda t: float(np.exp(self.head.log_pdf(self.h, Tensor([[t]])).value))
        mass, _ = integrate.quad(f, 1e-9, 400.0, limit=300)
        assert 0.999 <= mass <= 1.001

    def test_typewise_mode_rejected(self):
        with pytest.raises(it.ConfigError):
            it.nll_typewise(self.head, self.h, np.array([1.0]), np.array([True]),
                            np.array([1]))


class TestNllOverall:
    def test_unit_exponential_equals_mean_interval(self):
        """Under Weibull(beta=1, eta=1) the NLL per event is the mean interval."""
        rng = np.random.default_rng(14)
        taus = rng.exponential(1.0, size=50)
        head = it.MixtureHead("weibull", K=1, in_dim=3, rng=rng)
        # force eta = beta = 1 regardless of h: zero weights, zero bias
        head.w.value[...] = 0.0
        head.b.value[...] = 0.0
        h = Tensor(np.zeros((50, 3)))
        nll = it.nll_overall(head, h, taus, np.ones(50, dtype=bool))
        assert float(nll.value) == pytest.approx(taus.mean(), abs=1e-10)

    def test_masked_event_does_not_contribute(self):
        rng = np.random.default_rng(15)
        head = it.MixtureHead("lognorm", K=2, in_dim=3, rng=rng)
        h = Tensor(rng.normal(size=(4, 3)))
        tau = np.array([0.5, 1.0, 2.0, 123.0])
        valid_all = np.array([True, True, True, False])
        a = it.nll_overall(head, h, tau, valid_all)
        tau2 = tau.copy()
        tau2[3] = 0.001   # padded value must be irrelevant
        b = it.nll_overall(head, h, tau2, valid_all)
        assert float(a.value) == pytest.approx(float(b.value), abs=1e-14)

    def test_nonfinite_density_raises(self):
        rng = np.random.default_rng(16)
        head = it.MixtureHead("gompertz", K=1, in_dim=2, rng=rng)
        head.b.value[...] = 1e4   # exp overflow in eta
        h = Tensor(np.zeros((2, 2)))
        with pytest.raises(it.TrainingInstabilityError):
            it.nll_overall(head, h, np.array([1.0, 2.0]), np.ones(2, dtype=bool))


class TestNllTypewise:
    def test_single_type_degenerates_to_overall(self):
        rng = np.random.default_rng(17)
        head = it.MixtureHead("lognorm", K=3, in_dim=4, num_types=1, rng=rng)
        h = Tensor(rng.normal(size=(6, 4)))
        tau = rng.uniform(0.1, 2.0, 6)
        valid = np.ones(6, dtype=bool)
        marks = np.ones(6, dtype=np.int64)
        a = float(it.nll_typewise(head, h, tau, valid, marks).value)
        b = float(it.nll_overall(head, h, tau, valid).value)
        assert a == pytest.approx(b, abs=1e-10)

    def test_mask_removes_contribution(self):
        rng = np.random.default_rng(18)
        head = it.MixtureHead("weibull", K=2, in_dim=3, num_types=2, rng=rng)
        h = Tensor(rng.normal(size=(4, 3)))
        tau = rng.uniform(0.2, 1.0, 4)
        valid = np.ones(4, dtype=bool)
        marks = np.array([1, 2, 1, 2])
        base = float(it.nll_typewise(head, h, tau, valid, marks).value)
        # intensity-term contribution of event 2's true type, isolated by hand
        tau_col = Tensor(tau.reshape(-1, 1))
        p2 = head.forward_type(h, 2)
        log_lam2 = (it.mixture_log_pdf("weibull", p2, tau_col)
                    - it.mixture_log_survival("weibull", p2, tau_col)).value[:, 0]
        marks_flipped = np.array([1, 1, 1, 2])
        p1 = head.forward_type(h, 1)
        log_lam1 = (it.mixture_log_pdf("weibull", p1, tau_col)
                    - it.mixture_log_survival("weibull", p1, tau_col)).value[:, 0]
        flipped = float(it.nll_typewise(head, h, tau, valid, marks_flipped).value)
        # flipping event 1's mark swaps exactly its log-intensity pick
        assert flipped - base == pytest.approx((-log_lam1[1] + log_lam2[1]) / 4, abs=1e-10)

    def test_two_independent_unit_poisson_types(self):
        """At constant unit intensities the per-event NLL is the oracle value."""
        rng = np.random.default_rng(19)
        # merged unit+unit Poisson: intervals Exp(2), marks uniform
        n = 400
        tau = rng.exponential(0.5, n)
        marks = rng.integers(1, 3, n)
        head = it.MixtureHead("weibull", K=1, in_dim=2, num_types=2, rng=rng)
        head.w.value[...] = 0.0
        head.b.value[...] = 0.0   # every type: Exp(1) hazard
        h = Tensor(np.zeros((n, 2)))
        nll = float(it.nll_typewise(head, h, tau, np.ones(n, bool), marks).value)
        # oracle: -(1/N) [sum_i ln 1 - sum_i 2 tau_i] = 2 mean(tau)
        assert nll == pytest.approx(2.0 * tau.mean(), abs=1e-10)


class TestPrediction:
    def test_lognorm_closed_form(self):
        assert it.predict_next_time("lognorm", k1("lognorm", mu=0, sigma=1)) == pytest.approx(
            math.exp(0.5), abs=1e-12)

    def test_weibull_closed_form(self):
        assert it.predict_next_time("weibull", k1("weibull", eta=2, beta=1)) == pytest.approx(
            0.5, abs=1e-12)

    def test_gaussian_closed_form(self):
        row = {"w": np.array([0.3, 0.7]), "mu": np.array([1.0, 3.0]),
               "sigma": np.array([0.3, 0.3])}
        assert it.predict_next_time("gaussian", row) == pytest.approx(2.4, abs=1e-12)

    def test_gompertz_trapezoid_within_1pct_of_quadrature(self):
        row = k1("gompertz", eta=1, beta=1)
        est = it.predict_next_time("gompertz", row)
        oracle, _ = integrate.quad(
            lambda t: t * math.exp(it.log_pdf("gompertz", row, t)), 0, 50, limit=300)
        assert abs(est - oracle) / oracle < 0.01

    def test_expdecay_matches_quadrature(self):
        row = k1("expdecay", eta=1.0, beta=1.5, alpha=0.4)
        est = it.predict_next_time("expdecay", row)
        oracle, _ = integrate.quad(
            lambda t: t * math.exp(it.log_pdf("expdecay", row, t)), 0, 200, limit=300)
        assert abs(est - oracle) / oracle < 0.01

    def test_typewise_merged_expectation(self):
        # two unit exponentials race: min is Exp(2), mean 0.5
        rows = [k1("weibull", eta=1, beta=1), k1("weibull", eta=1, beta=1)]
        assert it.predict_next_time_typewise("weibull", rows) == pytest.approx(0.5, rel=1e-3)


class TestSampling:
    def test_gompertz_inverse_at_zero(self):
        # u = 0 plugs to g = ln(1 - 0)/beta = 0
        eta, beta = 1.3, 0.7
        g = math.log1p(-beta / eta * math.log1p(-0.0)) / beta
        assert g == 0.0

    def test_degenerate_mixture_uses_first_component(self):
        rng = np.random.default_rng(20)
        row = {"w": np.array([1.0, 0.0]), "mu": np.array([0.0, 50.0]),
               "sigma": np.array([0.1, 0.1])}
        draws = [it.sample_next("lognorm", row, rng) for _ in range(200)]
        assert max(draws) < 10.0

    def test_lognorm_ks(self):
        rng = np.random.default_rng(21)
        row = k1("lognorm", mu=0.3, sigma=0.9)
        draws = np.array([it.sample_next("lognorm", row, rng) for _ in range(10_000)])
        p = stats.kstest(draws, lambda t: np.asarray(it.cdf("lognorm", row, t))).pvalue
        assert p > 0.01

    def test_gompertz_ks(self):
        rng = np.random.default_rng(22)
        row = k1("gompertz", eta=0.8, beta=0.5)
        draws = np.array([it.sample_next("gompertz", row, rng) for _ in range(10_000)])
        p = stats.kstest(draws, lambda t: np.asarray(it.cdf("gompertz", row, t))).pvalue
        assert p > 0.01

    def test_gaussian_rejection_positive(self):
        rng = np.random.default_rng(23)
        row = k1("gaussian", mu=0.1, sigma=1.0)
        draws = [it.sample_next("gaussian", row, rng) for _ in range(500)]
        assert min(draws) > 0.0

    def test_expdecay_negative_alpha_rejected_at_sampling(self):
        rng = np.random.default_rng(24)
        row = k1("expdecay", eta=1.0, beta=1.0, alpha=-0.5)
        with pytest.raises(DomainError):
            it.sample_next("expdecay", row, rng)


class TestGraphGradients:
    @pytest.mark.parametrize("kind", it.MIXTURE_KINDS)
    def test_mixture_logpdf_grad(self, kind):
        rng = np.random.default_rng(25)
        head = it.MixtureHead(kind, K=2, in_dim=3, rng=rng)
        h_val = rng.normal(size=(4, 3)) * 0.5
        tau = rng.uniform(0.3, 1.5, 4)

        def loss():
            params = head.forward(Tensor(h_val))
            return dc.tsum(it.mixture_log_pdf(kind, params, Tensor(tau.reshape(-1, 1))))

        assert param_grad_check(loss, [head.w, head.b]) < 1e-4

    def test_nll_overall_grad(self):
        rng = np.random.default_rng(26)
        head = it.MixtureHead("lognorm", K=2, in_dim=3, rng=rng)
        h_val = rng.normal(size=(5, 3))
        tau = rng.uniform(0.3, 2.0, 5)
        valid = np.array([True, True, True, True, False])
        loss = lambda: it.nll_overall(head, Tensor(h_val), tau, valid)
        assert param_grad_check(loss, [head.w, head.b]) < 1e-4

    def test_nll_typewise_grad(self):
        rng = np.random.default_rng(27)
        head = it.MixtureHead("weibull", K=2, in_dim=3, num_types=2, rng=rng)
        h_val = rng.normal(size=(5, 3)) * 0.5
        tau = rng.uniform(0.3, 2.0, 5)
        marks = np.array([1, 2, 2, 1, 1])
        loss = lambda: it.nll_typewise(head, Tensor(h_val), tau, np.ones(5, bool), marks)
        assert param_grad_check(loss, [head.w, head.b]) < 1e-4

    def test_fnn_nll_grad(self):
        rng = np.random.default_rng(28)
        head = it.FNNIntegralHead(in_dim=3, hidden=5, rng=rng)
        h_val = rng.normal(size=(4, 3))
        tau = rng.uniform(0.3, 2.0, 4)
        loss = lambda: it.nll_overall(head, Tensor(h_val), tau, np.ones(4, bool))
        assert param_grad_check(loss, head.params()) < 1e-4


class TestDiagnostics:
    def test_survival_floor_counted(self):
        it.DIAGNOSTICS.reset()
        row = k1("lognorm", mu=0.0, sigma=0.1)
        it.cif("lognorm", row, 1e6)   # survival far below the floor
        assert it.DIAGNOSTICS.survival_floor_hits > 0
        it.DIAGNOSTICS.reset()
        assert it.DIAGNOSTICS.survival_floor_hits == 0
