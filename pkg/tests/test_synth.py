import numpy as np
import pytest
from scipy import stats

from adlift.errors import BadSpec
from adlift.features import rank_factors
from adlift.ingest import build_factor_table
from adlift.repeatbuy import build_frequency_table, nbd_pmf
from adlift.synth import (ChurnSpec, FactorSpec, Harmonic, IntensitySpec,
                          PopulationSpec, RequestSpec, SynthSpec, apply_churn,
                          gen_gamma_poisson, gen_inhomogeneous_poisson,
                          gen_requests)


class TestGenRequests:
    SPEC = RequestSpec(n=40_000, base_rate=0.1, factors=(
        FactorSpec("driver", ("lo", "hi"), (0.5, 0.5), (-0.8, 0.8)),
        FactorSpec("noise", ("a", "b", "c"), (0.3, 0.3, 0.4), (0.0,) * 3)))

    def test_same_seed_identical_streams(self):
        _, b1 = gen_requests(self.SPEC, seed=99)
        _, b2 = gen_requests(self.SPEC, seed=99)
        assert np.array_equal(b1.factors, b2.factors)
        assert np.array_equal(b1.labels, b2.labels)

    def test_different_seed_differs(self):
        _, b1 = gen_requests(self.SPEC, seed=99)
        _, b2 = gen_requests(self.SPEC, seed=100)
        assert not np.array_equal(b1.labels, b2.labels)

    def test_zero_effects_match_base_rate(self):
        spec = RequestSpec(n=100_000, base_rate=0.2, factors=(
            FactorSpec("f", ("a", "b"), (0.5, 0.5), (0.0, 0.0)),))
        _, batch = gen_requests(spec, seed=4)
        se = np.sqrt(0.2 * 0.8 / spec.n)
        assert abs(batch.labels.mean() - 0.2) < 3 * se

    def test_dominant_factor_ranks_first(self):
        dictionary, batch = gen_requests(self.SPEC, seed=7)
        table = build_factor_table(batch, dictionary)
        assert rank_factors(table).ranking[0] == 0

    def test_bad_probs_rejected(self):
        with pytest.raises(BadSpec):
            FactorSpec("f", ("a", "b"), (0.5, 0.6), (0.0, 0.0))

    def test_bad_base_rate_rejected(self):
        with pytest.raises(BadSpec):
            RequestSpec(n=10, base_rate=0.0, factors=(
                FactorSpec("f", ("a",), (1.0,), (0.0,)),))


class TestGenGammaPoisson:
    def test_poisson_limit_dispersion(self):
        spec = PopulationSpec(k=1e9, m=2.0, users=100_000, window_hours=24.0)
        sample = gen_gamma_poisson(spec, seed=3)
        dispersion = sample.counts.var(ddof=1) / sample.counts.mean()
        assert abs(dispersion - 1.0) < 0.05

    def test_counts_match_nbd_pmf(self):
        k, m = 0.8, 2.5
        spec = PopulationSpec(k=k, m=m, users=100_000, window_hours=720.0)
        sample = gen_gamma_poisson(spec, seed=8)
        hist = np.bincount(sample.counts)
        n_max = len(hist) - 1
        probs = np.asarray(nbd_pmf(k, m, np.arange(0, n_max + 1)))
        probs[-1] += max(1.0 - probs.sum(), 0.0)
        # pool bins with expected >= 5
        exp = probs * spec.users
        obs_b, exp_b, acc_o, acc_e = [], [], 0.0, 0.0
        for o, e in zip(hist, exp):
            acc_o += o
            acc_e += e
            if acc_e >= 5:
                obs_b.append(acc_o)
                exp_b.append(acc_e)
                acc_o = acc_e = 0.0
        obs_b[-1] += acc_o
        exp_b[-1] += acc_e
        chi2 = sum((o - e) ** 2 / e for o, e in zip(obs_b, exp_b))
        pvalue = stats.chi2.sf(chi2, len(obs_b) - 1)
        assert pvalue > 0.01

    def test_zero_mean_forbidden(self):
        with pytest.raises(BadSpec):
            PopulationSpec(k=1.0, m=0.0, users=10, window_hours=24.0)

    def test_times_sorted_within_users(self):
        spec = PopulationSpec(k=1.0, m=5.0, users=500, window_hours=48.0)
        sample = gen_gamma_poisson(spec, seed=5)
        for u in range(0, 500, 50):
            t = sample.user_times(u)
            assert np.all(np.diff(t) >= 0)
            assert len(t) == sample.counts[u]
            assert np.all((t >= 0) & (t < 48.0))


class TestApplyChurn:
    def _sample(self, users=20_000):
        spec = PopulationSpec(k=0.8, m=2.5, users=users, window_hours=720.0)
        return gen_gamma_poisson(spec, seed=6)

    def test_no_churn_one_cookie_per_user(self):
        sample = self._sample()
        churn = ChurnSpec(tau_days={"chrome": 1e9}, mix={"chrome": 1.0})
        events = apply_churn(sample, churn, seed=7)
        cookies = {e.cookie_id for e in events}
        assert len(cookies) == int((sample.counts > 0).sum())

    def test_rapid_churn_nearly_all_singletons(self):
        sample = self._sample(users=5_000)
        churn = ChurnSpec(tau_days={"chrome": 1e-4}, mix={"chrome": 1.0})
        events = apply_churn(sample, churn, seed=7)
        freq = build_frequency_table(events)
        assert freq.observed(1) / freq.total_cookies > 0.99

    def test_event_conservation(self):
        sample = self._sample()
        churn = ChurnSpec(tau_days={"chrome": 6.0, "safari": 12.0},
                          mix={"chrome": 0.7, "safari": 0.3})
        events = apply_churn(sample, churn, seed=9)
        assert len(events) == int(sample.counts.sum())

    def test_moderate_churn_raises_singleton_share(self):
        sample = self._sample()
        no_churn = apply_churn(sample, ChurnSpec({"c": 1e9}, {"c": 1.0}), seed=9)
        churned = apply_churn(sample, ChurnSpec({"c": 7.0}, {"c": 1.0}), seed=9)
        f0 = build_frequency_table(no_churn)
        f1 = build_frequency_table(churned)
        assert (f1.observed(1) / f1.total_cookies
                > f0.observed(1) / f0.total_cookies)

    def test_browser_mix_respected(self):
        sample = self._sample()
        churn = ChurnSpec(tau_days={"chrome": 6.0, "safari": 12.0},
                          mix={"chrome": 0.7, "safari": 0.3})
        events = apply_churn(sample, churn, seed=10)
        by_user = {}
        for e in events:
            user = e.cookie_id.split("s")[0]
            by_user.setdefault(user, set()).add(e.browser)
        assert all(len(browsers) == 1 for browsers in by_user.values())
        share = sum(1 for b in by_user.values() if b == {"chrome"}) / len(by_user)
        assert abs(share - 0.7) < 0.02


class TestInhomogeneousPoisson:
    def test_constant_intensity_exponential_gaps(self):
        spec = IntensitySpec(n_hours=200, base=50.0)
        times = gen_inhomogeneous_poisson(spec, seed=5)
        gaps = np.diff(np.concatenate([[0.0], times]))
        ks = stats.kstest(gaps, "expon", args=(0, gaps.mean()))
        assert ks.pvalue > 0.01

    def test_zero_intensity_no_events(self):
        spec = IntensitySpec(n_hours=10, base=0.0)
        assert len(gen_inhomogeneous_poisson(spec, seed=1)) == 0

    def test_periodic_histogram_tracks_intensity(self):
        spec = IntensitySpec(n_hours=240, base=30.0,
                             harmonics=(Harmonic(24.0, 20.0),))
        times = gen_inhomogeneous_poisson(spec, seed=9)
        assert len(times) > 5000
        hist = np.bincount(times.astype(int), minlength=240)
        corr = np.corrcoef(hist, spec.hourly_integrals())[0, 1]
        assert corr > 0.9

    def test_negative_intensity_rejected(self):
        spec = IntensitySpec(n_hours=24, base=1.0,
                             harmonics=(Harmonic(24.0, 5.0),))
        with pytest.raises(BadSpec):
            gen_inhomogeneous_poisson(spec, seed=1)

    def test_determinism(self):
        spec = IntensitySpec(n_hours=100, base=10.0)
        t1 = gen_inhomogeneous_poisson(spec, seed=44)
        t2 = gen_inhomogeneous_poisson(spec, seed=44)
        assert np.array_equal(t1, t2)


class TestSynthSpecJson:
    def test_full_document_roundtrip(self):
        doc = """
        {
          "seed": 7,
          "requests": {"n": 100, "base_rate": 0.1,
                       "factors": [{"name": "b", "levels": ["x", "y"],
                                    "probs": [0.6, 0.4], "effects": [0.2, 0.0]}]},
          "population": {"k": 0.8, "m": 2.5, "users": 1000, "window_hours": 720},
          "churn": {"tau_days": {"chrome": 6.0}, "mix": {"chrome": 1.0}},
          "intensity": {"n_hours": 48, "base": 10.0,
                        "harmonics": [{"period_hours": 24, "amplitude": 5.0}]}
        }
        """
        spec = SynthSpec.from_json(doc)
        assert spec.seed == 7
        assert spec.requests.factors[0].levels == ("x", "y")
        assert spec.population.m == 2.5
        assert spec.churn.mean_tau_days() == 6.0
        assert spec.intensity.harmonics[0].period_hours == 24.0
        # generators run off the parsed spec
        _, batch = gen_requests(spec.requests, spec.seed)
        assert len(batch) == 100
