import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from tppgen.autodiff import ParamStore, Value, finite_diff_check, no_grad
from tppgen.data import LogNormStats
from tppgen.decoders import (
    DECODERS, DeterministicDecoder, DiffusionDecoder, DiffusionSchedule, FlowDecoder, GANDecoder,
    MixtureDecoder, NoiseLadder, ScoreDecoder, VAEDecoder, annealed_langevin, critic_objectives,
    flow_nll, forward_marginal, gaussian_kl, make_decoder, mixture_nll, reverse_chain, rk4,
    score_matching_loss,
)
from tppgen.decoders.mixtures import component_logpdf, component_mean, component_sample
from tppgen.errors import ConfigError
from tppgen.inference import predict_next_time, record_sampling_dynamics
from tppgen.model import ModelConfig, TPPModel

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def decoder(kind, dim=4, seed=0, **kw):
    params = ParamStore()
    return make_decoder(kind, params, dim, np.random.default_rng(seed), **kw), params


def silence(net, value=0.0):
    """Make a conditioned MLP output the constant ``value``."""
    net.params[f"{net.prefix}.w3"].data[...] = 0.0
    net.params[f"{net.prefix}.b3"].data[...] = value


class FixedDraws:
    """Stands in for a Generator when a test needs to pin the loss' random draws."""

    def __init__(self, k, eps):
        self.k, self.eps = np.asarray(k), np.asarray(eps, dtype=float)

    def integers(self, lo, hi, size):
        return np.broadcast_to(self.k, (size,)).copy()

    def standard_normal(self, size):
        return np.broadcast_to(self.eps, size).copy()


# -- diffusion -------------------------------------------------------------------

def test_schedule_invariants():
    s = DiffusionSchedule.linear()
    assert s.K == 100
    assert np.all(np.diff(s.alpha_bars) < 0)
    pv = s.posterior_var
    assert pv[0] == 0.0
    assert np.all(pv[1:] > 0) and np.all(pv[1:] <= s.betas[1:])


def test_schedule_rejects_out_of_range_betas():
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.1, 1.0]))


def test_forward_marginal_noise_free():
    s = DiffusionSchedule(np.array([0.02]))
    assert forward_marginal(1.7, 1, s, 0.0) == pytest.approx(math.sqrt(0.98) * 1.7, rel=1e-15)


def test_forward_marginal_pure_noise_limit():
    s = DiffusionSchedule(np.full(60, 0.9))
    assert forward_marginal(3.0, 60, s, -0.4) == pytest.approx(-0.4, abs=1e-12)


@pytest.mark.parametrize("k", [1, 50, 100])
def test_forward_marginal_variance(k, rng):
    s = DiffusionSchedule.linear()
    n = 10_000
    x = forward_marginal(0.8, k, s, rng.standard_normal(n))
    target = 1 - s.alpha_bars[k - 1]
    se = target * math.sqrt(2 / (n - 1))
    assert abs(x.var(ddof=1) - target) < 3 * se


def test_ddpm_zero_net_loss_is_noise_squared():
    dec, _ = decoder("tcddm")
    silence(dec.net)
    h = np.zeros((1, 4))
    loss = dec.loss(np.zeros(1), Value(h), FixedDraws(1, 0.5))
    assert loss.data[0] == pytest.approx(0.25, rel=1e-15)
    n = 20_000
    big = dec.loss(np.zeros(n), Value(np.zeros((n, 4))), np.random.default_rng(3)).data
    assert abs(big.mean() - 1.0) < 3 * math.sqrt(2 / n)


def test_ddpm_oracle_net_zero_loss():
    dec, _ = decoder("tcddm")
    tau = np.array([0.3, -1.2, 2.0])
    ab = dec.schedule.alpha_bars

    def oracle(x, h, k):
        return Value((x - np.sqrt(ab[k - 1]) * tau) / np.sqrt(1 - ab[k - 1]))

    dec.eps = oracle
    loss = dec.loss(tau, Value(np.zeros((3, 4))), np.random.default_rng(0)).data
    np.testing.assert_allclose(loss, 0.0, atol=1e-20)


def test_reverse_chain_identity_when_degenerate():
    s = DiffusionSchedule(np.array([1e-12]))
    x0 = np.random.default_rng(1).standard_normal(100)
    out = reverse_chain(x0, lambda x, k: np.zeros_like(x), s, np.random.default_rng(2))
    np.testing.assert_allclose(out, x0, rtol=1e-11)


def test_reverse_chain_noise_free_is_affine():
    s = DiffusionSchedule.linear()
    x0 = np.linspace(-2, 2, 9)
    out = reverse_chain(x0, lambda x, k: np.zeros_like(x), s, None)
    np.testing.assert_allclose(out, x0 / np.sqrt(np.prod(s.alphas)), rtol=1e-12)


def test_reverse_chain_applies_update_in_order():
    s = DiffusionSchedule(np.array([0.1, 0.2]))
    out = reverse_chain(np.array([1.0]), lambda x, k: np.full_like(x, 0.5), s, None)
    x = 1.0
    for k in (2, 1):
        b, a, ab = s.betas[k - 1], s.alphas[k - 1], s.alpha_bars[k - 1]
        x = (x - b / math.sqrt(1 - ab) * 0.5) / math.sqrt(a)
    assert out[0] == pytest.approx(x, rel=1e-14)


# -- vae -------------------------------------------------------------------------

def test_kl_examples():
    assert gaussian_kl(Value(np.zeros((1, 3))), Value(np.zeros((1, 3)))).data[0] == 0.0
    assert gaussian_kl(Value(np.ones((1, 1))), Value(np.zeros((1, 1)))).data[0] == pytest.approx(0.5)


def test_vae_perfect_reconstruction_leaves_kl():
    dec, _ = decoder("tcvae")
    tau = np.array([0.4, -0.3])
    h = Value(np.random.default_rng(0).normal(size=(2, 4)))
    dec.dec = lambda z, h: Value(tau)
    mu, lv = dec.posterior(tau, h)
    np.testing.assert_allclose(dec.loss(tau, h, np.random.default_rng(1)).data,
                               gaussian_kl(mu, lv).data, rtol=1e-15)


def test_vae_constant_decoder_samples():
    dec, _ = decoder("tcvae", obs_noise=False)
    silence(dec.dec, 0.37)
    out = dec.sample(np.zeros((2, 4)), 50, np.random.default_rng(0))
    np.testing.assert_allclose(out, 0.37, rtol=1e-15)


def test_vae_fixed_seed_is_deterministic():
    dec, _ = decoder("tcvae")
    h = np.random.default_rng(0).normal(size=(3, 4))
    a = dec.sample(h, 20, np.random.default_rng(9))
    b = dec.sample(h, 20, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


# -- gan -------------------------------------------------------------------------

def test_constant_critic_penalty_equals_eta():
    real, fake = np.array([0.2, 1.0]), np.array([0.9, -0.5])
    c, g = critic_objectives(Value(np.full(2, 3.0)), Value(np.full(2, 3.0)), real, fake, eta=2.5)
    np.testing.assert_allclose(c.data, 2.5)
    np.testing.assert_allclose(g.data, 0.0)


def test_slope_one_critic_has_no_penalty():
    real, fake = np.array([0.2, 1.0]), np.array([0.9, -0.5])
    c, g = critic_objectives(Value(real), Value(fake), real, fake, eta=1.0)
    np.testing.assert_allclose(c.data, -(real - fake), rtol=1e-15)


def test_eta_zero_is_plain_wasserstein():
    r = np.random.default_rng(0)
    real, fake, dr, df = r.normal(size=(4, 5))
    c, _ = critic_objectives(Value(dr), Value(df), real, fake, eta=0.0)
    np.testing.assert_allclose(c.data, df - dr, rtol=1e-15)


def test_coincident_samples_stay_finite():
    c, _ = critic_objectives(Value(np.array([1.0])), Value(np.array([0.5])), np.ones(1), np.ones(1))
    assert np.isfinite(c.data).all()


# -- cnf -------------------------------------------------------------------------

def test_rk4_zero_and_constant_fields():
    z = np.linspace(-3, 3, 7)
    np.testing.assert_array_equal(rk4(lambda x, k: 0.0 * x, z, 0, 1), z)
    np.testing.assert_allclose(rk4(lambda x, k: 0.0 * x + 0.7, z, 0.0, 1.0), z + 0.7, rtol=1e-13)


def test_rk4_requires_two_steps():
    with pytest.raises(ConfigError):
        rk4(lambda x, k: x, np.zeros(1), 0, 1, steps=1)
    with pytest.raises(ConfigError):
        decoder("tccnf", steps=1)


def test_flow_constant_field_shift():
    dec, _ = decoder("tccnf")
    silence(dec.net, -0.25)
    z = np.linspace(-1, 1, 5)
    np.testing.assert_allclose(dec.transform(z, np.zeros((5, 4))), z - 0.25, rtol=1e-12, atol=1e-14)


def test_flow_round_trip(rng):
    dec, _ = decoder("tccnf", dim=8, seed=4)
    z = rng.standard_normal(1000)
    h = rng.normal(size=(1000, 8))
    back = dec.inverse(dec.transform(z, h), h)
    assert np.max(np.abs(back - z)) < 1e-6


def test_flow_nll_zero_field():
    tau = np.array([-1.5, 0.0, 2.2])
    zero = lambda x, k: (0.0 * x, 0.0 * x)
    np.testing.assert_allclose(flow_nll(zero, tau).data, HALF_LOG_2PI + tau ** 2 / 2, rtol=1e-15)


def test_flow_nll_linear_field_trace():
    s, tau = 0.8, np.array([0.5, -2.0])
    nll = flow_nll(lambda x, k: (s * x, 0.0 * x + s), tau).data
    x0 = tau * math.exp(-s)
    np.testing.assert_allclose(nll, HALF_LOG_2PI + x0 ** 2 / 2 + s, rtol=1e-9)


def test_flow_samples_follow_flow_density():
    dec, _ = decoder("tccnf", dim=4, seed=2)
    h = np.random.default_rng(5).normal(size=(1, 4))
    samples = dec.sample(h, 10_000, np.random.default_rng(6)).ravel()
    grid = np.linspace(samples.min() - 1, samples.max() + 1, 4001)
    with no_grad():
        nll = dec.loss(grid, Value(np.repeat(h, grid.size, axis=0)), None).data
    cdf = integrate.cumulative_trapezoid(np.exp(-nll), grid, initial=0.0)
    assert cdf[-1] == pytest.approx(1.0, abs=2e-3)
    stat = stats.kstest(samples, lambda x: np.interp(x, grid, cdf / cdf[-1])).statistic
    assert stat < 0.03


# -- score network ---------------------------------------------------------------

def test_score_loss_zero_at_oracle():
    target = np.array([0.1, -0.7])
    noisy = np.array([0.5, -0.2])
    sigma = np.array([0.3, 0.05])
    s = Value(-(noisy - target) / sigma)
    np.testing.assert_allclose(score_matching_loss(s, noisy, target, sigma).data, 0.0, atol=1e-15)


def test_score_loss_zero_net_expectation(rng):
    dec, _ = decoder("tcnsn")
    silence(dec.net)
    n = 20_000
    out = dec.loss(np.zeros(n), Value(np.zeros((n, 4))), rng).data
    assert abs(out.mean() - 0.5) < 3 * math.sqrt(2 / n) / 2


def test_ladder_is_geometric_and_positive():
    lad = NoiseLadder.geometric()
    assert lad.K == 1000 and lad.sigmas[0] == 1.0 and lad.sigmas[-1] == pytest.approx(0.01)
    np.testing.assert_allclose(lad.sigmas[1:] / lad.sigmas[:-1], (0.01) ** (1 / 999))
    assert np.all(lad.step_sizes > 0)
    assert lad.step_sizes[-1] == pytest.approx(2e-5)
    with pytest.raises(ValueError):
        NoiseLadder(np.array([0.1, 0.5]))


def test_langevin_zero_step_leaves_draw():
    lad = NoiseLadder.geometric(K=10)
    x0 = np.random.default_rng(0).standard_normal(50)
    out = annealed_langevin(x0, lambda x, k: -x, lad, 3, np.random.default_rng(1), step_sizes=np.zeros(10))
    np.testing.assert_array_equal(out, x0)


def test_langevin_oracle_score_recovers_mean():
    mu = 5.0
    lad = NoiseLadder.geometric()
    rng = np.random.default_rng(8)
    x = annealed_langevin(rng.standard_normal(1000), lambda x, k: -(x - mu), lad, 5, rng)
    assert abs(x.mean() - mu) < 0.02 * mu


# -- mixtures --------------------------------------------------------------------

def _single(value):
    return Value(np.array([[value]], dtype=float))


def test_standard_normal_nll_at_zero():
    nll = mixture_nll("gauss", np.array([0.0]), _single(0.0), _single(0.0), _single(1.0))
    assert nll.data[0] == pytest.approx(0.918939, abs=1e-6)


def test_lognormal_mean():
    assert component_mean("lognorm", np.array(0.0), np.array(1.0)) == pytest.approx(1.64872, abs=1e-5)


def test_two_gaussian_mixture_brute_force():
    nll = mixture_nll("gauss", np.array([0.0]), Value(np.zeros((1, 2))), Value(np.array([[-1.0, 1.0]])),
                      Value(np.ones((1, 2))))
    brute = -math.log(0.5 * stats.norm.pdf(0, -1, 1) + 0.5 * stats.norm.pdf(0, 1, 1))
    assert nll.data[0] == pytest.approx(brute, rel=1e-13)


def _scipy_dist(family, p1, p2):
    if family == "gauss":
        return stats.norm(p1, p2)
    if family == "lognorm":
        return stats.lognorm(s=p2, scale=math.exp(p1))
    if family == "gompertz":
        return stats.gompertz(c=p1 / p2, scale=1 / p2)
    return stats.weibull_min(c=p2, scale=p1)


CASES = {"gauss": (10.0, 2.0), "lognorm": (0.3, 0.8), "gompertz": (0.4, 0.3), "weibull": (2.0, 1.7)}


@pytest.mark.parametrize("family", list(CASES))
def test_component_matches_reference_density(family):
    p1, p2 = CASES[family]
    tau = np.array([0.05, 0.7, 3.3, 9.0])
    lp = component_logpdf(family, tau, Value(np.array([p1])), Value(np.array([p2]))).data[:, 0]
    np.testing.assert_allclose(lp, _scipy_dist(family, p1, p2).logpdf(tau), rtol=1e-11)
    assert component_mean(family, np.array(p1), np.array(p2)) == pytest.approx(
        _scipy_dist(family, p1, p2).mean(), rel=1e-9)


@pytest.mark.parametrize("family", list(CASES))
def test_component_sampler_matches_cdf(family):
    p1, p2 = CASES[family]
    x = component_sample(family, np.full(5000, p1), np.full(5000, p2), np.random.default_rng(1))
    assert stats.kstest(x, _scipy_dist(family, p1, p2).cdf).pvalue > 0.001


@pytest.mark.parametrize("family", ["lognorm", "gompertz", "weibull", "gauss"])
def test_mixture_density_integrates_to_one(family):
    dec, params = decoder(family, dim=4, seed=3)
    if family == "gauss":
        params["dec.p1.b"].data[:] = [8.0, 12.0, 20.0]
    h = np.random.default_rng(0).normal(size=(1, 4)) * 0.3
    grid = np.unique(np.concatenate([np.geomspace(1e-8, 1.0, 20_000), np.linspace(1.0, 50.0, 20_000)]))
    with no_grad():
        nll = dec.loss(grid, Value(np.repeat(h, grid.size, axis=0)), None).data
    assert integrate.trapezoid(np.exp(-nll), grid) == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("family", ["lognorm", "gompertz", "weibull", "gauss"])
def test_mixture_sample_mean_agrees_with_closed_form(family):
    dec, params = decoder(family, dim=4, seed=3)
    if family == "gauss":
        params["dec.p1.b"].data[:] = [3.0, 4.0, 6.0]
    h = np.random.default_rng(0).normal(size=(2, 4)) * 0.3
    draws = dec.sample(h, 40_000, np.random.default_rng(1))
    m = dec.mean(h)
    se = draws.std(axis=1) / math.sqrt(draws.shape[1])
    assert np.all(np.abs(draws.mean(axis=1) - m) < 4 * se)


# -- deterministic head ----------------------------------------------------------

def test_deter_zero_history_returns_bias():
    dec, params = decoder("deter")
    params["dec.b_raw"].data[...] = 0.3
    assert dec.mean(np.zeros((1, 4)))[0] == pytest.approx(math.log1p(math.exp(0.3)))


@given(st.integers(0, 1000))
@settings(max_examples=25)
def test_deter_positive_for_positive_history(seed):
    dec, _ = decoder("deter", seed=seed)
    h = np.random.default_rng(seed).uniform(0, 5, size=(6, 4))
    assert np.all(dec.mean(h) > 0)


# -- gradients -------------------------------------------------------------------

def _fd_report(dec, params, target, h, names=None):
    hv = Value(h)

    def loss():
        return (dec.loss(target, hv, np.random.default_rng(11)) * np.linspace(0.5, 1.5, target.size)).sum()

    return finite_diff_check(loss, params, names=names, max_entries=8, rng=np.random.default_rng(0))


@pytest.mark.parametrize("kind", [k for k in DECODERS if k != "tcgan"])
def test_decoder_loss_gradients(kind):
    opts = {"steps": 8} if kind == "tccnf" else {}
    dec, params = decoder(kind, dim=4, seed=1, **opts)
    r = np.random.default_rng(2)
    target = r.uniform(0.2, 2.0, size=5) if not dec.normalized else r.normal(size=5)
    h = r.uniform(0.1, 1.0, size=(5, 4)) if kind == "deter" else r.normal(size=(5, 4))
    rep = _fd_report(dec, params, target, h)
    bad = {k: v for k, v in rep.items() if not v["passed"]}
    assert not bad, bad


def test_gan_gradients_each_side():
    dec, params = decoder("tcgan", dim=4, seed=1)
    r = np.random.default_rng(2)
    target, h = r.normal(size=5), r.normal(size=(5, 4))
    gen = [n for n in params if n not in dec.critic_names]
    rep = _fd_report(dec, params, target, h, names=gen)
    assert all(v["passed"] for v in rep.values()), rep

    def closs():
        return dec.critic_loss(target, h, np.random.default_rng(3)).sum()

    # the critic's output bias cancels in d(real) - d(fake): its gradient is exactly zero
    # and the finite difference is pure roundoff, so it is checked separately
    live = [n for n in dec.critic_names if n != "dec.critic.b3"]
    rep = finite_diff_check(closs, params, names=live, max_entries=8)
    assert all(v["passed"] for v in rep.values()), rep
    from tppgen.autodiff import backward
    assert backward(closs(), params)["dec.critic.b3"] == 0.0


# -- sampling through the model --------------------------------------------------

def model_for(kind, dim=8, seed=0, **opts):
    cfg = ModelConfig(encoder="gru", decoder=kind, dim=dim, num_marks=2, decoder_options=opts)
    return TPPModel(cfg, LogNormStats(-0.5, 1.2), seed)


FAST = {"tcnsn": {"ladder": NoiseLadder.geometric(K=50)}, "tccnf": {"steps": 10}}


@pytest.mark.parametrize("kind", DECODERS)
def test_samples_strictly_positive(kind):
    m = model_for(kind, **FAST.get(kind, {}))
    h = np.random.default_rng(0).normal(size=(4, 8)) * 3
    out = m.sample_intervals(h, 200, np.random.default_rng(1))
    assert out.shape == (4, 200)
    assert np.all(out > 0) and np.all(np.isfinite(out))


def test_predict_constant_decoder():
    m = model_for("deter")
    m.params["dec.b_raw"].data[...] = 1.1
    c = math.log1p(math.exp(1.1))
    got = predict_next_time(m, np.zeros(8), 4.0, num_samples=7, closed_form=False,
                            rng=np.random.default_rng(0))
    assert got[0] == pytest.approx(4.0 + c, rel=1e-14)


def _lognormal_model():
    m = model_for("lognorm")
    for part in ("logit", "p1", "p2"):
        m.params[f"dec.{part}.W"].data[...] = 0.0
    m.params["dec.p1.b"].data[...] = 0.0
    m.params["dec.p2.b"].data[...] = math.log(math.expm1(1.0 - 1e-6))
    return m


def test_predict_lognormal_mean_limit():
    m = _lognormal_model()
    h = np.zeros(8)
    assert predict_next_time(m, h, 2.0)[0] == pytest.approx(2.0 + math.exp(0.5), rel=1e-12)
    mc = predict_next_time(m, h, 2.0, num_samples=400_000, closed_form=False, rng=np.random.default_rng(0))
    sd = math.sqrt((math.e - 1) * math.e / 400_000)
    assert abs(mc[0] - 2.0 - math.exp(0.5)) < 4 * sd


def test_predict_spread_scales_with_sample_count():
    m = _lognormal_model()
    rng = np.random.default_rng(4)
    est = np.array([predict_next_time(m, np.zeros(8), 0.0, 100, rng, closed_form=False)[0]
                    for _ in range(2000)])
    expected = (math.e - 1) * math.e / 100
    assert est.var(ddof=1) == pytest.approx(expected, rel=0.2)


def test_dynamics_zero_eps_chain_variance_order_one():
    m = model_for("tcddm")
    silence(m.decoder.net)
    rows = record_sampling_dynamics(m, np.zeros(8), num_chains=5000, rng=np.random.default_rng(0))
    lv = np.array([r["latent_var"] for r in rows])
    assert len(rows) == 101
    assert lv.min() > 0.5 and lv.max() < 5.0


def test_dynamics_zero_flow_identical_checkpoints():
    m = model_for("tccnf", steps=10)
    silence(m.decoder.net)
    rows = record_sampling_dynamics(m, np.zeros(8), num_chains=5000, rng=np.random.default_rng(0))
    assert len(rows) == 11
    first = rows[0]
    for r in rows[1:]:
        assert r["latent_var"] == first["latent_var"] and r["hist_counts"] == first["hist_counts"]
    assert abs(first["latent_var"] - 1.0) < 0.1


def test_dynamics_rejects_closed_form_decoder():
    with pytest.raises(ConfigError):
        record_sampling_dynamics(model_for("gauss"), np.zeros(8), num_chains=10)
