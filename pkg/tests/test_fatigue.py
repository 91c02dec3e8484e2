import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssl_rul.fatigue import (ConfigError, CrackParams, GaugeSpec, MaterialConfig, StrainSequence,
                             closed_form_lifetime, critical_crack_size, generate_population,
                             generate_structure, integrate_paris, lognormal_log_params, make_windows,
                             sample_crack_params, strain_at_gauge, structure_rng, truncate, window_arrays,
                             window_count)

MEAN = CrackParams(a0=5e-4, m=3.4, C=1e-10, sigma_max=80e6)
K_IC = 19.7e6


def test_defaults_match_table():
    cfg = MaterialConfig()
    assert cfg.youngs_modulus == 71.7e9
    assert cfg.poisson_ratio == 0.33
    assert cfg.fracture_toughness == 19.7e6
    assert cfg.sigma_max_range == (75e6, 85e6)
    assert (cfg.a0_mean, cfg.a0_std) == (5e-4, 2.5e-4)
    assert (cfg.m_mean, cfg.m_std, cfg.C_mean, cfg.C_std) == (3.4, 0.25, 1e-10, 5e-11)
    assert cfg.rho_m_logC == -0.996
    assert cfg.delta_k == 500
    assert [(g.x, g.y, g.angle) for g in cfg.gauges] == [(3e-3, 14e-3, 45.0), (14e-3, 14e-3, 45.0),
                                                       (25e-3, 14e-3, 45.0)]


@pytest.mark.parametrize("kw", [
    dict(a0_std=-1.0), dict(sigma_max_range=(85e6, 75e6)), dict(rho_m_logC=1.5),
    dict(delta_k=0), dict(poisson_ratio=0.5),
])
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        MaterialConfig(**kw)


def test_config_round_trip_and_unknown_keys():
    cfg = MaterialConfig()
    d = json.loads(json.dumps(cfg.to_dict()))
    assert MaterialConfig.from_dict(d) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        MaterialConfig.from_dict({**d, "bogus": 1})


def test_gauge_angle_range():
    with pytest.raises(ConfigError):
        GaugeSpec(0.0, 0.0, 360.0)


def test_degenerate_a0():
    cfg = MaterialConfig(a0_std=0.0)
    rng = np.random.default_rng(1)
    assert all(sample_crack_params(rng, cfg).a0 == 5e-4 for _ in range(5))


def test_lognormal_moment_matching_formula():
    mu, sd = lognormal_log_params(1e-10, 5e-11)
    assert sd == pytest.approx(math.sqrt(math.log(1.25)), rel=1e-12)
    assert sd == pytest.approx(0.4724, abs=1e-4)
    assert mu == pytest.approx(math.log(1e-10) - 0.5 * math.log(1.25), rel=1e-12)
    # Monte-Carlo check of the moments of exp draws
    draws = np.exp(np.random.default_rng(0).normal(mu, sd, 400_000))
    assert draws.mean() == pytest.approx(1e-10, rel=0.01)
    assert draws.std() == pytest.approx(5e-11, rel=0.02)


def test_m_logC_correlation():
    cfg = MaterialConfig()
    rng = np.random.default_rng(2)
    draws = [sample_crack_params(rng, cfg) for _ in range(100_000)]
    m = np.array([p.m for p in draws])
    logc = np.log10([p.C for p in draws])
    assert np.corrcoef(m, logc)[0, 1] == pytest.approx(-0.996, abs=0.01)


def test_positive_a0_and_sigma_range():
    cfg = MaterialConfig()
    rng = np.random.default_rng(3)
    ps = [sample_crack_params(rng, cfg) for _ in range(20_000)]
    assert min(p.a0 for p in ps) > 0
    s = np.array([p.sigma_max for p in ps])
    assert s.min() >= 75e6 and s.max() < 85e6


def test_critical_crack_size():
    assert critical_crack_size(MEAN, K_IC) == pytest.approx((19.7 / 80) ** 2 / math.pi, rel=1e-12)
    assert critical_crack_size(MEAN, K_IC) == pytest.approx(0.01930, abs=5e-6)
    p = CrackParams(1e-3, 3.0, 1e-10, 2.0)
    assert critical_crack_size(p, 2.0 * math.sqrt(math.pi)) == pytest.approx(1.0)
    p2 = CrackParams(1e-3, 3.0, 1e-10, 160e6)
    assert critical_crack_size(p2, K_IC) == pytest.approx(critical_crack_size(MEAN, K_IC) / 4)


def test_lifetime_matches_closed_form():
    n, sizes = integrate_paris(MEAN, K_IC, 500)
    exact = closed_form_lifetime(MEAN, K_IC)
    assert exact == pytest.approx(1.30e5, rel=0.01)
    assert n == pytest.approx(exact, rel=0.02)
    assert sizes.shape[0] == n // 500
    assert np.all(np.diff(sizes) > 0)
    # recorded sizes stay below a_crit except possibly the failure cycle itself
    assert np.all(sizes[:-1] < critical_crack_size(MEAN, K_IC))


def test_immediate_failure():
    a_crit = critical_crack_size(MEAN, K_IC)
    p = CrackParams(a_crit, 3.4, 1e-10, 80e6)
    n, sizes = integrate_paris(p, K_IC, 500)
    assert n == 0 and sizes.size == 0


def test_far_field_strain():
    p = MEAN
    g = GaugeSpec(1e3, 1e3, 90.0)  # gauge far from the tip
    eps = strain_at_gauge(1e-3, g, p, (71.7e9, 0.33))
    assert eps == pytest.approx(80e6 / 71.7e9, rel=1e-3)
    assert 80e6 / 71.7e9 == pytest.approx(1.116e-3, rel=1e-3)


def test_on_plane_k_field():
    from ssl_rul.fatigue import _tip_stresses
    a, r = 0.01, 2e-3
    _, syy, txy = _tip_stresses(a, a + r, 0.0, 80e6, 1e-4)
    K = 80e6 * math.sqrt(math.pi * a)
    assert syy - 80e6 == pytest.approx(K / math.sqrt(2 * math.pi * r), rel=1e-12)
    assert txy == pytest.approx(0.0, abs=1e-6)


def test_strain_increases_as_tip_approaches_gauge():
    # regression fixture: 90 deg gauge ahead of the tip at (25, 14) mm
    g = GaugeSpec(25e-3, 14e-3, 90.0)
    a = np.linspace(5e-4, critical_crack_size(MEAN, K_IC), 200)
    eps = strain_at_gauge(a, g, MEAN, (71.7e9, 0.33))
    assert np.all(np.diff(eps) > 0)


def test_clamp_prevents_singularity():
    g = GaugeSpec(10e-3, 0.0, 90.0)
    eps = strain_at_gauge(10e-3, g, MEAN, (71.7e9, 0.33))
    assert np.isfinite(eps)


def test_generate_structure_deterministic():
    cfg = MaterialConfig()
    s1 = generate_structure(structure_rng(5, "labelled", 3), cfg)
    s2 = generate_structure(structure_rng(5, "labelled", 3), cfg)
    assert s1.measurements.tobytes() == s2.measurements.tobytes()
    assert s1.failure_cycles == s2.failure_cycles
    assert s1.measurements.shape[1] == 3
    assert s1.length == s1.failure_cycles // 500
    assert np.all(np.isfinite(s1.measurements))


def test_rejection_resamples():
    # short lifetimes: a0 close to a_crit so many draws are rejected
    cfg = MaterialConfig(a0_mean=1.6e-2, a0_std=2e-3)
    s = generate_structure(structure_rng(0, "labelled", 0), cfg, min_length=31)
    assert s.length >= 31
    assert s.resamples > 0


def test_population_independent_of_start():
    cfg = MaterialConfig()
    a = generate_population(cfg, 4, seed=1)
    b = generate_population(cfg, 2, seed=1, start=2)
    assert [x.id for x in a[2:]] == [x.id for x in b]
    assert all(x.measurements.tobytes() == y.measurements.tobytes() for x, y in zip(a[2:], b))


def test_streams_are_disjoint():
    cfg = MaterialConfig()
    lab = generate_population(cfg, 3, stream="labelled", seed=0)
    tst = generate_population(cfg, 3, stream="test", seed=0)
    assert not {s.params.a0 for s in lab} & {s.params.a0 for s in tst}


def _seq(L, n_g=3, labelled=True):
    X = np.arange(L * n_g, dtype=float).reshape(L, n_g)
    return StrainSequence("s", MEAN, X, failure_cycles=L * 500 + 123 if labelled else None)


def test_truncate():
    s = _seq(248)
    assert truncate(s, 1.0).measurements.tobytes() == s.measurements.tobytes()
    t = truncate(s, 0.6)
    assert t.length == 148
    assert t.failure_cycles is None
    assert truncate(_seq(10), 0.7).length == 7


def test_window_boundaries():
    s = _seq(30)
    assert len(make_windows(s, 30, "AE")) == 1
    assert len(make_windows(s, 30, "AR")) == 0
    assert len(make_windows(_seq(40), 30, "MSPA", q=10)) == 1


def test_window_targets():
    s = _seq(40)
    ae = make_windows(s, 30, "AE")
    assert np.array_equal(ae[0].input, ae[0].target)
    ar = make_windows(s, 30, "AR")
    assert np.array_equal(ar[0].target, s.measurements[30])
    assert ar[0].t_index == 30
    mspa = make_windows(s, 30, "MSPA", q=5)
    assert np.array_equal(mspa[-1].target, s.measurements[35:40])
    rul = make_windows(s, 30, "RUL")
    assert [w.target for w in rul] == [float(40 - t) for t in range(30, 41)]
    assert rul[-1].target == 0.0 and all(w.target > 0 for w in rul[:-1])


@settings(max_examples=60, deadline=None)
@given(L=st.integers(1, 80), h=st.integers(1, 35), q=st.integers(1, 12))
def test_window_count_formulas(L, h, q):
    s = _seq(L)
    for task, expected in [("AE", L - h + 1), ("AR", L - h), ("MSPA", L - h - q + 1), ("RUL", L - h + 1)]:
        ws = make_windows(s, h, task, q)
        assert len(ws) == max(expected, 0) == window_count(L, h, task, q)
        X, Y, t, _ = window_arrays([s], h, task, q)
        assert X.shape[0] == len(ws)
        for w, xi, yi, ti in zip(ws, X, Y, t):
            assert ti == w.t_index
            assert np.array_equal(xi, w.input)
            assert np.array_equal(yi, w.target)
            assert np.array_equal(w.input, s.measurements[w.t_index - h:w.t_index])


def test_rul_needs_failure_time():
    with pytest.raises(ValueError):
        make_windows(_seq(40, labelled=False), 30, "RUL")
