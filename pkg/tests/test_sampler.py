import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from freeecho.denoiser import GaussianOracle, gaussian_oracle_denoiser
from freeecho.sampler import (NonFiniteStateError, SamplerConfig, Trajectory, cfg_denoiser, initial_noise,
                              integrate, ode_rhs, sample_full, sample_truncated, sigma_at_step)
from freeecho.schedule import NoiseSchedule, step_sigmas
from oracles import gaussian_ode_endpoint

C2 = 0.25
ORACLE = gaussian_oracle_denoiser(GaussianOracle(0.0, C2))


def identity(x, sigma, condition=None):
    return x


def test_rhs_examples(rng):
    x = rng.standard_normal(5)
    np.testing.assert_array_equal(ode_rhs(x, 0.7, identity), 0.0)
    np.testing.assert_allclose(ode_rhs(x, 0.7, lambda x, s: np.zeros_like(x)), x / 0.7)
    np.testing.assert_allclose(ode_rhs(x, 0.7, ORACLE), x * 0.7 / (C2 + 0.49), rtol=1e-14)
    with pytest.raises(ValueError):
        ode_rhs(x, 0.0, identity)


def test_identity_denoiser_is_stationary():
    cfg = SamplerConfig(t_i=64)
    out = sample_full(identity, (3, 4), cfg, rng=np.random.default_rng(2))
    np.testing.assert_array_equal(out, initial_noise((3, 4), cfg, np.random.default_rng(2)))


def test_full_sampling_matches_pushforward():
    cfg = SamplerConfig(t_i=64, seed=0)
    out = sample_full(ORACLE, (10_000, 8), cfg)
    assert np.abs(out.mean(axis=0)).max() < 0.02
    assert np.abs(out.var(axis=0) / C2 - 1).max() < 0.05


def test_sampling_deterministic():
    cfg = SamplerConfig(t_i=64, seed=3)
    assert np.array_equal(sample_full(ORACLE, (4, 2), cfg), sample_full(ORACLE, (4, 2), cfg))


def _terminal_error(solver, n):
    sched = NoiseSchedule(num_steps=n)
    x0 = 80.0 * np.random.default_rng(0).standard_normal(64)
    out = integrate(ORACLE, x0, step_sigmas(sched), solver)
    return np.abs(out - gaussian_ode_endpoint(x0, 80.0, C2)).max()


def solver_slopes():
    ns = np.array([8, 16, 32, 64, 128])
    return {s: np.polyfit(np.log(ns), np.log([_terminal_error(s, n) for n in ns]), 1)[0] for s in ("euler", "heun")}


def test_solver_order():
    slopes = solver_slopes()
    assert abs(slopes["euler"] + 1) <= 0.5
    assert abs(slopes["heun"] + 2) <= 0.5


def test_sigma_at_step():
    s = NoiseSchedule()
    ladder = step_sigmas(s)
    assert sigma_at_step(s, 64) == 80.0
    assert sigma_at_step(s, 1) == 0.002
    assert sigma_at_step(s, 15) == ladder[49]
    for bad in (0, 65):
        with pytest.raises(ValueError):
            sigma_at_step(s, bad)


def test_truncated_full_length_equals_full():
    cfg = SamplerConfig(t_i=64)
    init = initial_noise((5, 3), cfg, np.random.default_rng(9))
    a = sample_truncated(ORACLE, init, cfg)
    b = sample_full(ORACLE, (5, 3), cfg, rng=np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_truncated_zero_steps_is_noop(caplog):
    init = np.arange(6.0)
    with caplog.at_level(logging.WARNING):
        out = sample_truncated(ORACLE, init, SamplerConfig(t_i=0))
    np.testing.assert_array_equal(out, init)
    assert out is not init
    assert "t_i = 0" in caplog.text


def test_truncated_contracts_and_moves_further_with_t():
    rng = np.random.default_rng(1)
    clean = 0.5 * rng.standard_normal((2000, 4))
    n = rng.standard_normal(clean.shape)
    dist = []
    for t in (5, 15, 35, 55):
        cfg = SamplerConfig(t_i=t)
        init = clean + sigma_at_step(cfg.schedule, t) * n
        out = sample_truncated(ORACLE, init, cfg)
        assert out.var() < init.var()
        dist.append(np.mean(np.sum((out - init) ** 2, axis=1)))
    assert np.all(np.diff(dist) > 0)


def test_trajectory_records_and_dumps(tmp_path):
    tr = Trajectory(every=8)
    sample_full(ORACLE, (2, 2), SamplerConfig(t_i=64), trajectory=tr)
    assert tr.sigmas[0] == 80.0 and tr.sigmas[-1] == 0.0
    assert np.all(np.diff(tr.sigmas) < 0)
    paths = tr.dump(tmp_path)
    assert len(paths) == len(tr.states)
    np.testing.assert_array_equal(np.load(paths[-1]), tr.states[-1])
    assert len((tmp_path / "sigmas.txt").read_text().splitlines()) == len(paths)


def test_non_finite_state_raises():
    def bad(x, sigma):
        return np.full_like(x, np.nan)

    with pytest.raises(NonFiniteStateError) as err:
        sample_full(bad, (2,), SamplerConfig(t_i=64))
    assert err.value.step == 0 and err.value.sigma == 80.0


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(solver="rk4")
    with pytest.raises(ValueError):
        SamplerConfig(t_i=65)
    with pytest.raises(ValueError):
        sample_full(ORACLE, (2,), SamplerConfig(t_i=10))


@given(g=st.floats(0, 20), v=st.floats(-3, 3))
def test_guidance_linearity(g, v):
    def den(x, sigma, cond=None):
        return 0.3 * x + (v if cond is not None else 0.0)

    x = np.linspace(-1, 1, 5)
    np.testing.assert_allclose(cfg_denoiser(den, "c", g)(x, 1.0), 0.3 * x + g * v, atol=1e-12)


def test_guidance_endpoints(rng):
    def den(x, sigma, cond=None):
        return x * (2.0 if cond is not None else -1.0)

    x = rng.standard_normal(4)
    np.testing.assert_allclose(cfg_denoiser(den, "c", 1.0)(x, 1.0), den(x, 1.0, "c"), rtol=1e-15, atol=1e-15)
    np.testing.assert_array_equal(cfg_denoiser(den, "c", 0.0)(x, 1.0), den(x, 1.0, None))
