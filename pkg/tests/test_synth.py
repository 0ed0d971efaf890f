import math
import warnings

import numpy as np
import pytest

from evpino import numerics as nx
from evpino.physics import VehicleSpec, battery_power, mech_power
from evpino.synth import CycleSpec, SynthConfig, forward_oracle, gen_cycle, gen_log


def physics_kw(v, a, cfg):
    spec = VehicleSpec(frontal_area=cfg.frontal_area, rho=cfg.rho, g=cfg.g)
    eta = cfg.eta + cfg.eta_gain / (1 + np.exp(-(v - cfg.eta_v0) / cfg.eta_slope))
    pm = mech_power(v, a, cfg.cd, cfg.crr, cfg.mass, spec)
    return battery_power(pm, a, eta, cfg.mu, cfg.paux).data / 1000.0


def test_single_sine_cycle():
    cfg = SynthConfig(cycle=CycleSpec(base=15.0, sines=[(0.05, 5.0, 0.0)]), duration=200.0)
    t, v, a = gen_cycle(cfg)
    assert v.min() >= 10.0 - 1e-9 and v.max() <= 20.0 + 1e-9
    assert np.abs(a).max() == pytest.approx(2 * math.pi * 0.05 * 5, rel=1e-6)
    assert 2 * math.pi * 0.05 * 5 == pytest.approx(1.571, abs=1e-3)


def test_constant_cycle_warns():
    cfg = SynthConfig(cycle=CycleSpec(base=12.0, sines=[]), duration=60.0)
    with pytest.warns(RuntimeWarning):
        _, v, a = gen_cycle(cfg)
    np.testing.assert_array_equal(v, 12.0)
    np.testing.assert_array_equal(a, 0.0)


def test_seeded_determinism():
    cyc = CycleSpec(sines=[(0.05, 5.0, None), (0.02, 3.0, None)])
    one = gen_log(SynthConfig(cycle=cyc, noise_std=0.1, seed=4))
    two = gen_log(SynthConfig(cycle=cyc, noise_std=0.1, seed=4))
    np.testing.assert_array_equal(one.v, two.v)
    np.testing.assert_array_equal(one.p_bat, two.p_bat)
    three = gen_log(SynthConfig(cycle=cyc, noise_std=0.1, seed=5))
    assert not np.array_equal(one.v, three.v)


def test_oracle_cruise_value():
    assert forward_oracle([20.0], [0.0], SynthConfig())[0] == pytest.approx(8.473, abs=1e-3)
    assert forward_oracle([0.0], [0.0], SynthConfig())[0] == pytest.approx(1.0)


def test_oracle_matches_physics_module():
    rng = np.random.default_rng(0)
    n = 10_000
    v = rng.uniform(0, 40, n)
    a = rng.uniform(-3, 3, n)
    cfg = SynthConfig(cd=0.27, crr=0.011, mass=2200.0, paux=640.0, eta=0.78, mu=0.61, eta_gain=0.05)
    p_oracle = forward_oracle(v, a, cfg)
    p_module = physics_kw(v, a, cfg)
    scale = np.maximum(np.abs(p_oracle), 1e-3)
    assert np.max(np.abs(p_oracle - p_module) / scale) < 1e-9


def test_log_round_trip_and_length():
    cfg = SynthConfig(fs=10.0, duration=600.0)
    lg = gen_log(cfg)
    assert len(lg) == 6000
    _, v, a = gen_cycle(cfg)
    np.testing.assert_allclose(lg.p_bat, forward_oracle(v, a, cfg), rtol=1e-9)
    np.testing.assert_allclose(lg.volt, 360.0)


def test_inertial_energy_vanishes_on_closed_cycle():
    cfg = SynthConfig(duration=600.0)
    t, v, a = gen_cycle(cfg)
    assert abs(v[0] - v[-1]) < 0.2  # whole periods in 600 s, one sample short
    work = np.sum(cfg.mass * a * v) / cfg.fs
    peak = np.sum(np.abs(cfg.mass * a * v)) / cfg.fs
    assert abs(work) < 0.01 * peak


def test_braking_without_aux_goes_negative():
    cfg = SynthConfig(paux=0.0, mu=0.7)
    lg = gen_log(cfg)
    _, _, a = gen_cycle(cfg)
    assert np.any(lg.p_bat[a < -0.5] < 0)


def test_idle_segments_reach_rest():
    cyc = CycleSpec(base=10.0, sines=[(0.02, 2.0, 0.0)], idles=[(100.0, 150.0)], idle_blend=10.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        t, v, a = gen_cycle(SynthConfig(cycle=cyc, duration=300.0))
    inside = (t > 101) & (t < 149)
    np.testing.assert_array_equal(v[inside], 0.0)
    # the analytic derivative matches a central difference of the speed
    fd = np.gradient(v, t)
    assert np.abs(fd - a)[5:-5].max() < 0.05
