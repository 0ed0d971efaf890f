from types import SimpleNamespace

import numpy as np
import pytest

from evpino import numerics as nx
from evpino.errors import CheckpointVersionError, ConfigError, ShapeError
from evpino.operator import (OperatorConfig, OperatorModel, count_params, load_checkpoint,
                             read_checkpoint, save_checkpoint)
from evpino.physics import BASELINE_NAMES, VehicleSpec, unbound
from evpino.synth import SynthConfig, forward_oracle

TINY = OperatorConfig(n_modes=2, width=4, n_layers=1, lift_hidden=4, var_channels=2, window=8)


def batch(rng, B=2, L=8, vmax=30.0):
    v = rng.uniform(0.5, vmax, (B, L))
    a = rng.uniform(-2.0, 2.0, (B, L))
    return SimpleNamespace(v_raw=v, a_raw=a, v_n=(v - 15) / 8, a_n=a, xi=np.linspace(0, 1, L))


def randomize_heads(model, rng, scale=0.5):
    for name in ("var_head.w", "var_head.b", "buffer_head.w", "buffer_head.b", "baselines"):
        p = model[name]
        p.data[...] = rng.normal(0, scale, p.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(3)


# ------------------------------------------------------------------ counts
def test_default_and_ev9_counts():
    total, parts = count_params(OperatorConfig(), by_component=True)
    assert total == 690_697
    assert parts == {"lift": 33_920, "spectral": 524_288, "pointwise": 132_096, "buffer_head": 129,
                     "var_head": 258, "baselines": 6}
    ev9, parts9 = count_params(OperatorConfig(var_channels=3), by_component=True)
    assert ev9 == 690_826 and parts9["var_head"] == 387


def test_smallest_count_by_hand():
    cfg = OperatorConfig(n_modes=1, width=1, n_layers=1, lift_hidden=1, var_channels=2, window=8)
    assert count_params(cfg) == 24


@pytest.mark.parametrize("cfg", [TINY, OperatorConfig(n_modes=3, width=6, n_layers=2, lift_hidden=5,
                                                      var_channels=3, window=16)])
def test_instantiated_model_matches_closed_form(cfg):
    model = OperatorModel(cfg)
    total, parts = count_params(cfg, by_component=True)
    assert model.n_params() == total
    assert model.component_counts() == parts


def test_config_validation():
    with pytest.raises(ConfigError):
        OperatorConfig(var_channels=4)
    with pytest.raises(ConfigError):
        OperatorConfig(n_modes=10, window=16)
    with pytest.raises(ConfigError):
        OperatorConfig(width=0)
    with pytest.raises(ConfigError, match="depth"):
        OperatorConfig.from_dict({"depth": 3})


# ------------------------------------------------------------------ trunk
def test_lift_shape_and_zero_weights(rng):
    model = OperatorModel(TINY)
    b = batch(rng)
    assert model.lift(b.v_n, b.a_n, b.xi).shape == (2, 8, 4)
    for name in ("lift.w1", "lift.b1", "lift.w2", "lift.b2"):
        model[name].data[...] = 0.0
    np.testing.assert_array_equal(model.lift(b.v_n, b.a_n, b.xi).data, 0.0)
    with pytest.raises(ShapeError):
        model.lift(b.v_n, b.a_n[:, :4], b.xi)


def test_block_is_identity_with_zero_spectral_and_mlp(rng):
    model = OperatorModel(TINY)
    for name in ("blocks.0.spectral", "blocks.0.w2", "blocks.0.b2"):
        model[name].data[...] = 0.0
    x = rng.normal(size=(2, 8, 4))
    np.testing.assert_allclose(model.block(nx.Tensor(x), 0).data, x, atol=1e-15)


def test_identity_spectral_weights_low_pass(rng):
    cfg = OperatorConfig(n_modes=3, width=2, n_layers=1, lift_hidden=2, window=16)
    model = OperatorModel(cfg)
    R = np.zeros((3, 2, 2, 2))
    R[:, 0, 0, 0] = R[:, 1, 1, 0] = 1.0
    model["blocks.0.spectral"].data[...] = R
    x = rng.normal(size=(1, 16, 2))
    out = model.spectral_conv(nx.Tensor(x), 0).data
    # oracle: full complex DFT, keep bins |k| < 3, invert
    X = nx.rfft_direct(x[0].T, 16)
    full = np.zeros((2, 16), complex)
    full[:, :3] = X[:, :3]
    full[:, -2:] = np.conj(X[:, 1:3][:, ::-1])
    back = np.fft.ifft(full, axis=1)
    assert np.abs(back.imag).max() < 1e-12
    np.testing.assert_allclose(out[0].T, back.real, atol=1e-12)


def test_spectral_layer_resolution_invariance(rng):
    cfg = OperatorConfig(n_modes=4, width=3, n_layers=1, lift_hidden=2, window=32)
    model = OperatorModel(cfg, seed=5)
    model["blocks.0.spectral"].data[...] = rng.normal(size=(4, 3, 3, 2))
    t_coarse, t_fine = np.arange(32) / 32, np.arange(64) / 64

    def signal(t):
        chans = [np.cos(2 * np.pi * 1 * t + 0.3), np.sin(2 * np.pi * 3 * t) + 0.5,
                 np.cos(2 * np.pi * 2 * t) * 0.7]
        return np.stack(chans, axis=-1)[None]

    coarse = model.spectral_conv(nx.Tensor(signal(t_coarse)), 0).data
    fine = model.spectral_conv(nx.Tensor(signal(t_fine)), 0).data
    np.testing.assert_allclose(fine[:, ::2], coarse, rtol=0, atol=1e-5 * np.abs(coarse).max())


def test_trunk_accepts_other_lengths(rng):
    model = OperatorModel(TINY)
    assert model.features(*[np.zeros((1, 16))] * 2, np.linspace(0, 1, 16)).shape == (1, 16, 4)
    with pytest.raises(ShapeError):
        model.features(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1))


# ------------------------------------------------------------------ heads
def test_init_is_physics_at_midpoints(rng):
    spec = VehicleSpec()
    model = OperatorModel(TINY)
    b = batch(rng)
    trace, p_res, p_pred = model(b, spec)
    np.testing.assert_array_equal(p_res.data, 0.0)
    mid = spec.midpoints()
    for name in BASELINE_NAMES:
        assert getattr(trace, {"paux": "paux0", "eta": "eta0", "mu": "mu0"}.get(name, name)).item() \
            == pytest.approx(mid[name])
    truth = SynthConfig(cd=mid["cd"], crr=mid["crr"], mass=mid["mass"], paux=mid["paux"],
                        eta=mid["eta"], mu=mid["mu"])
    want = forward_oracle(b.v_raw.ravel(), b.a_raw.ravel(), truth).reshape(b.v_raw.shape)
    np.testing.assert_allclose(p_pred.data, want, rtol=1e-12)


def test_pinned_baselines_reproduce_oracle(rng):
    spec = VehicleSpec()
    truth = SynthConfig()
    model = OperatorModel(TINY)
    model["baselines"].data[...] = [unbound(getattr(truth, n), *spec.bounds(n)) for n in BASELINE_NAMES]
    b = batch(rng, B=3, L=8)
    _, _, p_pred = model(b, spec)
    want = forward_oracle(b.v_raw.ravel(), b.a_raw.ravel(), truth).reshape(b.v_raw.shape)
    np.testing.assert_allclose(p_pred.data, want, rtol=1e-9)


def test_variations_bounded_and_clipped(rng):
    spec = VehicleSpec()
    model = OperatorModel(TINY)
    model["var_head.w"].data[...] = rng.normal(0, 50, (4, 2))
    trace, _, _ = model(batch(rng, vmax=40.0), spec)
    for d in (trace.d_eta, trace.d_mu):
        assert np.abs(d.data).max() <= 1.0
    assert spec.eta_bounds[0] <= trace.eta.data.min() and trace.eta.data.max() <= spec.eta_bounds[1]
    assert spec.mu_bounds[0] <= trace.mu.data.min() and trace.mu.data.max() <= spec.mu_bounds[1]
    assert trace.d_paux is None


def test_variable_aux_channel(rng):
    cfg = OperatorConfig(n_modes=2, width=4, n_layers=1, lift_hidden=4, var_channels=3, window=8)
    model = OperatorModel(cfg)
    randomize_heads(model, rng)
    trace, _, _ = model(batch(rng), VehicleSpec(paux_mode="variable"))
    assert trace.paux.shape == (2, 8) and trace.d_paux.shape == (2, 8)
    with pytest.raises(ConfigError):
        model(batch(rng), VehicleSpec())
    with pytest.raises(ConfigError):
        OperatorModel(TINY)(batch(rng), VehicleSpec(paux_mode="variable"))


def test_low_speed_gate_suppresses_variation(rng):
    model = OperatorModel(TINY)
    randomize_heads(model, rng, scale=3.0)
    b = batch(rng, vmax=1.0)
    trace, _, _ = model(b, VehicleSpec())
    assert np.abs(trace.eta.data - trace.eta0.item()).max() < 0.05 * 1e-3


def test_full_model_gradients(rng):
    spec = VehicleSpec()
    model = OperatorModel(TINY, seed=1)
    randomize_heads(model, rng)
    model["blocks.0.spectral"].data[...] = rng.normal(0, 0.3, model["blocks.0.spectral"].shape)
    b = batch(rng)
    target = rng.uniform(0, 20, (2, 8))
    names = list(model.params)
    arrays = [model[n].data.copy() for n in names]

    def loss(*tensors):
        saved = dict(model.params)
        model.params.update(zip(names, tensors))
        try:
            _, p_res, p_pred = model(b, spec)
            return nx.mean(nx.square(p_pred - target)) + nx.mean(nx.square(p_res))
        finally:
            model.params.update(saved)

    assert nx.check_grad(loss, arrays) < 1e-4


# ------------------------------------------------------------------ checkpoints
def test_checkpoint_round_trip(tmp_path, rng):
    model = OperatorModel(TINY, seed=9)
    randomize_heads(model, rng)
    path = tmp_path / "m.ck"
    save_checkpoint(path, model, {"best_val": 0.25, "epoch": 7, "scaler": {"mean": [1, 2]}})
    back, meta = load_checkpoint(path)
    assert meta == {"best_val": 0.25, "epoch": 7, "scaler": {"mean": [1, 2]}}
    assert back.cfg == TINY
    for name, p in model.params.items():
        assert back[name].data.tobytes() == p.data.tobytes()
    b = batch(rng)
    np.testing.assert_array_equal(back(b, VehicleSpec())[2].data, model(b, VehicleSpec())[2].data)
    assert not (tmp_path / "m.ck.tmp").exists()


def test_checkpoint_rejects_mismatch_and_version(tmp_path):
    path = tmp_path / "m.ck"
    save_checkpoint(path, OperatorModel(TINY))
    with pytest.raises(CheckpointVersionError, match="width"):
        load_checkpoint(path, expect=OperatorConfig(n_modes=2, width=8, window=8))
    raw = bytearray(path.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    (tmp_path / "v.ck").write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="version 99"):
        read_checkpoint(tmp_path / "v.ck")
    (tmp_path / "junk.ck").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointVersionError):
        read_checkpoint(tmp_path / "junk.ck")
