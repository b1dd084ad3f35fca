"""Vector-field evaluation, activation menu contracts, checkpoints."""

import numpy as np
import pytest

from flowtune.autodiff import Tensor, grad_check
from flowtune.fields import (ConstantField, ControlSynthField, LeakyRelu,
                             LinearField, MlpField, PerturbedField, Tanh,
                             decay_field, lipschitz_estimate, load_checkpoint,
                             make_activation, save_checkpoint)
from flowtune.rng import Rng


def test_constant_field_eval():
    f = ConstantField(np.array([1.0, 0.0]))
    out = f.velocity(0.3, np.array([[5.0, -2.0]]))
    assert np.allclose(out, [[1.0, 0.0]])


def test_controlsynth_linear_case():
    f = ControlSynthField.zeros(2, block_dims=(), activations=(), slopes=())
    f.params["A0"].data[...] = -np.eye(2)
    out = f.velocity(0.0, np.array([[2.0, 0.0]]))
    assert np.allclose(out, [[-2.0, 0.0]])


def test_zero_mlp_outputs_zero():
    f = MlpField(2, init="zeros")
    out = f.velocity(0.7, np.array([[1.5, -3.0], [0.0, 0.0]]))
    assert np.allclose(out, 0.0)


def test_mlp_gradients_wrt_params_and_state():
    rng = Rng(1)
    f = MlpField(2, hidden=(8,), rng=rng)
    x = rng.normal((3, 2))
    def loss(_):
        return f.forward(0.25, Tensor(x)).square().sum()
    assert grad_check(loss, f.params) <= 1e-4
    # gradient w.r.t. the state via an input parameter
    from flowtune.autodiff import ParamStore
    ps = ParamStore()
    ps.add("x", x.copy())
    def loss_x(store):
        return f.forward(0.25, store["x"]).square().sum()
    assert grad_check(loss_x, ps) <= 1e-4


def test_controlsynth_gradients():
    rng = Rng(2)
    f = ControlSynthField(2, block_dims=(3,), rng=rng)
    for _, p in f.params.items():
        p.data += 0.1 * rng.normal(p.data.shape)
    x = rng.normal((4, 2))
    u = rng.normal((4, 2))
    def loss(_):
        return f.forward(0.0, Tensor(x), u).square().sum()
    assert grad_check(loss, f.params) <= 1e-4


@pytest.mark.parametrize("act", [Tanh(), LeakyRelu(0.1), LeakyRelu(2.0)])
def test_activation_menu_assumptions(act):
    # sign condition s f(s) > 0 and strict monotonicity on a log grid
    grid = np.concatenate([-np.logspace(-3, 1, 60), np.logspace(-3, 1, 60)])
    vals = act(grid)
    assert np.all(grid * vals > 0)
    order = np.argsort(grid)
    diffs = np.diff(vals[order])
    assert np.all(diffs > 0)


def test_activation_integral_matches_quadrature():
    from scipy.integrate import quad
    for act in (Tanh(), LeakyRelu(0.3)):
        for w in (-2.0, -0.5, 0.7, 3.0):
            num, _ = quad(lambda s: float(act(np.array(s))), 0.0, w)
            assert act.integral(np.array(w)) == pytest.approx(num, abs=1e-9)


def test_leaky_relu_needs_positive_slope():
    with pytest.raises(ValueError):
        make_activation("leaky_relu", -0.1)
    with pytest.raises(ValueError):
        make_activation("sigmoid")


def test_lipschitz_estimates():
    rng = Rng(3)
    lin = LinearField(np.diag([2.0, 3.0]))
    est = lipschitz_estimate(lin, [-1, -1], [1, 1], 10_000, rng)
    assert 2.9 <= est <= 3.0 + 1e-9
    assert lipschitz_estimate(ConstantField(np.ones(2)), [-1, -1], [1, 1],
                              100, Rng(0)) == 0.0
    dec = lipschitz_estimate(decay_field(2), [-1, -1], [1, 1], 2000, Rng(1))
    assert dec == pytest.approx(1.0, abs=1e-6)


def test_lipschitz_degenerate_box_rejected():
    with pytest.raises(ValueError):
        lipschitz_estimate(decay_field(2), [0, 0], [0, 1], 10, Rng(0))


def test_perturbed_field_stays_within_delta():
    base = decay_field(2)
    pert = PerturbedField(base, delta=0.07)
    rng = Rng(8)
    xs = rng.uniform(-3, 3, (100_000, 2))
    ts = rng.uniform(0, 1, 100_000)
    worst = 0.0
    for i in range(0, 100_000, 5000):
        x = xs[i:i + 5000]
        t = float(ts[i])
        gap = np.linalg.norm(pert.velocity(t, x) - base.velocity(t, x), axis=1)
        worst = max(worst, float(gap.max()))
    assert worst <= 0.07 + 1e-12


def test_checkpoint_roundtrip(tmp_path):
    rng = Rng(4)
    f = MlpField(2, hidden=(5, 4), time_feature_count=6, rng=rng)
    path = tmp_path / "ckpt.json"
    save_checkpoint(f, path, rng_seed=4, training_step=17, stage="pretrained")
    g, doc = load_checkpoint(path)
    assert doc["format_version"] == 1
    assert doc["stage"] == "pretrained"
    assert doc["training_step"] == 17
    x = rng.normal((3, 2))
    assert np.array_equal(f.velocity(0.4, x), g.velocity(0.4, x))


def test_checkpoint_roundtrip_controlsynth(tmp_path):
    rng = Rng(6)
    f = ControlSynthField(2, block_dims=(4,), activations=("leaky_relu",),
                          slopes=(0.2,), rng=rng)
    f.params["A1"].data += rng.normal(f.params["A1"].data.shape)
    path = tmp_path / "res.json"
    save_checkpoint(f, path)
    g, _ = load_checkpoint(path)
    x = rng.normal((2, 2))
    u = rng.normal((2, 2))
    assert np.array_equal(f.velocity(0.0, x, u), g.velocity(0.0, x, u))
    assert g.activations[0].slope == pytest.approx(0.2)
