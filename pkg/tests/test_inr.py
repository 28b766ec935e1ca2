import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coral import diffcore as dc
from coral import inr as inr_mod
from coral.codec import LatentCode, SpaceError
from coral.data import Grid, regular_grid
from coral.inr import HypernetParams, Modulations, SirenParams
from oracles import scaled_close


def _val(node):
    return np.asarray(dc.eval_graph(node))


def test_first_layer_bound_example():
    p = inr_mod.siren_init(2, 1, 128, 3, 10.0, 0)
    assert np.abs(p.weights[0]).max() <= 0.5


def test_hidden_bound_example():
    p = inr_mod.siren_init(2, 1, 128, 3, 10.0, 0)
    bound = math.sqrt(6 / 128) / 10
    assert bound == pytest.approx(0.02165, abs=1e-5)
    for W in p.weights[1:]:
        assert np.abs(W).max() <= bound


def test_init_deterministic_and_zero_biases():
    a = inr_mod.siren_init(2, 3, 16, 2, 30.0, 5)
    b = inr_mod.siren_init(2, 3, 16, 2, 30.0, 5)
    for x, y in zip(a.weights + a.biases, b.weights + b.biases):
        np.testing.assert_array_equal(x, y)
    assert all(np.all(bias == 0) for bias in a.biases)
    assert a.weights[0].shape == (16, 2) and a.weights[-1].shape == (3, 16)


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        inr_mod.siren_init(2, 1, 0, 3, 10.0, 0)
    with pytest.raises(ValueError):
        inr_mod.siren_init(2, 1, 8, 3, -1.0, 0)


def test_zero_network_outputs_final_bias():
    p = inr_mod.siren_init(2, 1, 8, 2, 10.0, 0)
    p = SirenParams([np.zeros_like(W) for W in p.weights], [np.zeros_like(b) for b in p.biases], 10.0)
    p.biases[-1] = np.array([0.5])
    out = _val(inr_mod.siren_forward(p, np.random.default_rng(0).uniform(-1, 1, (7, 2))))
    np.testing.assert_array_equal(out, np.full((7, 1), 0.5))


def test_hand_evaluated_siren():
    p = SirenParams([np.array([[0.5]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)], 2.0)
    out = _val(inr_mod.siren_forward(p, np.array([[math.pi / 2]])))
    assert out[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_hand_evaluated_modulation():
    w0, b0 = 3.0, 0.2
    p = SirenParams([np.zeros((1, 1)), np.array([[1.0]])], [np.array([b0]), np.zeros(1)], w0)
    mods = Modulations([np.array([math.pi / (2 * w0) - b0])])
    out = _val(inr_mod.modulated_forward(p, mods, np.linspace(-1, 1, 5)[:, None]))
    np.testing.assert_allclose(out, 1.0, atol=1e-15)


def test_pointwise_duplicate_rows():
    p = inr_mod.siren_init(2, 2, 16, 3, 10.0, 1)
    x = np.random.default_rng(0).uniform(-1, 1, (5, 2))
    a = _val(inr_mod.siren_forward(p, x))
    b = _val(inr_mod.siren_forward(p, np.vstack([x, x[2:3]])))
    np.testing.assert_array_equal(b[:5], a)
    np.testing.assert_array_equal(b[5], a[2])


def test_hypernet_examples():
    d_z, width = 3, 3
    hyper = inr_mod.hypernet_init(d_z, width, 2, 0)
    hyper = HypernetParams(hyper.V, [np.array([1.0, 2.0, 3.0]), np.array([-1.0, 0.0, 1.0])])
    mods = inr_mod.hypernet_modulations(hyper, np.zeros(d_z))
    for phi, c in zip(mods.shifts, hyper.c):
        np.testing.assert_array_equal(_val(phi), c)
    eye = HypernetParams([np.eye(3), np.eye(3)], [np.zeros(3), np.zeros(3)])
    for phi in inr_mod.hypernet_modulations(eye, np.array([1.0, 0.0, 0.0])).shifts:
        np.testing.assert_array_equal(_val(phi), [1.0, 0.0, 0.0])


@given(st.integers(0, 50))
def test_hypernet_affine(seed):
    rng = np.random.default_rng(seed)
    hyper = inr_mod.hypernet_init(4, 6, 3, seed)
    hyper = HypernetParams(hyper.V, [rng.normal(size=6) for _ in range(3)])
    z1, z2 = rng.normal(size=4), rng.normal(size=4)

    def phi(z):
        return [_val(s) for s in inr_mod.hypernet_modulations(hyper, z).shifts]

    for a, b, c, d in zip(phi(z1 + z2), phi(z1), phi(z2), phi(np.zeros(4))):
        np.testing.assert_allclose(a - b - c + d, 0.0, atol=1e-12)


def test_hypernet_dimension_mismatch():
    with pytest.raises(dc.ShapeError):
        inr_mod.hypernet_modulations(inr_mod.hypernet_init(4, 6, 2, 0), np.zeros(5))


def test_zero_modulation_matches_plain_siren():
    for seed in range(5):
        p = inr_mod.siren_init(2, 3, 32, 3, 10.0, seed)
        x = np.random.default_rng(seed).uniform(-1, 1, (40, 2))
        mods = Modulations([np.zeros(32)] * 3)
        a = _val(inr_mod.modulated_forward(p, mods, x))
        b = _val(inr_mod.siren_forward(p, x))
        assert np.abs(a - b).max() <= 1e-12


def test_modulation_layer_count_checked():
    p = inr_mod.siren_init(2, 1, 8, 3, 10.0, 0)
    with pytest.raises(ValueError):
        inr_mod.modulated_forward(p, Modulations([np.zeros(8)] * 2), np.zeros((1, 2)))


def test_shift_periodicity():
    p = inr_mod.siren_init(2, 1, 16, 2, 10.0, 3)
    x = np.random.default_rng(3).uniform(-1, 1, (9, 2))
    rng = np.random.default_rng(4)
    shifts = [rng.normal(size=16) * 0.1 for _ in range(2)]
    a = _val(inr_mod.modulated_forward(p, Modulations(shifts), x))
    shifted = [shifts[0] + 2 * math.pi / 10.0, shifts[1]]
    b = _val(inr_mod.modulated_forward(p, Modulations(shifted), x))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_batched_decode_matches_single():
    model = inr_mod.inr_init(2, 1, 4, 16, 2, 10.0, 0)
    rng = np.random.default_rng(0)
    z = rng.normal(size=(3, 4)) * 0.1
    x = rng.uniform(-1, 1, (11, 2))
    batched = _val(inr_mod.decode_values(model, z, x))
    for i in range(3):
        np.testing.assert_allclose(batched[i], _val(inr_mod.decode_values(model, z[i], x)), atol=1e-14)
    per_sample = _val(inr_mod.decode_values(model, z, np.stack([x] * 3)))
    np.testing.assert_allclose(per_sample, batched, atol=1e-14)


def test_decode_examples():
    model = inr_mod.inr_init(2, 1, 4, 16, 2, 10.0, 1)
    grid = regular_grid(6)
    z = LatentCode(np.array([0.1, -0.2, 0.3, 0.0]))
    perm = np.random.default_rng(0).permutation(len(grid))
    out = inr_mod.decode(model, z, grid)
    out_p = inr_mod.decode(model, z, Grid(grid.points[perm]))
    np.testing.assert_array_equal(out_p.values, out.values[perm])

    zero = inr_mod.decode(model, LatentCode(np.zeros(4)), grid)
    ref = _val(inr_mod.modulated_forward(model.siren, Modulations(model.hyper.c), grid.points))
    np.testing.assert_array_equal(zero.values, ref)

    fine = regular_grid(12)
    dense = inr_mod.decode(model, z, fine)
    shared = np.isin(fine.points.view([("", float)] * 2), grid.points.view([("", float)] * 2)).ravel()
    coarse_of_fine = inr_mod.decode(model, z, Grid(fine.points[shared]))
    np.testing.assert_array_equal(dense.values[shared], coarse_of_fine.values)


def test_decode_refuses_normalized_codes():
    model = inr_mod.inr_init(2, 1, 4, 8, 1, 10.0, 0)
    with pytest.raises(SpaceError):
        inr_mod.decode(model, LatentCode(np.zeros(4), "normalized"), regular_grid(3))


def test_decode_gradient_in_z_matches_finite_diff():
    model = inr_mod.inr_init(2, 1, 6, 16, 3, 10.0, 2)
    x = np.random.default_rng(1).uniform(-1, 1, (20, 2))
    z0 = np.random.default_rng(2).normal(size=6) * 0.2
    z = dc.variable(z0)
    (g,) = dc.gradient(dc.total(inr_mod.decode_values(model, z, x)), [z])

    def f(zz):
        with dc.no_grad():
            return float(dc.total(inr_mod.decode_values(model, zz, x)).value)

    assert scaled_close(g.value, dc.finite_diff(f, z0, 1e-5), 1e-6)


def test_inr_checkpoint_round_trip(tmp_path):
    model = inr_mod.inr_init(2, 3, 5, 8, 2, 12.5, 4)
    inr_mod.save_inr(tmp_path / "m.bin", model)
    back = inr_mod.load_inr(tmp_path / "m.bin")
    assert back.siren.omega0 == 12.5
    for a, b in zip(model.leaves(), back.leaves()):
        np.testing.assert_array_equal(a, b)
