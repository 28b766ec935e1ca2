import numpy as np
import pytest

from coral import data
from coral import diffcore as dc
from coral import inr as inr_mod
from coral import metatrain as mt
from coral.codec import EncoderConfig, batch_losses, inner_loop
from coral.processor import linear_init, skip_mlp_init
from oracles import scaled_close


def _outer_loss(model, coords, values, alpha, K):
    with dc.no_grad():
        z = inner_loop(model, coords, values, alpha, K, create_graph=False)
        return float(dc.mean(batch_losses(model, z, coords, values)).value)


def _fixture_batch():
    model = inr_mod.inr_init(2, 1, 3, 8, 2, 10.0, 7)
    rng = np.random.default_rng(7)
    coords = rng.uniform(-1, 1, (10, 2))
    values = np.sin(3 * coords[:, :1])[None] * rng.normal(size=(2, 1, 1)) + 0.1
    return model, coords, values


def check_second_order(K, tol=1e-4):
    """Analytic outer gradients vs central differences over every shared weight and alpha."""
    model, coords, values = _fixture_batch()
    alpha = 0.05
    _, _, grads, g_alpha = mt.outer_loss_and_grads(model, coords, values, alpha, K, learn_alpha=True)
    leaves = model.leaves()
    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            new = list(leaves)
            new[i] = x
            return _outer_loss(model.with_leaves(new), coords, values, alpha, K)

        if not scaled_close(grads[i], dc.finite_diff(f, leaf, 1e-5), tol):
            return False
    ref = dc.finite_diff(lambda a: _outer_loss(model, coords, values, float(a[0]), K), [alpha], 1e-5)
    return scaled_close(g_alpha, ref[0], tol)


@pytest.mark.parametrize("K", [1, 2, 3])
def test_second_order_gradient_oracle(K):
    assert check_second_order(K)


def test_first_order_gradient_differs_from_second():
    model, coords, values = _fixture_batch()
    _, _, g2, _ = mt.outer_loss_and_grads(model, coords, values, 0.05, 3)
    _, _, g1, _ = mt.outer_loss_and_grads(model, coords, values, 0.05, 3, first_order=True)
    assert max(np.abs(a - b).max() for a, b in zip(g1, g2)) > 1e-6


def test_adam_examples():
    p = [np.array([1.0, -2.0]), np.array([[3.0]])]
    st = mt.AdamState.zeros_like(p)
    new, st1 = mt.adam_step(st, p, [np.zeros(2), np.zeros((1, 1))], 1e-3)
    for a, b in zip(new, p):
        np.testing.assert_array_equal(a, b)
    assert st1.t == 1

    g = np.array([0.5, -4.0])
    (step,), _ = mt.adam_step(mt.AdamState.zeros_like([g]), [np.zeros(2)], [g], 1e-3)
    np.testing.assert_allclose(step, -1e-3 * np.sign(g), rtol=1e-6)

    (a, b), _ = mt.adam_step(mt.AdamState.zeros_like([0.0, 0.0]), [np.array(1.0), np.array(5.0)],
                             [np.array(0.3), np.array(0.3)], 1e-2)
    assert a - 1.0 == pytest.approx(b - 5.0, abs=1e-15)

    with pytest.raises(ValueError):
        mt.adam_step(mt.AdamState.zeros_like([np.zeros(2)]), [np.zeros(2)], [np.zeros(3)], 1e-3)


def test_adam_matches_hand_recursion():
    rng = np.random.default_rng(0)
    p = rng.normal(size=3)
    st = mt.AdamState.zeros_like([p])
    m = v = np.zeros(3)
    q = p.copy()
    for t in range(1, 6):
        g = rng.normal(size=3)
        (p,), st = mt.adam_step(st, [p], [g], 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        q = q - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, q, atol=1e-15)


def test_plateau_examples():
    assert mt.plateau_scheduler(np.linspace(10, 1, 400), 1e-2, 5, 0.5) == [1e-2] * 400
    lrs = mt.plateau_scheduler([1.0] * 251, 1e-3, 250, 0.5)
    assert lrs[249] == 1e-3 and lrs[250] == 5e-4
    assert [lrs.index(x) for x in sorted(set(lrs), reverse=True)] == [0, 250]
    lrs = mt.plateau_scheduler([1.0] * 200, 1e-3, 5, 0.5, min_lr=1e-5)
    assert lrs[-1] == 1e-5 and min(lrs) == 1e-5


def test_plateau_relative_threshold():
    # improvements smaller than 1% count as bad epochs
    trace = [1.0] + [1.0 - 1e-4 * k for k in range(1, 10)]
    assert mt.plateau_scheduler(trace, 1.0, 3, 0.5)[-1] < 1.0
    trace = [1.0 * 0.95 ** k for k in range(10)]
    assert mt.plateau_scheduler(trace, 1.0, 3, 0.5)[-1] == 1.0


def test_outer_step_stationary_on_exact_fit():
    model = inr_mod.inr_init(2, 1, 3, 8, 2, 10.0, 1)
    coords = np.random.default_rng(0).uniform(-1, 1, (6, 2))
    # the zero code already reconstructs this target: no inner or outer movement
    values = np.array(inr_mod.decode_values(model, np.zeros((1, 3)), coords).value)
    state = mt.init_meta_state(model, EncoderConfig(1e-2, 1))
    loss = mt.outer_step(state, coords, values, EncoderConfig(1e-2, 1), 1e-3)
    assert loss == 0.0
    for a, b in zip(state.inr.leaves(), model.leaves()):
        np.testing.assert_array_equal(a, b)


def test_duplicate_samples_same_loss():
    model, coords, values = _fixture_batch()
    one = mt.outer_loss_and_grads(model, coords, values[:1], 0.05, 2)[0]
    two = mt.outer_loss_and_grads(model, coords, np.concatenate([values[:1]] * 2), 0.05, 2)[0]
    assert one == pytest.approx(two, rel=1e-14)


def test_learned_alpha_is_clamped():
    model, coords, values = _fixture_batch()
    state = mt.init_meta_state(model, EncoderConfig(2e-6, 2))
    for _ in range(5):
        mt.outer_step(state, coords, values, EncoderConfig(2e-6, 2), 1e-4, alpha_lr=1.0)
    assert np.all(state.alpha >= mt.ALPHA_FLOOR)


def test_train_inr_zero_epochs_and_determinism():
    g = data.regular_grid(4)
    samples = [data.FieldSample(g, np.full((16, 1), v)) for v in (0.1, -0.2, 0.3)]
    model = inr_mod.inr_init(2, 1, 4, 8, 2, 10.0, 0)
    st, tr = mt.train_inr(samples, model, EncoderConfig(), mt.OuterConfig(lr=1e-3, epochs=0))
    assert tr == [] and st.inr is model
    cfg = mt.OuterConfig(lr=1e-3, epochs=3, batch_size=2, seed=4)
    a, _ = mt.train_inr(samples, model, EncoderConfig(), cfg)
    b, _ = mt.train_inr(samples, model, EncoderConfig(), cfg)
    for x, y in zip(a.inr.leaves(), b.inr.leaves()):
        np.testing.assert_array_equal(x, y)
    with pytest.raises(ValueError):
        mt.train_inr([], model, EncoderConfig(), cfg)


def test_zero_fields_are_fitted():
    g = data.regular_grid(4)
    zeros = [data.FieldSample(g, np.zeros((16, 1))) for _ in range(4)]
    model = inr_mod.inr_init(2, 1, 4, 16, 2, 10.0, 0)
    _, tr = mt.train_inr(zeros, model, EncoderConfig(1e-2, 3), mt.OuterConfig(lr=1e-3, epochs=200, batch_size=4))
    assert tr[-1]["loss"] <= 1e-6


@pytest.fixture(scope="module")
def heat_traces():
    model = inr_mod.inr_init(2, 1, 4, 16, 2, 5.0, 0)
    traj = data.gen_heat2d(4, 6, 4, 0.05, 0.05, 1, 11)
    s = [tj.frame(k) for tj in traj for k in range(4)]
    v = np.stack([x.values for x in s])
    s = [data.FieldSample(x.grid, (x.values - v.mean()) / v.std()) for x in s]
    out = {}
    for fo in (False, True):
        cfg = mt.OuterConfig(lr=3e-3, epochs=250, batch_size=16, first_order=fo)
        _, tr = mt.train_inr(s, model, EncoderConfig(1e-2, 3), cfg)
        out[fo] = np.array([r["loss"] for r in tr])
    return out


def test_second_order_beats_first_order(heat_traces):
    late = slice(150, 250)
    assert heat_traces[False][late].mean() < heat_traces[True][late].mean()


def test_running_mean_non_increasing(heat_traces):
    rm = np.convolve(heat_traces[False], np.ones(50) / 50, "valid")
    assert np.all(np.diff(rm) <= 0)


def test_processor_identity_task():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(64, 4))
    psi = skip_mlp_init(4, 16, 2, seed=0)
    cfg = mt.OuterConfig(lr=1e-2, epochs=1000, batch_size=64, scheduler_decay=0.5, patience=20, min_lr=1e-6)
    psi, tr = mt.train_processor(z, z, psi, cfg)
    assert tr[-1]["loss"] <= 1e-6


def test_processor_linear_map_matches_least_squares():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4)) * 0.5
    z_a = rng.normal(size=(128, 4))
    z_u = z_a @ A.T
    X = np.hstack([z_a, np.ones((128, 1))])
    sol = np.linalg.lstsq(X, z_u, rcond=None)[0]
    psi, tr = mt.train_processor(z_a, z_u, linear_init(4, 0), mt.OuterConfig(lr=1e-2, epochs=1500, batch_size=128))
    assert tr[-1]["loss"] <= 1e-8
    np.testing.assert_allclose(psi.W, sol[:4].T, atol=1e-3)
    np.testing.assert_allclose(psi.b, sol[4], atol=1e-3)


def test_processor_zero_epochs_and_shape_check():
    psi = skip_mlp_init(3, 8, 1, seed=0)
    out, tr = mt.train_processor(np.zeros((4, 3)), np.zeros((4, 3)), psi, mt.OuterConfig(lr=1e-3, epochs=0))
    assert out is psi and tr == []
    with pytest.raises(ValueError):
        mt.train_processor(np.zeros((4, 2)), np.zeros((4, 2)), psi, mt.OuterConfig(lr=1e-3, epochs=1))


def test_trace_csv(tmp_path):
    path = tmp_path / "t.csv"
    mt.write_trace_csv(path, [{"epoch": 1, "loss": 0.5, "lr": 1e-3, "alpha": 0.01}])
    assert path.read_text().splitlines() == ["epoch,loss,lr,alpha", "1,0.5,0.001,0.01"]
