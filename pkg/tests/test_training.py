import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_ce.config import Config, ModelConfig, default_scenarios
from fewshot_ce.dataset import Dataset, dataset_manifest
from fewshot_ce.models import Model, SwitchNet, save_checkpoint, switchnet_forward
from fewshot_ce import training as T


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    dataset_manifest(default_scenarios(), 6, 20, 3, d)
    return Dataset.load(d, heldout_per_scenario=2)


def small_config(seed=0, **train):
    cfg = Config()
    cfg.model = ModelConfig(feature_channels=4, extractor_hidden=3, cin_hidden=2, tam_hidden=2,
                            backbone_hidden_layers=1, backbone_channels=4, backbone_kernel=3)
    cfg.train.seed = seed
    cfg.train.batch_size = 8
    cfg.train.episodes_per_epoch = 16
    cfg.train.epochs = 2
    cfg.train.n_support = 2
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def _adam_reference(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(0)
    gs = rng.normal(size=(100, 3))
    p0 = rng.normal(size=3)
    state = T.OptimizerState()
    params = {"x": p0.copy()}
    for g in gs:
        params = T.adam_step(params, {"x": g}, state, 1e-2)
    ref = [_adam_reference(p0[i], gs[:, i], 1e-2) for i in range(3)]
    np.testing.assert_allclose(params["x"], ref, atol=1e-12)


def test_adam_zero_gradient_keeps_params():
    params = {"x": np.array([1.0, -2.0])}
    out = T.adam_step(params, {"x": np.zeros(2)}, T.OptimizerState(), 0.1)
    np.testing.assert_array_equal(out["x"], params["x"])


def test_adam_first_step_is_sign_step():
    g = np.array([3.0, -0.5, 1e-3])
    out = T.adam_step({"x": np.zeros(3)}, {"x": g}, T.OptimizerState(), 0.01)
    np.testing.assert_allclose(out["x"], -0.01 * np.sign(g), atol=1e-6)


def test_zero_learning_rate_is_bit_exact():
    params = {"x": np.random.default_rng(1).normal(size=(4, 4))}
    state = T.OptimizerState()
    for _ in range(5):
        out = T.adam_step(params, {"x": np.ones((4, 4))}, state, 0.0)
        assert out["x"].tobytes() == params["x"].tobytes()


def test_adam_shape_mismatch():
    from fewshot_ce.autodiff import ShapeError
    with pytest.raises(ShapeError):
        T.adam_step({"x": np.zeros(3)}, {"x": np.zeros(2)}, T.OptimizerState(), 0.1)


def test_singleton_training_decreases_loss(ds):
    cfg = small_config(epochs=1, episodes_per_epoch=8, learning_rate=1e-2)
    model = Model.create("backbone_only", cfg.model, 0)
    batch = T.sample_batch(ds, 8, 0, 20.0, np.random.default_rng(0))
    state = T.OptimizerState()
    losses = []
    for _ in range(20):
        vals, model = T.train_step(model, batch, cfg.train, state)
        losses.append(vals["loss_total"])
    assert losses[-1] < losses[0]


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_gradient_is_additive_over_loss_terms(ds):
    cfg = small_config()
    model = Model.create("fsl_full", cfg.model, 0)
    batch = T.sample_batch(ds, 4, 2, 20.0, np.random.default_rng(1))
    from fewshot_ce.autodiff import GradientTape, add

    def grads_of(which):
        tape = GradientTape()
        P = {k: tape.watch(v) for k, v in model.params.items()}
        _, li, lc = T.compute_losses(model, batch, P)
        loss = {"init": li, "ce": lc, "total": add(li, lc)}[which]
        tape.backward(loss)
        out = {k: tape.grad(t) if t.grad_id in tape.gradients else np.zeros_like(t.data) for k, t in P.items()}
        tape.release()
        return out

    gi, gc, gt = grads_of("init"), grads_of("ce"), grads_of("total")
    for k in gt:
        np.testing.assert_allclose(gt[k], gi[k] + gc[k], atol=1e-12)


@pytest.mark.parametrize("kind", ["fsl_full", "fsl_no_cam", "backbone_only", "backbone_with_self_attention"])
def test_every_parameter_receives_gradient(ds, kind):
    cfg = small_config()
    model = Model.create(kind, cfg.model, 0)
    n = 2 if model.needs_support else 0
    _, vals, untouched = T.gradients(model, T.sample_batch(ds, 4, n, 20.0, np.random.default_rng(2)))
    assert untouched == []
    assert math.isfinite(vals["loss_total"])


def test_non_finite_loss_is_rejected(ds):
    cfg = small_config()
    model = Model.create("backbone_only", cfg.model, 0)
    last = max(k for k in model.params if k.endswith(".b"))
    model.params[last] = np.full_like(model.params[last], np.nan)
    batch = T.sample_batch(ds, 4, 0, 20.0, np.random.default_rng(3))
    with pytest.raises(T.NonFiniteLossError):
        T.train_step(model, batch, cfg.train, T.OptimizerState())


def test_bce_scaled_loss_trains(ds):
    cfg = small_config(loss_kind="bce_scaled", epochs=1)
    model, rows = T.train("backbone_only", ds, cfg, record_wall_time=False)
    lo, hi = model.output_bounds()
    assert lo < 0 < hi
    est = model.predict(np.zeros((2, 0, 72, 2)), np.zeros((2, 72, 2)))
    assert np.all((est >= lo) & (est <= hi))
    assert all(math.isfinite(r["loss_total"]) for r in rows)


# ---------------------------------------------------------------------------
# episode sampling
# ---------------------------------------------------------------------------

def test_sample_batch_shapes_and_pool(ds):
    b = T.sample_batch(ds, 128, 16, 20.0, np.random.default_rng(0))
    assert b.support.shape == (128, 16, 72, 2) and b.query.shape == (128, 72, 2)
    train_ids = {ds.scenarios[s].pdps[p].pdp_id for s in range(3) for p in ds.train_pdp_indices(s)}
    assert set(b.pdp_ids.tolist()) <= train_ids
    np.testing.assert_array_equal(b.pdp_ids, b.support_pdp_ids)


def test_single_pdp_pool(ds):
    pool = {0: np.array([1]), 1: np.array([], dtype=int), 2: np.array([], dtype=int)}
    b = T.sample_batch(ds, 16, 3, 20.0, np.random.default_rng(0), pdp_pool=pool)
    assert set(b.pdp_ids.tolist()) == {ds.scenarios[0].pdps[1].pdp_id}


def test_pdp_draws_are_uniform(ds):
    pool = {0: ds.train_pdp_indices(0), 1: np.array([], dtype=int), 2: np.array([], dtype=int)}
    rng = np.random.default_rng(5)
    counts = {}
    for _ in range(100):
        b = T.sample_batch(ds, 100, 0, 20.0, rng, pdp_pool=pool)
        for i in b.pdp_ids:
            counts[int(i)] = counts.get(int(i), 0) + 1
    obs = np.array(list(counts.values()), dtype=float)
    assert len(obs) == 4 and obs.sum() == 10_000
    chi2 = np.sum((obs - 2500) ** 2 / 2500)
    assert chi2 < 16.27  # 0.999 quantile, 3 dof


def test_support_needs_enough_realizations(ds):
    with pytest.raises(ValueError):
        T.sample_batch(ds, 2, 20, 20.0, np.random.default_rng(0))


def test_support_blocks_are_distinct_realizations(ds):
    b = T.sample_batch(ds, 8, 5, float("inf"), np.random.default_rng(0))
    for e in range(8):
        blocks = np.concatenate([b.support[e], b.truth[e][None]]).reshape(6, -1)
        assert len({blk.tobytes() for blk in blocks}) == 6


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_training_is_deterministic(ds, tmp_path):
    cfg = small_config(n_support_train_grid=[1, 2])
    m1, r1 = T.train("fsl_full", ds, cfg, curve_path=tmp_path / "a.csv", record_wall_time=False)
    m2, r2 = T.train("fsl_full", ds, cfg, curve_path=tmp_path / "b.csv", record_wall_time=False)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    save_checkpoint(tmp_path / "m1", m1)
    save_checkpoint(tmp_path / "m2", m2)
    assert (tmp_path / "m1.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()
    m3, _ = T.train("fsl_full", ds, small_config(seed=1, n_support_train_grid=[1, 2]), record_wall_time=False)
    assert any(not np.array_equal(m1.params[k], m3.params[k]) for k in m1.params)


def test_curve_layout(ds, tmp_path):
    cfg = small_config()
    _, rows = T.train("backbone_only", ds, cfg, curve_path=tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_bytes().split(b"\n")
    assert lines[0].decode() == ",".join(T.CURVE_COLUMNS)
    assert len(rows) == cfg.train.epochs * (cfg.train.episodes_per_epoch // cfg.train.batch_size)
    assert [r["step"] for r in rows] == list(range(1, len(rows) + 1))
    assert all(r["loss_init"] == 0.0 for r in rows)


# ---------------------------------------------------------------------------
# SwitchNet
# ---------------------------------------------------------------------------

def test_offline_switchnet_layout_and_errors(ds):
    cfg = small_config(switchnet_samples_per_scenario=400)
    net = T.switchnet_offline_train(ds, 5, cfg)
    assert net.M == 5
    np.testing.assert_array_equal(net.params["sw.alpha"], [1, 0, 0, 0, 0, 0])
    assert net.meta["compensator_scenarios"] == [1, 2, 0, 1, 2]
    with pytest.raises(ValueError):
        T.switchnet_offline_train(ds, 0, cfg)
    with pytest.raises(ValueError):
        T.switchnet_offline_train(ds, 13, cfg)  # five compensators per scenario, four training PDPs


def test_shared_scenario_compensators_use_disjoint_pdps(ds):
    assign = T.compensator_assignment(ds, 5)
    a, b = assign[0][1], assign[3][1]
    assert assign[0][0] == assign[3][0] == 1
    assert set(a).isdisjoint(b) and sorted(np.concatenate([a, b])) == list(ds.train_pdp_indices(1))


def test_compensator_improves_its_scenario(ds):
    cfg = small_config(switchnet_samples_per_scenario=600)
    net = T.switchnet_offline_train(ds, 2, cfg)
    X, Y = T.switchnet_samples(ds, 1, 400, 20.0, np.random.default_rng(11))
    base = np.mean((switchnet_forward(net.params, X, np.array([1.0, 0, 0])).data - Y) ** 2)
    comp = np.mean((switchnet_forward(net.params, X, np.array([1.0, 1.0, 0])).data - Y) ** 2)
    assert comp < base


def _planted(seed, M=2, w=4):
    rng = np.random.default_rng(seed)
    d = 2 * w
    p = {"sw.W0": np.eye(d) + 0.1 * rng.normal(size=(d, d)), "sw.theta0": 0.1 * rng.normal(size=d)}
    for i in range(1, M + 1):
        p[f"sw.W{i}"] = 0.3 * rng.normal(size=(d, d))
        p[f"sw.theta{i}"] = 0.3 * rng.normal(size=d)
    p["sw.alpha"] = np.array([0.0, 0.5, -0.5])
    return SwitchNet(p, w), rng.normal(size=(32, d))


def test_online_adaptation_recovers_planted_alpha():
    net, X = _planted(0)
    Y = switchnet_forward({**net.params, "sw.alpha": np.eye(3)[0]}, X).data
    res = T.switchnet_online_adapt(net, X, Y, steps=3000, lr=0.2)
    np.testing.assert_allclose(res.alpha, [1, 0, 0], atol=1e-2)
    assert res.trainable == net.M + 1


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_online_adaptation_is_monotone_at_small_lr(seed):
    net, X = _planted(seed)
    Y = X + 0.05 * np.random.default_rng(seed + 1).normal(size=X.shape)
    res = T.switchnet_online_adapt(net, X, Y, steps=20, lr=1e-3)
    assert len(res.mse_history) == 21
    assert all(b <= a + 1e-15 for a, b in zip(res.mse_history, res.mse_history[1:]))


def test_online_adaptation_leaves_subnets_frozen():
    net, X = _planted(1)
    before = {k: v.copy() for k, v in net.params.items()}
    T.switchnet_online_adapt(net, X, X, steps=5, lr=0.1)
    for k in before:
        np.testing.assert_array_equal(net.params[k], before[k])


def test_online_adaptation_needs_support():
    net, _ = _planted(2)
    with pytest.raises(ValueError):
        T.switchnet_online_adapt(net, np.zeros((0, 8)), np.zeros((0, 8)), 5, 0.1)
