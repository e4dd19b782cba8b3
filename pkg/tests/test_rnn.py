"""GRU network: cell, forward pass, BPTT gradients, Adam, training loop."""
import numpy as np
import pytest

import oracles
from rvemor import rnn
from rvemor.errors import ConfigError, TrainingDivergedError


@pytest.fixture
def tiny_model():
    return rnn.init_model(4, 3, 4, 2, rnn.NormStats.identity(2), seed=7)


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------

def test_cell_all_zero_weights():
    m = rnn.init_model(4, 3, 4, 2, rnn.NormStats.identity(2), seed=0)
    for k in m.params:
        m.params[k][:] = 0.0
    h = rnn.gru_cell(np.zeros(4), np.full(3, -1.0), m)
    # z = r = 0.5, candidate = 0, h_new = 0.5 * h_prev
    assert np.allclose(h, -0.5, atol=1e-15)


def test_cell_closed_update_gate(rng):
    m = rnn.init_model(4, 3, 4, 2, rnn.NormStats.identity(2), seed=0)
    m.params["bz"][:] = -50.0  # z ~ 0: hidden state frozen
    h_prev = np.full(3, -1.0)
    h = rnn.gru_cell(rng.standard_normal(4), h_prev, m)
    assert np.max(np.abs(h - h_prev)) < 1e-6


def test_cell_matches_scalar_oracle(rng):
    m = rnn.init_model(4, 3, 4, 2, rnn.NormStats.identity(2), seed=1)
    x = rng.standard_normal(4)
    h_prev = rng.uniform(-1, 1, 3)
    ref = oracles.gru_cell_scalar(x, h_prev, m.params)
    assert np.max(np.abs(rnn.gru_cell(x, h_prev, m) - ref)) < 1e-12


def test_cell_output_between_prev_and_candidate(rng, tiny_model):
    # each component is a convex combination of h_prev and the candidate
    for _ in range(20):
        x = rng.standard_normal(4)
        h_prev = rng.uniform(-1, 1, 3)
        h = rnn.gru_cell(x, h_prev, tiny_model)
        assert np.all(h >= -1.0 - 1e-12) and np.all(h <= 1.0 + 1e-12)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def test_forward_empty_sequence(tiny_model):
    pred, hidden = rnn.forward_sequence(np.zeros((0, 2)), tiny_model)
    assert pred.shape == (0, 2)
    assert hidden.shape == (0, 3)


def test_forward_constant_input_settles(tiny_model):
    x = np.tile([1.02, 0.01], (400, 1))
    pred, hidden = rnn.forward_sequence(x, tiny_model)
    # the recurrence contracts to a fixed point for constant input
    assert np.max(np.abs(hidden[-1] - hidden[-2])) < 1e-8
    assert np.max(np.abs(pred[-1] - pred[-2])) < 1e-8


def test_hidden_state_bounded(rng, tiny_model):
    _, hidden = rnn.forward_sequence(rng.standard_normal((200, 2)),
                                     tiny_model)
    assert hidden.min() >= -1.0 - 1e-12
    assert hidden.max() <= 1.0 + 1e-12


def test_stepper_matches_forward(rng):
    nm = rnn.NormStats(np.array([0.1, -0.2]), np.array([0.5, 2.0]),
                       np.array([0.3, 4.0]))
    m = rnn.init_model(4, 3, 4, 2, nm, seed=8)
    seq = rng.standard_normal((7, 2))
    stepper = rnn.RnnStepper(m)
    step_out = np.array([stepper.step(seq[t]) for t in range(7)])
    full_out, _ = rnn.forward_sequence(seq, m)
    assert np.max(np.abs(step_out - full_out)) < 1e-12


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def test_norm_stats_round_trip(rng):
    samples = [rnn.SequenceSample(rng.standard_normal((30, 2)) * [3.0, 0.2],
                                  rng.standard_normal((30, 4)) * 7.0)
               for _ in range(3)]
    nm = rnn.compute_norm_stats(samples, 4)
    x = rng.standard_normal((10, 2))
    back = nm.normalize_in(x) * nm.in_scale + nm.in_mean
    assert np.max(np.abs(back - x)) < 1e-12
    y = rng.standard_normal((10, 4))
    assert np.max(np.abs(nm.denormalize_out(nm.normalize_out(y)) - y)) < 1e-12
    assert np.all(nm.in_scale > 0) and np.all(nm.out_scale > 0)


def test_norm_stats_standardize_training_inputs(rng):
    samples = [rnn.SequenceSample(rng.standard_normal((50, 2)) + [5.0, -2.0],
                                  rng.standard_normal((50, 3)))]
    nm = rnn.compute_norm_stats(samples, 3)
    z = nm.normalize_in(samples[0].inputs)
    assert np.max(np.abs(z.mean(axis=0))) < 1e-12
    assert np.max(np.abs(z.std(axis=0) - 1.0)) < 1e-12


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_mse_loss_examples(rng):
    a = rng.standard_normal((6, 3))
    assert rnn.mse_loss(a, a) == 0.0
    b = a.copy()
    b[2] += np.array([1.0, 0.0, 0.0]) * np.sqrt(1.0)
    # one sample off by a unit vector: mean of squared norms = 1/T
    assert abs(rnn.mse_loss(b, a) - 1.0 / 6.0) < 1e-15
    single = rng.standard_normal((1, 5))
    target = single + np.array([0.0, 1.0, 0.0, 0.0, 0.0])
    assert abs(rnn.mse_loss(single, target) - 1.0) < 1e-15


def test_mse_loss_matches_scalar_oracle(rng):
    pred = rng.standard_normal((9, 4))
    target = rng.standard_normal((9, 4))
    assert abs(rnn.mse_loss(pred, target)
               - oracles.mse_scalar(pred, target)) < 1e-12


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_bptt_matches_fd_unit_scales(rng, tiny_model):
    samp = rnn.SequenceSample(inputs=rng.standard_normal((5, 2)),
                              targets=0.3 * rng.standard_normal((5, 2)))
    assert oracles.model_fd_worst_rel(tiny_model, samp) < 1e-5


def test_bptt_matches_fd_scaled_stats(rng):
    nm = rnn.NormStats(np.array([0.1, -0.2]), np.array([0.5, 2.0]),
                       np.array([0.3, 4.0]))
    m = rnn.init_model(4, 3, 4, 2, nm, seed=8)
    samp = rnn.SequenceSample(inputs=rng.standard_normal((5, 2)),
                              targets=0.3 * rng.standard_normal((5, 2)))
    assert oracles.model_fd_worst_rel(m, samp) < 1e-5


def test_gradients_vanish_at_data(rng, tiny_model):
    samp_in = rng.standard_normal((5, 2))
    pred, _ = rnn.forward_sequence(samp_in, tiny_model)
    g = rnn.backward_sequence(rnn.SequenceSample(samp_in, pred), tiny_model)
    assert max(np.max(np.abs(v)) for v in g.values()) < 1e-12


def test_gradients_empty_sequence(tiny_model):
    g = rnn.backward_sequence(
        rnn.SequenceSample(np.zeros((0, 2)), np.zeros((0, 2))), tiny_model)
    assert all(np.all(v == 0) for v in g.values())
    assert set(g) == set(rnn.PARAM_ORDER)


# ---------------------------------------------------------------------------
# Adam and clipping
# ---------------------------------------------------------------------------

def test_adam_first_step(rng):
    cfg = rnn.TrainConfig(learning_rate=0.01, epochs=1)
    m = rnn.init_model(4, 3, 4, 2, rnn.NormStats.identity(2), seed=9)
    st = rnn.AdamState.for_model(m)
    before = {k: v.copy() for k, v in m.params.items()}
    grads = {k: rng.standard_normal(v.shape) for k, v in m.params.items()}
    rnn.adam_step(m, grads, st, cfg)
    for k in grads:
        expect = -cfg.learning_rate * grads[k] / (np.abs(grads[k])
                                                  + cfg.adam_eps)
        assert np.max(np.abs((m.params[k] - before[k]) - expect)) < 1e-10


def test_adam_zero_gradient_fresh_state():
    cfg = rnn.TrainConfig(epochs=1)
    m = rnn.init_model(4, 3, 4, 2, rnn.NormStats.identity(2), seed=9)
    st = rnn.AdamState.for_model(m)
    before = {k: v.copy() for k, v in m.params.items()}
    rnn.adam_step(m, {k: np.zeros_like(v) for k, v in m.params.items()},
                  st, cfg)
    assert all(np.array_equal(m.params[k], before[k]) for k in before)


def test_adam_constant_gradient_magnitude():
    # with a constant gradient the bias-corrected step approaches lr * sign
    cfg = rnn.TrainConfig(learning_rate=1e-3, epochs=1)
    m = rnn.init_model(4, 3, 4, 2, rnn.NormStats.identity(2), seed=9)
    st = rnn.AdamState.for_model(m)
    g = {k: np.full(v.shape, 0.37) for k, v in m.params.items()}
    prev = {k: v.copy() for k, v in m.params.items()}
    for _ in range(300):
        prev = {k: v.copy() for k, v in m.params.items()}
        rnn.adam_step(m, g, st, cfg)
    step = m.params["Wz"] - prev["Wz"]
    assert np.max(np.abs(np.abs(step) - cfg.learning_rate)) < 1e-5


def test_lr_step_decay_schedule():
    cfg = rnn.TrainConfig(learning_rate=1e-3, lr_decay_every=100,
                          lr_decay_factor=0.5)
    assert cfg.lr_at(1) == 1e-3
    assert cfg.lr_at(100) == 1e-3
    assert cfg.lr_at(101) == 5e-4
    assert cfg.lr_at(201) == 2.5e-4
    # disabled schedule: constant
    flat = rnn.TrainConfig(learning_rate=1e-3)
    assert flat.lr_at(10_000) == 1e-3
    with pytest.raises(ConfigError):
        rnn.TrainConfig(lr_decay_every=-1)
    with pytest.raises(ConfigError):
        rnn.TrainConfig(lr_decay_factor=0.0)
    with pytest.raises(ConfigError):
        rnn.TrainConfig(lr_decay_factor=1.5)


def test_lr_decay_shrinks_adam_steps():
    # constant gradient: steady-state |step| tracks the decayed rate
    cfg = rnn.TrainConfig(learning_rate=1e-3, lr_decay_every=300,
                          lr_decay_factor=0.1, epochs=1)
    m = rnn.init_model(4, 3, 4, 2, rnn.NormStats.identity(2), seed=9)
    st = rnn.AdamState.for_model(m)
    g = {k: np.full(v.shape, 0.37) for k, v in m.params.items()}
    for epoch in range(1, 601):
        prev = m.params["Wz"].copy()
        rnn.adam_step(m, g, st, cfg, lr=cfg.lr_at(epoch))
        step = np.max(np.abs(m.params["Wz"] - prev))
    assert abs(step - 1e-4) < 1e-6    # second plateau: lr * 0.1


def test_clip_gradients():
    g = {"a": np.full(4, 10.0)}
    norm = rnn.clip_gradients(g, 10.0)
    assert abs(norm - 20.0) < 1e-12
    assert abs(np.linalg.norm(g["a"]) - 10.0) < 1e-12
    # below the threshold nothing changes
    g2 = {"a": np.full(4, 1.0)}
    rnn.clip_gradients(g2, 10.0)
    assert np.array_equal(g2["a"], np.full(4, 1.0))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_learns_zero_map():
    zs = rnn.SequenceSample(inputs=np.tile([1.0, 0.0], (20, 1)),
                            targets=np.zeros((20, 2)))
    nm = rnn.compute_norm_stats([zs], 2)
    m = rnn.init_model(8, 8, 8, 2, nm, seed=4)
    res = rnn.train([zs], rnn.TrainConfig(learning_rate=1e-2,
                                          adam_beta2=0.99, epochs=2000,
                                          stop_loss=9e-9), m)
    assert res.history[-1].train_loss < 1e-8
    assert res.epochs_run <= 2000


def test_train_deterministic_and_batch_invariant(rng):
    s1 = rnn.SequenceSample(rng.standard_normal((15, 2)),
                            rng.standard_normal((15, 3)))
    nm = rnn.compute_norm_stats([s1], 3)
    cfg = rnn.TrainConfig(epochs=50)
    r1 = rnn.train([s1], cfg, rnn.init_model(6, 5, 6, 3, nm, seed=5))
    r2 = rnn.train([s1], cfg, rnn.init_model(6, 5, 6, 3, nm, seed=5))
    assert [h.train_loss for h in r1.history] \
        == [h.train_loss for h in r2.history]
    # a duplicated sample with per-epoch batch switching changes nothing
    r3 = rnn.train([s1, rnn.SequenceSample(s1.inputs.copy(),
                                           s1.targets.copy())],
                   cfg, rnn.init_model(6, 5, 6, 3, nm, seed=5))
    assert [h.train_loss for h in r1.history] \
        == [h.train_loss for h in r3.history]


def test_train_round_robin_covers_batches(rng):
    # two batches with wildly different loss scales: the recorded per-epoch
    # loss must alternate between them under per-epoch switching
    big = rnn.SequenceSample(rng.standard_normal((8, 2)),
                             rng.standard_normal((8, 2)) + 100.0)
    small = rnn.SequenceSample(rng.standard_normal((8, 2)),
                               0.01 * rng.standard_normal((8, 2)))
    nm = rnn.NormStats.identity(2)
    res = rnn.train([big, small], rnn.TrainConfig(epochs=4),
                    rnn.init_model(4, 3, 4, 2, nm, seed=1))
    losses = [h.train_loss for h in res.history]
    assert losses[0] > 100.0 * losses[1]
    assert losses[2] > 100.0 * losses[3]


def test_train_empty_dataset_rejected():
    m = rnn.init_model(4, 3, 4, 2, rnn.NormStats.identity(2), seed=1)
    with pytest.raises(ConfigError):
        rnn.train([], rnn.TrainConfig(epochs=5), m)


def test_train_unequal_lengths_rejected(rng):
    a = rnn.SequenceSample(rng.standard_normal((5, 2)),
                           rng.standard_normal((5, 2)))
    b = rnn.SequenceSample(rng.standard_normal((6, 2)),
                           rng.standard_normal((6, 2)))
    m = rnn.init_model(4, 3, 4, 2, rnn.NormStats.identity(2), seed=1)
    with pytest.raises(ConfigError):
        rnn.train([a, b], rnn.TrainConfig(epochs=5), m)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_train_aborts_on_nonfinite_loss(rng):
    a = rnn.SequenceSample(rng.standard_normal((5, 2)),
                           np.full((5, 2), 1e300))
    nm = rnn.NormStats.identity(2)
    m = rnn.init_model(4, 3, 4, 2, nm, seed=1)
    with pytest.raises(TrainingDivergedError):
        rnn.train([a], rnn.TrainConfig(epochs=50), m)


def test_validation_loss_recorded(rng):
    tr = rnn.SequenceSample(rng.standard_normal((10, 2)),
                            rng.standard_normal((10, 2)))
    vl = rnn.SequenceSample(rng.standard_normal((10, 2)),
                            rng.standard_normal((10, 2)))
    nm = rnn.compute_norm_stats([tr], 2)
    res = rnn.train([tr], rnn.TrainConfig(epochs=10, val_every=5),
                    rnn.init_model(4, 3, 4, 2, nm, seed=2), val_set=[vl])
    vals = [h.val_loss for h in res.history if h.val_loss is not None]
    assert len(vals) == 2
    assert all(v > 0 for v in vals)


# ---------------------------------------------------------------------------
# hyperparameter sweep
# ---------------------------------------------------------------------------

def test_sweep_single_cell_equals_direct_train(rng):
    s = rnn.SequenceSample(rng.standard_normal((10, 2)),
                           rng.standard_normal((10, 2)))
    nm = rnn.compute_norm_stats([s], 2)
    cfg = rnn.TrainConfig(epochs=30, seed=3)
    table = rnn.hyper_sweep([6], [5], [6], [s], cfg, n_b=2, norm=nm)
    assert len(table) == 1
    direct = rnn.train([s], cfg, rnn.init_model(6, 5, 6, 2, nm, seed=3))
    pred, _ = rnn.forward_sequence(s.inputs, direct.model)
    assert table[0].train_loss == rnn.mse_loss(pred, s.targets)
    assert table[0].n_params == direct.model.n_params


def test_sweep_row_count(rng):
    s = rnn.SequenceSample(rng.standard_normal((8, 2)),
                           rng.standard_normal((8, 2)))
    nm = rnn.compute_norm_stats([s], 2)
    cfg = rnn.TrainConfig(epochs=5, seed=3)
    table = rnn.hyper_sweep([4, 6], [3, 5, 7], [4], [s], cfg, n_b=2,
                            norm=nm)
    assert len(table) == 6
    dims = {(r.d_in, r.d_h, r.d_out) for r in table}
    assert len(dims) == 6


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

def test_model_file_round_trip(tmp_path, rng):
    nm = rnn.NormStats(np.array([0.1, -0.2]), np.array([0.5, 2.0]),
                       np.array([0.3, 4.0]))
    m = rnn.init_model(4, 3, 4, 2, nm, seed=8,
                       basis_fingerprint="abc123")
    f = tmp_path / "m.bin"
    rnn.save_model(f, m)
    back = rnn.load_model(f)
    assert back.basis_fingerprint == "abc123"
    assert (back.d_in, back.d_h, back.d_out, back.n_b) == (4, 3, 4, 2)
    for k in rnn.PARAM_ORDER:
        assert np.array_equal(back.params[k], m.params[k]), k
    assert np.array_equal(back.norm.out_scale, m.norm.out_scale)
    assert np.array_equal(back.norm.in_mean, m.norm.in_mean)
    # behaviour identical
    x = rng.standard_normal((6, 2))
    a, _ = rnn.forward_sequence(x, m)
    b, _ = rnn.forward_sequence(x, back)
    assert np.array_equal(a, b)


def test_init_model_deterministic():
    nm = rnn.NormStats.identity(3)
    a = rnn.init_model(6, 5, 6, 3, nm, seed=12)
    b = rnn.init_model(6, 5, 6, 3, nm, seed=12)
    c = rnn.init_model(6, 5, 6, 3, nm, seed=13)
    for k in rnn.PARAM_ORDER:
        assert np.array_equal(a.params[k], b.params[k])
    assert any(not np.array_equal(a.params[k], c.params[k])
               for k in rnn.PARAM_ORDER)
