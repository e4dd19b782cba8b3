"""Recurrent surrogate for the reduced coefficients.

Architecture: a dense input layer lifts the two macro inputs (U11, U12) to
d_in features (leaky ReLU), a single GRU layer with d_h hidden variables
carries the loading history, and a dense hidden layer (d_out, leaky ReLU)
plus a linear output layer map to the n_b basis coefficients.  The GRU
update is

    z = sigmoid(Wz x + Rz h + bz)
    r = sigmoid(Wr x + Rr h + br)
    c = tanh(Wc x + Rc (r * h) + bc)
    h_new = (1 - z) * h + z * c,

with every hidden component initialised to -1, so h stays in [-1, 1].

Everything is hand-rolled numpy: forward pass, full (untruncated)
backpropagation through time, Adam with bias correction, and gradient
clipping at a global norm of 10.  Inputs are standardised and outputs
scaled per-coefficient by their max magnitude over the training set; the
training objective is the mean squared error of the *normalized* outputs
(so low-energy modes are not drowned out), while reported losses are the
plain MSE of the de-normalized coefficients: mean over time steps of the
squared L2 norm of the coefficient error.

One batch is one simulation's full sequence; batches rotate round-robin
every `batch_switch_every` epochs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import binio
from .errors import ConfigError, DataMismatchError, TrainingDivergedError

__all__ = [
    "NormStats",
    "RnnModel",
    "TrainConfig",
    "SequenceSample",
    "TrainResult",
    "SweepRow",
    "PARAM_ORDER",
    "compute_norm_stats",
    "init_model",
    "gru_cell",
    "forward_sequence",
    "mse_loss",
    "training_objective",
    "backward_sequence",
    "AdamState",
    "adam_step",
    "clip_gradients",
    "train",
    "hyper_sweep",
    "RnnStepper",
    "save_model",
    "load_model",
]

_MODEL_MAGIC = b"RVERNN01"

#: fixed parameter order used for flattening, Adam state and the model file
PARAM_ORDER = ("Wi", "bi", "Wz", "Rz", "bz", "Wr", "Rr", "br",
               "Wc", "Rc", "bc", "Wo1", "bo1", "Wo2", "bo2")


@dataclass(frozen=True)
class NormStats:
    """Input standardisation and per-coefficient output scaling."""

    in_mean: np.ndarray    # (2,)
    in_scale: np.ndarray   # (2,), strictly positive
    out_scale: np.ndarray  # (n_b,), strictly positive

    def __post_init__(self):
        if np.any(np.asarray(self.in_scale) <= 0.0) or \
                np.any(np.asarray(self.out_scale) <= 0.0):
            raise ConfigError("normalization scales must be positive")

    def normalize_in(self, x: np.ndarray) -> np.ndarray:
        return (x - self.in_mean) / self.in_scale

    def denormalize_out(self, y: np.ndarray) -> np.ndarray:
        return y * self.out_scale

    def normalize_out(self, a: np.ndarray) -> np.ndarray:
        return a / self.out_scale

    @staticmethod
    def identity(n_b: int) -> "NormStats":
        return NormStats(np.zeros(2), np.ones(2), np.ones(n_b))


@dataclass(frozen=True)
class SequenceSample:
    """One simulation: macro inputs (T, 2) and coefficient targets (T, n_b)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ConfigError(
                f"sample length mismatch: {self.inputs.shape[0]} inputs, "
                f"{self.targets.shape[0]} targets")

    @property
    def length(self) -> int:
        return self.inputs.shape[0]


def compute_norm_stats(samples, n_b: int) -> NormStats:
    """Statistics over a training set: input mean/std (degenerate features
    fall back to unit scale) and per-coefficient max-abs output scale with a
    relative floor so that dead coefficients cannot produce zero scales."""
    if not samples:
        raise ConfigError("cannot compute normalization from an empty set")
    allx = np.concatenate([s.inputs for s in samples], axis=0)
    ally = np.concatenate([s.targets for s in samples], axis=0)
    if ally.shape[1] != n_b:
        raise DataMismatchError(
            f"targets have {ally.shape[1]} coefficients, expected {n_b}")
    mean = allx.mean(axis=0)
    scale = allx.std(axis=0)
    scale[scale <= 1e-12 * np.maximum(1.0, np.abs(mean))] = 1.0
    out = np.abs(ally).max(axis=0) if ally.size else np.zeros(n_b)
    top = out.max() if out.size else 0.0
    if top == 0.0:
        out = np.ones(n_b)
    else:
        out = np.maximum(out, 1e-8 * top)
    return NormStats(mean, scale, out)


@dataclass
class RnnModel:
    d_in: int
    d_h: int
    d_out: int
    n_b: int
    slope: float               # leaky-ReLU negative slope
    hidden_init: float
    norm: NormStats
    params: dict               # name -> ndarray, keys = PARAM_ORDER
    basis_fingerprint: str = ""

    def __post_init__(self):
        shapes = _param_shapes(self.d_in, self.d_h, self.d_out, self.n_b)
        for name in PARAM_ORDER:
            if name not in self.params:
                raise ConfigError(f"missing parameter block {name}")
            if self.params[name].shape != shapes[name]:
                raise ConfigError(
                    f"parameter {name} has shape {self.params[name].shape}, "
                    f"expected {shapes[name]}")
        if self.norm.out_scale.shape != (self.n_b,):
            raise ConfigError("output scale length must equal n_b")

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "RnnModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


def _param_shapes(d_in, d_h, d_out, n_b):
    return {
        "Wi": (d_in, 2), "bi": (d_in,),
        "Wz": (d_h, d_in), "Rz": (d_h, d_h), "bz": (d_h,),
        "Wr": (d_h, d_in), "Rr": (d_h, d_h), "br": (d_h,),
        "Wc": (d_h, d_in), "Rc": (d_h, d_h), "bc": (d_h,),
        "Wo1": (d_out, d_h), "bo1": (d_out,),
        "Wo2": (n_b, d_out), "bo2": (n_b,),
    }


def init_model(d_in: int, d_h: int, d_out: int, n_b: int, norm: NormStats,
               seed: int, slope: float = 0.01,
               hidden_init: float = -1.0,
               basis_fingerprint: str = "") -> RnnModel:
    """Uniform initialisation in +-sqrt(6 / (fan_in + fan_out)) per matrix,
    zero biases; the draw order of the matrices is fixed so a seed pins the
    model bit-for-bit."""
    for name, v in (("d_in", d_in), ("d_h", d_h), ("d_out", d_out),
                    ("n_b", n_b)):
        if v < 1:
            raise ConfigError(f"{name} must be >= 1, got {v}")
    rng = np.random.default_rng(seed)

    def glorot(n_out, n_in):
        lim = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=(n_out, n_in))

    shapes = _param_shapes(d_in, d_h, d_out, n_b)
    params = {name: np.zeros(shape) for name, shape in shapes.items()}
    params["Wi"] = glorot(d_in, 2)
    params["Wz"] = glorot(d_h, d_in)
    params["Rz"] = glorot(d_h, d_h)
    params["Wr"] = glorot(d_h, d_in)
    params["Rr"] = glorot(d_h, d_h)
    params["Wc"] = glorot(d_h, d_in)
    params["Rc"] = glorot(d_h, d_h)
    params["Wo1"] = glorot(d_out, d_h)
    params["Wo2"] = glorot(n_b, d_out)
    return RnnModel(d_in=d_in, d_h=d_h, d_out=d_out, n_b=n_b, slope=slope,
                    hidden_init=hidden_init, norm=norm, params=params,
                    basis_fingerprint=basis_fingerprint)


def _sigmoid(x):
    # split positive/negative branches to avoid overflow warnings
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _lrelu(a, slope):
    return np.where(a > 0.0, a, slope * a)


def _lrelu_grad(a, slope):
    return np.where(a > 0.0, 1.0, slope)


def gru_cell(x: np.ndarray, h_prev: np.ndarray, model: RnnModel) -> np.ndarray:
    """One GRU step on a d_in feature column."""
    p = model.params
    z = _sigmoid(p["Wz"] @ x + p["Rz"] @ h_prev + p["bz"])
    r = _sigmoid(p["Wr"] @ x + p["Rr"] @ h_prev + p["br"])
    c = np.tanh(p["Wc"] @ x + p["Rc"] @ (r * h_prev) + p["bc"])
    return (1.0 - z) * h_prev + z * c


class _ForwardCache:
    """All intermediates of one sequence forward pass, laid out (T, dim)."""

    __slots__ = ("Xn", "A1", "X1", "Z", "R", "C", "RH", "Hprev", "H",
                 "AO1", "X2", "Y")


def _forward(model: RnnModel, inputs: np.ndarray) -> _ForwardCache:
    p = model.params
    T = inputs.shape[0]
    cache = _ForwardCache()
    cache.Xn = model.norm.normalize_in(np.asarray(inputs, float))
    cache.A1 = cache.Xn @ p["Wi"].T + p["bi"]
    cache.X1 = _lrelu(cache.A1, model.slope)
    azi = cache.X1 @ p["Wz"].T + p["bz"]
    ari = cache.X1 @ p["Wr"].T + p["br"]
    aci = cache.X1 @ p["Wc"].T + p["bc"]
    d_h = model.d_h
    Z = np.empty((T, d_h))
    R = np.empty((T, d_h))
    C = np.empty((T, d_h))
    RH = np.empty((T, d_h))
    Hprev = np.empty((T, d_h))
    H = np.empty((T, d_h))
    h = np.full(d_h, model.hidden_init)
    Rz, Rr, Rc = p["Rz"], p["Rr"], p["Rc"]
    for t in range(T):
        Hprev[t] = h
        z = _sigmoid(azi[t] + Rz @ h)
        r = _sigmoid(ari[t] + Rr @ h)
        rh = r * h
        c = np.tanh(aci[t] + Rc @ rh)
        h = (1.0 - z) * h + z * c
        Z[t], R[t], C[t], RH[t], H[t] = z, r, c, rh, h
    cache.Z, cache.R, cache.C, cache.RH, cache.Hprev, cache.H = \
        Z, R, C, RH, Hprev, H
    cache.AO1 = H @ p["Wo1"].T + p["bo1"]
    cache.X2 = _lrelu(cache.AO1, model.slope)
    cache.Y = cache.X2 @ p["Wo2"].T + p["bo2"]
    return cache


def forward_sequence(inputs: np.ndarray, model: RnnModel):
    """Predicted coefficients (T, n_b) and the hidden trace (T, d_h) for a
    raw macro-input sequence (T, 2); h starts at hidden_init everywhere."""
    inputs = np.asarray(inputs, float).reshape(-1, 2)
    if inputs.shape[0] == 0:
        return np.zeros((0, model.n_b)), np.zeros((0, model.d_h))
    cache = _forward(model, inputs)
    return model.norm.denormalize_out(cache.Y), cache.H


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over sequence steps of the squared L2 coefficient error."""
    pred = np.asarray(pred, float)
    target = np.asarray(target, float)
    if pred.shape != target.shape:
        raise DataMismatchError(
            f"loss shapes differ: {pred.shape} vs {target.shape}")
    if pred.shape[0] == 0:
        return 0.0
    return float(np.mean(np.sum((pred - target) ** 2, axis=-1)))


def training_objective(model: RnnModel, sample: SequenceSample) -> float:
    """The scalar the optimizer actually minimises: MSE of the normalized
    outputs.  With unit output scales this equals mse_loss on predictions."""
    if sample.length == 0:
        return 0.0
    cache = _forward(model, sample.inputs)
    return mse_loss(cache.Y, model.norm.normalize_out(sample.targets))


def _zero_grads(model: RnnModel) -> dict:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def backward_sequence(sample: SequenceSample, model: RnnModel,
                      cache: _ForwardCache | None = None) -> dict:
    """Gradients of training_objective by full backpropagation through time.

    Returns a dict keyed like model.params.
    """
    T = sample.length
    if T == 0:
        return _zero_grads(model)
    if cache is None:
        cache = _forward(model, np.asarray(sample.inputs, float))
    p = model.params
    slope = model.slope
    Tn = model.norm.normalize_out(np.asarray(sample.targets, float))

    dY = (2.0 / T) * (cache.Y - Tn)
    g = {}
    g["Wo2"] = dY.T @ cache.X2
    g["bo2"] = dY.sum(axis=0)
    dAO1 = (dY @ p["Wo2"]) * _lrelu_grad(cache.AO1, slope)
    g["Wo1"] = dAO1.T @ cache.H
    g["bo1"] = dAO1.sum(axis=0)
    dH_out = dAO1 @ p["Wo1"]

    Z, R, C, Hprev = cache.Z, cache.R, cache.C, cache.Hprev
    dAZ = np.empty_like(Z)
    dAR = np.empty_like(Z)
    dAC = np.empty_like(Z)
    RzT, RrT, RcT = p["Rz"].T, p["Rr"].T, p["Rc"].T
    dh_next = np.zeros(model.d_h)
    for t in range(T - 1, -1, -1):
        dh = dH_out[t] + dh_next
        z, r, c, hp = Z[t], R[t], C[t], Hprev[t]
        dz = dh * (c - hp)
        dac = (dh * z) * (1.0 - c * c)
        dhp = dh * (1.0 - z)
        drh = RcT @ dac
        dhp += drh * r
        dar = (drh * hp) * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dhp += RrT @ dar + RzT @ daz
        dAZ[t], dAR[t], dAC[t] = daz, dar, dac
        dh_next = dhp

    X1 = cache.X1
    g["Wz"] = dAZ.T @ X1
    g["bz"] = dAZ.sum(axis=0)
    g["Rz"] = dAZ.T @ Hprev
    g["Wr"] = dAR.T @ X1
    g["br"] = dAR.sum(axis=0)
    g["Rr"] = dAR.T @ Hprev
    g["Wc"] = dAC.T @ X1
    g["bc"] = dAC.sum(axis=0)
    g["Rc"] = dAC.T @ cache.RH
    dX1 = dAZ @ p["Wz"] + dAR @ p["Wr"] + dAC @ p["Wc"]
    dA1 = dX1 * _lrelu_grad(cache.A1, slope)
    g["Wi"] = dA1.T @ cache.Xn
    g["bi"] = dA1.sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20000
    batch_switch_every: int = 1
    hidden_init: float = -1.0
    seed: int = 0
    clip_norm: float = 10.0
    val_every: int = 50
    stop_loss: float | None = None
    lr_decay_every: int = 0      # 0 disables the step schedule
    lr_decay_factor: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0.0:
            raise ConfigError("adam_eps must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_switch_every < 1:
            raise ConfigError("batch_switch_every must be >= 1")
        if self.lr_decay_every < 0:
            raise ConfigError("lr_decay_every must be >= 0")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError("lr_decay_factor must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Step-decayed learning rate for a 1-based epoch index."""
        if self.lr_decay_every == 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (
            (epoch - 1) // self.lr_decay_every)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def for_model(model: RnnModel) -> "AdamState":
        return AdamState(m=_zero_grads(model), v=_zero_grads(model), t=0)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scales the gradient dict in place to a global L2 norm of at most
    max_norm; returns the pre-clip norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0.0 and total > max_norm:
        factor = max_norm / total
        for k in grads:
            grads[k] *= factor
    return total


def adam_step(model: RnnModel, grads: dict, state: AdamState,
              config: TrainConfig, lr: float | None = None) -> None:
    """Bias-corrected Adam update, in place on model.params and the moments."""
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    if lr is None:
        lr = config.learning_rate
    for k in PARAM_ORDER:
        gk = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * gk
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * gk * gk
        mhat = state.m[k] / corr1
        vhat = state.v[k] / corr2
        model.params[k] -= lr * mhat / (np.sqrt(vhat) + config.adam_eps)


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float | None = None


@dataclass
class TrainResult:
    model: RnnModel
    history: list
    epochs_run: int
    stopped_early: bool


def _dataset_loss(model: RnnModel, samples) -> float:
    losses = [mse_loss(forward_sequence(s.inputs, model)[0], s.targets)
              for s in samples]
    return float(np.mean(losses)) if losses else 0.0


def train(dataset, config: TrainConfig, model: RnnModel,
          val_set=(), log=None) -> TrainResult:
    """Adam training loop; one epoch = one BPTT step on one simulation.

    Batches rotate round-robin over the dataset every batch_switch_every
    epochs.  Recorded train_loss is the de-normalized coefficient MSE of the
    batch before the update; val_loss is evaluated every val_every epochs
    (and on the last one).  Training stops early when `stop_loss` is set and
    the most recent loss of every batch is below it.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    lengths = {s.length for s in dataset}
    if len(lengths) != 1:
        raise ConfigError(f"sequences have unequal lengths {sorted(lengths)}")
    model = model.copy()
    state = AdamState.for_model(model)
    n_seq = len(dataset)
    history: list[HistoryRow] = []
    recent = [np.inf] * n_seq
    stopped = False
    epochs_run = 0
    for epoch in range(1, config.epochs + 1):
        idx = ((epoch - 1) // config.batch_switch_every) % n_seq
        sample = dataset[idx]
        cache = _forward(model, np.asarray(sample.inputs, float))
        raw = mse_loss(model.norm.denormalize_out(cache.Y), sample.targets)
        if not np.isfinite(raw):
            raise TrainingDivergedError(
                f"non-finite training loss at epoch {epoch}",
                epoch=epoch, loss=raw)
        grads = backward_sequence(sample, model, cache=cache)
        clip_gradients(grads, config.clip_norm)
        adam_step(model, grads, state, config, lr=config.lr_at(epoch))
        recent[idx] = raw
        row = HistoryRow(epoch=epoch, train_loss=raw)
        if val_set and (epoch % config.val_every == 0 or epoch == config.epochs):
            row.val_loss = _dataset_loss(model, val_set)
        history.append(row)
        epochs_run = epoch
        if log is not None and (epoch % max(1, config.val_every) == 0):
            log(row)
        if config.stop_loss is not None and max(recent) < config.stop_loss:
            stopped = True
            break
    if val_set and history and history[-1].val_loss is None:
        history[-1].val_loss = _dataset_loss(model, val_set)
    return TrainResult(model=model, history=history, epochs_run=epochs_run,
                       stopped_early=stopped)


@dataclass
class SweepRow:
    d_in: int
    d_h: int
    d_out: int
    n_params: int
    train_loss: float
    val_loss: float
    seconds: float
    error: str = ""


def hyper_sweep(d_in_list, d_h_list, d_out_list, dataset, config: TrainConfig,
                n_b: int, norm: NormStats, val_set=(), log=None):
    """Trains one model per (d_in, d_h, d_out) grid point with a fixed seed
    and epoch budget; failures are recorded per cell, not raised."""
    rows = []
    for d_in in d_in_list:
        for d_h in d_h_list:
            for d_out in d_out_list:
                start = time.perf_counter()
                try:
                    model0 = init_model(d_in, d_h, d_out, n_b, norm,
                                        seed=config.seed,
                                        hidden_init=config.hidden_init)
                    result = train(dataset, config, model0, val_set=val_set)
                    tl = _dataset_loss(result.model, dataset)
                    vl = _dataset_loss(result.model, val_set) if val_set else np.nan
                    rows.append(SweepRow(d_in, d_h, d_out,
                                         result.model.n_params, tl, vl,
                                         time.perf_counter() - start))
                except Exception as exc:  # keep sweeping on per-cell failure
                    rows.append(SweepRow(d_in, d_h, d_out, 0, np.nan, np.nan,
                                         time.perf_counter() - start,
                                         error=f"{type(exc).__name__}: {exc}"))
                if log is not None:
                    log(rows[-1])
    return rows


class RnnStepper:
    """Stateful step-by-step evaluator for the online phase."""

    def __init__(self, model: RnnModel):
        self.model = model
        self.reset()

    def reset(self) -> None:
        self.h = np.full(self.model.d_h, self.model.hidden_init)

    def step(self, macro_input) -> np.ndarray:
        """Advance one increment with raw (U11, U12); returns alpha (n_b,)."""
        m = self.model
        p = m.params
        xn = m.norm.normalize_in(np.asarray(macro_input, float))
        x1 = _lrelu(p["Wi"] @ xn + p["bi"], m.slope)
        self.h = gru_cell(x1, self.h, m)
        x2 = _lrelu(p["Wo1"] @ self.h + p["bo1"], m.slope)
        y = p["Wo2"] @ x2 + p["bo2"]
        return m.norm.denormalize_out(y)


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

def save_model(path, model: RnnModel) -> None:
    with open(path, "wb") as fh:
        binio.write_magic(fh, _MODEL_MAGIC)
        binio.write_u64(fh, model.d_in, model.d_h, model.d_out, model.n_b)
        binio.write_f64(fh, np.array([model.slope, model.hidden_init]))
        binio.write_str(fh, model.basis_fingerprint)
        binio.write_f64(fh, model.norm.in_mean)
        binio.write_f64(fh, model.norm.in_scale)
        binio.write_f64(fh, model.norm.out_scale)
        for name in PARAM_ORDER:
            binio.write_f64(fh, model.params[name])


def load_model(path) -> RnnModel:
    with open(path, "rb") as fh:
        binio.expect_magic(fh, _MODEL_MAGIC, "model file")
        d_in, d_h, d_out, n_b = binio.read_u64(fh, 4, "model dims")
        slope, hidden_init = binio.read_f64(fh, (2,), "model scalars")
        fp = binio.read_str(fh, "basis fingerprint")
        in_mean = binio.read_f64(fh, (2,), "input mean")
        in_scale = binio.read_f64(fh, (2,), "input scale")
        out_scale = binio.read_f64(fh, (n_b,), "output scale")
        shapes = _param_shapes(d_in, d_h, d_out, n_b)
        params = {name: binio.read_f64(fh, shapes[name], name)
                  for name in PARAM_ORDER}
        binio.expect_eof(fh, "model file")
    return RnnModel(d_in=d_in, d_h=d_h, d_out=d_out, n_b=n_b,
                    slope=float(slope), hidden_init=float(hidden_init),
                    norm=NormStats(in_mean, in_scale, out_scale),
                    params=params, basis_fingerprint=fp)
