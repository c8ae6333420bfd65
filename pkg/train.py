"""Loss, dropout, optimizers, the training loop and hyperparameter search."""
import dataclasses
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from data import make_batch
from metrics import UndefinedMetric, evaluate_pooled
from model import Architecture
from numerics import Rng, all_finite, copy_params
from utils import ShapeError

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adagrad", "rmsprop")


@dataclass
class TrainConfig:
    rank: int = 50
    hidden: int = 100
    learning_rate: float = 0.1
    dropout_rate: float = 0.1
    optimizer: str = "adagrad"
    rmsprop_decay: float = 0.9
    epsilon: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    batch: int = 32
    seed: int = 0
    tle_window: int = 3
    rnn_activation: str = "tanh"
    # 0 ties the static embedding size and static branch width to rank and hidden
    static_rank: int = 0
    static_hidden: int = 0

    def __post_init__(self):
        if self.rank < 1 or self.hidden < 1 or self.batch < 1 or self.max_epochs < 1 or self.tle_window < 1:
            raise ValueError("rank, hidden, batch, max_epochs and tle_window must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {', '.join(OPTIMIZERS)}")
        if not 0.0 < self.rmsprop_decay < 1.0:
            raise ValueError("rmsprop_decay must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")
        if self.static_rank < 0 or self.static_hidden < 0:
            raise ValueError("static_rank and static_hidden must be non-negative")
        if self.rnn_activation not in ("tanh", "sigmoid"):
            raise ValueError("rnn_activation must be tanh or sigmoid")
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF

    def key(self):
        return dataclasses.astuple(self)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    valid_auprc: list = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("-inf")
    diverged: bool = False

    def to_frame(self):
        return pd.DataFrame({
            "epoch": range(1, len(self.train_loss) + 1),
            "train_loss": self.train_loss,
            "valid_auprc": self.valid_auprc,
            "best": [e + 1 == self.best_epoch for e in range(len(self.train_loss))],
        })


# ----------------------
# Loss
# ----------------------
def bce_loss(yhat, y, mask=None):
    """Summed binary cross-entropy over every (masked-in) entry."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ShapeError("bce_loss", yhat.shape, y.shape)
    terms = -y * np.log(yhat) - (1.0 - y) * np.log(1.0 - yhat)
    if mask is not None:
        terms = terms * mask
    return float(terms.sum())


def bce_grad(yhat, y, mask=None):
    """Gradient of bce_loss w.r.t. the pre-sigmoid activations."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ShapeError("bce_grad", yhat.shape, y.shape)
    g = yhat - y
    return g if mask is None else g * mask


# ----------------------
# Dropout
# ----------------------
def dropout_mask(shape, rate, rng):
    """Inverted dropout: zeros with probability ``rate``, survivors scaled by 1/(1-rate)."""
    if rate <= 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def dropout_apply(v, rate, rng, training):
    if not training or rate <= 0.0:
        return v
    return v * dropout_mask(np.shape(v), rate, rng)


# ----------------------
# Optimizers
# ----------------------
def adagrad_update(theta, g, state, lr, eps=1e-8):
    if theta.shape != g.shape or state.shape != g.shape:
        raise ShapeError("adagrad_update", theta.shape, g.shape)
    state += g * g
    theta -= lr * g / (np.sqrt(state) + eps)
    return theta, state


def rmsprop_update(theta, g, state, lr, rho=0.9, eps=1e-8):
    if theta.shape != g.shape or state.shape != g.shape:
        raise ShapeError("rmsprop_update", theta.shape, g.shape)
    state *= rho
    state += (1.0 - rho) * g * g
    theta -= lr * g / np.sqrt(state + eps)
    return theta, state


class Optimizer:
    """Per-parameter accumulators; updates parameters in place in insertion order."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.state = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, params, grads):
        cfg = self.cfg
        for name, theta in params.items():
            if cfg.optimizer == "adagrad":
                adagrad_update(theta, grads[name], self.state[name], cfg.learning_rate, cfg.epsilon)
            else:
                rmsprop_update(theta, grads[name], self.state[name], cfg.learning_rate, cfg.rmsprop_decay, cfg.epsilon)


# ----------------------
# Training loop
# ----------------------
def _batches(patients, size, order):
    for start in range(0, len(order), size):
        yield make_batch([patients[i] for i in order[start:start + size]])


def train_epoch(model, params, patients, cfg, opt, rng, update=True):
    """One pass over ``patients`` in shuffled mini-batches; returns the summed loss.

    With ``update=False`` the pass only evaluates the loss (no dropout, no shuffling).
    """
    if not patients:
        raise ValueError("empty training set")
    if not model.trainable:
        return 0.0
    order = rng.permutation(len(patients)) if update else np.arange(len(patients))
    total = 0.0
    for batch in _batches(patients, cfg.batch, order):
        masks = None
        if update and cfg.dropout_rate > 0:
            B, T = batch.visits.shape[:2]
            masks = {name: dropout_mask(shape, cfg.dropout_rate, rng)
                     for name, shape in model.dropout_shapes(B, T).items()}
        yhat, trace = model.forward(params, batch.static, batch.visits, masks)
        total += bce_loss(yhat, batch.targets, batch.mask)
        if update:
            grads = model.backward(params, trace, bce_grad(yhat, batch.targets, batch.mask))
            opt.step(params, grads)
    return total


def predict(model, params, patients, batch_size=64, rng=None):
    """Per-patient (T, K) probability arrays in input order."""
    rng = rng or Rng(model.seed).substream("random-predict")
    out = []
    for start in range(0, len(patients), batch_size):
        chunk = patients[start:start + batch_size]
        batch = make_batch(chunk)
        yhat, _ = model.forward(params, batch.static, batch.visits, rng=rng)
        out.extend(yhat[b, :n] for b, n in enumerate(batch.lengths))
    return out


def pooled_arrays(patients, predictions):
    """Stack per-patient predictions with their targets and masks into (N, K) arrays."""
    scores = np.concatenate(predictions)
    labels = np.concatenate([p.targets for p in patients])
    mask = np.concatenate([p.mask for p in patients])
    return scores, labels, mask


def validation_score(model, params, patients, batch_size=64):
    scores, labels, mask = pooled_arrays(patients, predict(model, params, patients, batch_size))
    if not np.all(np.isfinite(scores)):
        return float("-inf")
    try:
        return evaluate_pooled(scores, labels, mask)["auprc"]
    except UndefinedMetric as e:
        logger.warning("validation AUPRC undefined: %s", e)
        return float("-inf")


def fit(model, train, valid, cfg):
    """Train with early stopping on validation pooled AUPRC; returns (best params, history).

    Training stops once more than ``cfg.patience`` epochs pass without a new best.
    """
    if not train or not valid:
        raise ValueError("fit needs non-empty training and validation sets")
    rng = Rng(cfg.seed)
    params = model.init_params(rng.substream("init"))
    history = TrainHistory()
    if not model.trainable:
        history.best_score = validation_score(model, params, valid, cfg.batch)
        return params, history

    opt = Optimizer(cfg, params)
    best = copy_params(params)
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            loss = train_epoch(model, params, train, cfg, opt, rng.substream(f"epoch/{epoch}"))
        if not np.isfinite(loss) or not all_finite(params):
            logger.warning("%s diverged at epoch %d (lr=%g)", model.arch, epoch, cfg.learning_rate)
            history.diverged = True
            break
        score = validation_score(model, params, valid, cfg.batch)
        history.train_loss.append(loss)
        history.valid_auprc.append(score)
        if score > history.best_score:
            history.best_score, history.best_epoch = score, epoch
            best = copy_params(params)
            since_best = 0
        else:
            since_best += 1
        logger.info("%s epoch %d: loss=%.4f valid AUPRC=%.4f", model.arch, epoch, loss, score)
        if since_best > cfg.patience:
            break
    return best, history


# ----------------------
# Hyperparameter search
# ----------------------
TLE_WINDOWS = (1, 3, 5)


def default_grid(base=None, arch=None):
    """Small grid around the configuration reported to win most often.

    The windowed feedforward baseline also searches its window length.
    """
    base = base or TrainConfig()
    windows = TLE_WINDOWS if arch == "tle" else (base.tle_window,)
    grid = []
    for rank, hidden, lr, dropout, opt, window in itertools.product((10, 50), (32, 100), (0.01, 0.1), (0.0, 0.1),
                                                                    OPTIMIZERS, windows):
        grid.append(dataclasses.replace(base, rank=rank, hidden=hidden, learning_rate=lr, dropout_rate=dropout,
                                        optimizer=opt, tle_window=window))
    return grid


def grid_search(arch, dims, train, valid, grid):
    """Fit every grid point; the best validation pooled AUPRC wins, ties go to the smallest config."""
    if not grid:
        raise ValueError("empty hyperparameter grid")
    rows = []
    best_cfg, best_score, best_params = None, float("-inf"), None
    for cfg in sorted(grid, key=TrainConfig.key):
        model = Architecture.from_config(arch, dims, cfg)
        params, history = fit(model, train, valid, cfg)
        rows.append({**dataclasses.asdict(cfg), "valid_auprc": history.best_score, "best_epoch": history.best_epoch,
                     "diverged": history.diverged})
        if best_cfg is None or history.best_score > best_score:
            best_cfg, best_score, best_params = cfg, history.best_score, params
    return best_cfg, pd.DataFrame(rows), best_params
