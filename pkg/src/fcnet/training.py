"""
RMSProp training: VAE pretraining, weight transfer and gated fine-tuning.

Fine-tuning decides which epoch's weights to keep with a checkpoint gate.
With ``constraint_type`` 1 the gate favours sensitivity, with 2 specificity,
with ``"balanced"`` a small gap between the two and with ``"none"`` plain
validation accuracy. All randomness (shuffles, reparameterisation noise,
fresh output layers) derives from ``TrainingConfig.seed``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Any

import numpy as np

from . import network as nn
from .data import philox
from .dataset import FeatureMatrix
from .errors import ConstraintNeverSatisfied, InputError, NumericalError
from .metrics import ConfusionMatrix, metrics

log = logging.getLogger(__name__)

CONSTRAINT_TYPES = ("none", "1", "2", "balanced")

STREAM_VAE_SHUFFLE = 11
STREAM_VAE_EPS = 12
STREAM_VAE_INIT = 13
STREAM_TRANSFER = 14
STREAM_FT_SHUFFLE = 15
STREAM_MLP_INIT = 16


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-4
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    batch_size: int = 32
    max_training_epoch: int = 500
    early_stop_patience: int = 20
    beta: float = 1e-3
    seed: int = 0
    constraint_type: str = "none"
    constraint_threshold: float = 0.3
    hidden_sizes: tuple[int, int] = (250, 150)
    pretrain_epochs: int = 100
    pretrain_learning_rate: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "constraint_type", str(self.constraint_type))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        problems = []
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if not 0 < self.rmsprop_decay < 1:
            problems.append("rmsprop_decay must lie in (0, 1)")
        if not self.rmsprop_epsilon > 0:
            problems.append("rmsprop_epsilon must be > 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.max_training_epoch < 1:
            problems.append("max_training_epoch must be >= 1")
        if self.early_stop_patience < 1:
            problems.append("early_stop_patience must be >= 1")
        if self.beta < 0:
            problems.append("beta must be >= 0")
        if self.constraint_type not in CONSTRAINT_TYPES:
            problems.append(f"constraint_type must be one of {CONSTRAINT_TYPES}")
        if len(self.hidden_sizes) != 2 or min(self.hidden_sizes) < 1:
            problems.append("hidden_sizes must be two positive widths")
        if self.pretrain_epochs < 0:
            problems.append("pretrain_epochs must be >= 0")
        if self.pretrain_learning_rate is not None and not self.pretrain_learning_rate > 0:
            problems.append("pretrain_learning_rate must be > 0")
        if problems:
            raise InputError("; ".join(problems))

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> TrainingConfig:
        if not isinstance(doc, dict):
            raise InputError("training config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> TrainingConfig:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    def with_(self, **changes) -> TrainingConfig:
        return replace(self, **changes)


# -- RMSProp ----------------------------------------------------------------


@dataclass
class OptimizerState:
    """Running mean of squared gradients, one array per parameter leaf."""

    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params) -> OptimizerState:
        return cls([np.zeros_like(a) for a in nn.leaves(params)])


def rmsprop_step(params, grads, state: OptimizerState, cfg: TrainingConfig,
                 learning_rate: float | None = None):
    """One update; returns ``(new_params, new_state)`` without mutating inputs."""
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    rho, eps = cfg.rmsprop_decay, cfg.rmsprop_epsilon
    p_leaves, g_leaves = nn.leaves(params), nn.leaves(grads)
    if len(p_leaves) != len(g_leaves) or len(p_leaves) != len(state.v):
        raise InputError("parameter, gradient and optimizer state structures differ")
    new_p, new_v = [], []
    for p, g, v in zip(p_leaves, g_leaves, state.v):
        if p.shape != g.shape:
            raise InputError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        v = rho * v + (1.0 - rho) * g * g
        new_v.append(v)
        new_p.append(p - lr * g / (np.sqrt(v) + eps))
    return nn.with_leaves(params, new_p), OptimizerState(new_v)


# -- pretraining ----------------------------------------------------------


@dataclass
class PretrainResult:
    encoder: nn.EncoderParams
    decoder: nn.DecoderParams
    encoder_stats: nn.NormStats
    losses: list[float]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def pretrain_vae(x, cfg: TrainingConfig, epochs: int | None = None) -> PretrainResult:
    """Unsupervised VAE training on the rows of ``x`` (labels are ignored).

    ``losses[0]`` is the loss before any update; each later entry is the mean
    batch loss of one epoch.
    """
    if isinstance(x, FeatureMatrix):
        x = x.values
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("pretraining needs a non-empty 2-D matrix")
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    hidden, latent = cfg.hidden_sizes
    lr = cfg.pretrain_learning_rate or cfg.learning_rate
    params = nn.init_vae(philox(cfg.seed, STREAM_VAE_INIT), x.shape[1], hidden, latent)
    state = OptimizerState.zeros_like(params)

    eps0 = philox(cfg.seed, STREAM_VAE_EPS, 0).standard_normal((x.shape[0], latent))
    stats0 = nn.vae_batch_stats(params, x, eps0)
    losses = [nn.vae_gradients(params, x, eps0, stats0, cfg.beta)[0]]

    for epoch in range(1, epochs + 1):
        shuffle = philox(cfg.seed, STREAM_VAE_SHUFFLE, epoch)
        noise = philox(cfg.seed, STREAM_VAE_EPS, epoch)
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(x.shape[0], cfg.batch_size, shuffle)):
            xb = x[idx]
            eps = noise.standard_normal((idx.size, latent))
            stats = nn.vae_batch_stats(params, xb, eps)
            loss, grads = nn.vae_gradients(params, xb, eps, stats, cfg.beta)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in nn.leaves(grads)):
                raise NumericalError(f"non-finite VAE loss at epoch {epoch}, batch {b}")
            params, state = rmsprop_step(params, grads, state, cfg, lr)
            total += loss * idx.size
            count += idx.size
        losses.append(total / count)
    enc_stats = nn.fit_norm_stats(params.encoder.layer1(x))
    return PretrainResult(params.encoder, params.decoder, enc_stats, losses)


def transfer(enc: nn.EncoderParams, seed: int = 0, classes: int = 2,
             hidden_sizes: tuple[int, int] | None = None) -> nn.MlpParams:
    """MLP whose hidden layers are copies of the encoder's layers.

    The output layer is freshly drawn from a seeded Glorot-uniform law.
    """
    dims = (enc.layer1.fan_out, enc.layer2.fan_out)
    if enc.layer2.fan_in != enc.layer1.fan_out:
        raise InputError("encoder layers do not chain")
    if hidden_sizes is not None and tuple(hidden_sizes) != dims:
        raise InputError(f"encoder widths {dims} differ from MLP hidden sizes {tuple(hidden_sizes)}")
    copy = lambda lp: nn.LayerParams(lp.weights.copy(), lp.biases.copy())  # noqa: E731
    out = nn.glorot_layer(philox(seed, STREAM_TRANSFER), dims[1], classes)
    return nn.MlpParams(copy(enc.layer1), copy(enc.layer2), out)


def random_mlp(input_dim: int, cfg: TrainingConfig) -> nn.MlpParams:
    """Unpretrained starting point with the same shapes as :func:`transfer`."""
    return nn.init_mlp(philox(cfg.seed, STREAM_MLP_INIT), input_dim, *cfg.hidden_sizes)


# -- checkpoint gate ----------------------------------------------------------


@dataclass(frozen=True)
class GateState:
    max_acc: float = 0.0
    delta: float = -1.0

    @classmethod
    def initial(cls, constraint_type: str) -> GateState:
        # delta = -1 can never satisfy |sen - spe| <= delta, so the
        # balanced branch starts from the largest possible gap instead.
        return cls(0.0, 2.0 if str(constraint_type) == "balanced" else -1.0)


def constraint_gate(state: GateState, v_acc: float, v_sen: float, v_spe: float,
                    constraint_type: str = "none",
                    threshold: float = 0.3) -> tuple[bool, GateState]:
    """Decide whether the current epoch's weights replace the saved ones."""
    ctype = str(constraint_type)
    if ctype not in CONSTRAINT_TYPES:
        raise InputError(f"unknown constraint type {constraint_type!r}")
    if not v_acc >= state.max_acc:
        return False, state
    if ctype == "none":
        return True, GateState(v_acc, state.delta)
    if ctype in ("1", "2"):
        gap = v_sen - v_spe if ctype == "1" else v_spe - v_sen
        if not gap >= state.delta:
            return False, state
        delta = gap if state.delta < threshold else threshold
        return True, GateState(v_acc, delta)
    gap = abs(v_sen - v_spe)
    if not gap <= state.delta:
        return False, state
    delta = gap if state.delta > threshold else threshold
    return True, GateState(v_acc, delta)


# -- fine-tuning -----------------------------------------------------------


def evaluate(model: nn.TrainedModel, fm: FeatureMatrix) -> tuple[ConfusionMatrix, np.ndarray]:
    """Confusion matrix under threshold moving, plus the positive-class scores."""
    probs = model.predict_proba(fm.values)
    pred = nn.predict_with_threshold_moving(probs, *model.class_counts)
    return ConfusionMatrix.from_predictions(fm.labels, pred), probs[:, 0]


def fine_tune(init: nn.MlpParams, train: FeatureMatrix, val: FeatureMatrix,
              cfg: TrainingConfig, stop_early: bool = True) -> nn.TrainedModel:
    """Cross-entropy training with validation-gated checkpointing.

    Each epoch makes one shuffled mini-batch pass, freezes normalisation
    statistics from the whole training set and scores the validation split.
    Training stops after ``max_training_epoch`` epochs or, when
    ``stop_early``, after ``early_stop_patience`` epochs in which no save
    raised the best validation accuracy. Saves at an unchanged accuracy still
    replace the returned weights but do not reset the patience counter.
    """
    train.require_both_classes()
    counts = train.class_counts()
    x, y = np.asarray(train.values, dtype=np.float64), train.labels
    params = init
    state = OptimizerState.zeros_like(params)
    gate = GateState.initial(cfg.constraint_type)
    best: nn.TrainedModel | None = None
    history: list[dict[str, Any]] = []
    since_improved = 0

    for epoch in range(1, cfg.max_training_epoch + 1):
        shuffle = philox(cfg.seed, STREAM_FT_SHUFFLE, epoch)
        total = 0.0
        for b, idx in enumerate(_batches(x.shape[0], cfg.batch_size, shuffle)):
            xb = x[idx]
            stats = nn.mlp_batch_stats(params, xb)
            loss, grads = nn.mlp_gradients(params, xb, y[idx], stats)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b}")
            params, state = rmsprop_step(params, grads, state, cfg)
            total += loss * idx.size

        current = nn.TrainedModel(params, nn.mlp_batch_stats(params, x), counts)
        train_cm, _ = evaluate(current, train)
        val_cm, _ = evaluate(current, val)
        vm = metrics(val_cm)
        prev_max = gate.max_acc
        save, gate = constraint_gate(gate, vm.accuracy, vm.sensitivity, vm.specificity,
                                     cfg.constraint_type, cfg.constraint_threshold)
        history.append({
            "epoch": epoch,
            "loss": total / x.shape[0],
            "train_accuracy": metrics(train_cm).accuracy,
            "val_accuracy": vm.accuracy,
            "val_sensitivity": vm.sensitivity,
            "val_specificity": vm.specificity,
            "saved": save,
        })
        improved = save and (best is None or gate.max_acc > prev_max)
        if save:
            best = current
        since_improved = 0 if improved else since_improved + 1
        if stop_early and since_improved >= cfg.early_stop_patience:
            break

    if best is None:
        raise ConstraintNeverSatisfied(
            f"no checkpoint satisfied constraint {cfg.constraint_type!r} "
            f"within {len(history)} epochs"
        )
    best.history = history
    return best


def train_model(train: FeatureMatrix, val: FeatureMatrix, cfg: TrainingConfig,
                pretrain: bool = True, pretrain_data: np.ndarray | None = None) -> nn.TrainedModel:
    """Pretrain (optionally), transfer and fine-tune on already-selected features."""
    if pretrain:
        source = train.values if pretrain_data is None else pretrain_data
        enc = pretrain_vae(source, cfg).encoder
        init = transfer(enc, cfg.seed, hidden_sizes=cfg.hidden_sizes)
    else:
        init = random_mlp(train.num_features, cfg)
    return fine_tune(init, train, val, cfg)
