"""
Simplified VAE and MLP classifier with hand-written backpropagation.

Shapes follow the batch-first convention: inputs are (batch, features) and a
layer computes ``x @ W.T + b`` with ``W`` of shape (out, in).

Hidden layers use the normalisation/modified-tanh pipeline::

    x_norm = 2 * (x - x_min) / (x_max - x_min) - 1
    y      = tanh(2.5 * x_norm)

where ``x_min``/``x_max`` are per-node statistics (:class:`NormStats`). A
node whose statistics coincide maps to 0. Statistics are constants as far
as gradients are concerned.

The encoder has a single head: ``mu = logvar = W2 h + b2`` and
``z = mu + eps * exp(0.5 * logvar)``. Its two layers have exactly the shape
of the MLP's two hidden layers so they can be copied across.

Output column 0 of the classifier is the positive (ASD-analog) class and
column 1 the negative class, matching the ``(p_asd, p_hc)`` convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from typing import Any, Sequence

import numpy as np

from .errors import FormatError, InputError

ACT_GAIN = 2.5
MODEL_FORMAT = "fcnet-1"


@dataclass(frozen=True)
class LayerParams:
    weights: np.ndarray
    biases: np.ndarray

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.fan_in:
            raise InputError(f"layer expects {self.fan_in} inputs, got {x.shape[-1]}")
        return x @ self.weights.T + self.biases


@dataclass(frozen=True)
class NormStats:
    x_min: np.ndarray
    x_max: np.ndarray

    def span(self) -> np.ndarray:
        return self.x_max - self.x_min


@dataclass(frozen=True)
class EncoderParams:
    layer1: LayerParams
    layer2: LayerParams


@dataclass(frozen=True)
class DecoderParams:
    layer1: LayerParams
    layer2: LayerParams


@dataclass(frozen=True)
class VaeParams:
    encoder: EncoderParams
    decoder: DecoderParams


@dataclass(frozen=True)
class MlpParams:
    hidden1: LayerParams
    hidden2: LayerParams
    output: LayerParams

    @property
    def dims(self) -> list[int]:
        return [self.hidden1.fan_in, self.hidden1.fan_out, self.hidden2.fan_out,
                self.output.fan_out]


@dataclass
class LatentSample:
    mu: np.ndarray
    logvar: np.ndarray
    eps: np.ndarray
    z: np.ndarray


# -- parameter trees ------------------------------------------------------


def layers_of(params) -> list[LayerParams]:
    """All layers of a parameter container in declaration order."""
    if isinstance(params, LayerParams):
        return [params]
    out = []
    for f in fields(params):
        out.extend(layers_of(getattr(params, f.name)))
    return out


def leaves(params) -> list[np.ndarray]:
    return [a for layer in layers_of(params) for a in (layer.weights, layer.biases)]


def with_leaves(template, arrays: Sequence[np.ndarray]):
    """Rebuild a container shaped like ``template`` from flat arrays."""
    it = iter(arrays)

    def build(node):
        if isinstance(node, LayerParams):
            return LayerParams(next(it), next(it))
        return replace(node, **{f.name: build(getattr(node, f.name)) for f in fields(node)})

    return build(template)


def glorot_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> LayerParams:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return LayerParams(rng.uniform(-r, r, (fan_out, fan_in)), np.zeros(fan_out))


def init_vae(rng: np.random.Generator, input_dim: int, hidden: int, latent: int) -> VaeParams:
    enc = EncoderParams(glorot_layer(rng, input_dim, hidden), glorot_layer(rng, hidden, latent))
    dec = DecoderParams(glorot_layer(rng, latent, hidden), glorot_layer(rng, hidden, input_dim))
    return VaeParams(enc, dec)


def init_mlp(rng: np.random.Generator, input_dim: int, hidden1: int, hidden2: int,
             classes: int = 2) -> MlpParams:
    return MlpParams(glorot_layer(rng, input_dim, hidden1), glorot_layer(rng, hidden1, hidden2),
                     glorot_layer(rng, hidden2, classes))


# -- activation -----------------------------------------------------------


def fit_norm_stats(pre_activations: np.ndarray) -> NormStats:
    pre = np.atleast_2d(np.asarray(pre_activations, dtype=np.float64))
    if pre.shape[0] == 0:
        raise InputError("cannot fit normalisation statistics on an empty batch")
    return NormStats(pre.min(axis=0), pre.max(axis=0))


def _normalise(pre: np.ndarray, stats: NormStats) -> tuple[np.ndarray, np.ndarray]:
    span = stats.span()
    # a subnormal span has no finite reciprocal; treat it as degenerate
    flat = span < np.finfo(np.float64).tiny
    scale = np.where(flat, 0.0, 2.0 / np.where(flat, 1.0, span))
    return (pre - stats.x_min) * scale - np.where(flat, 0.0, 1.0), scale


def norm_act_forward(pre: np.ndarray, stats: NormStats) -> np.ndarray:
    x_norm, _ = _normalise(np.asarray(pre, dtype=np.float64), stats)
    return np.tanh(ACT_GAIN * x_norm)


def norm_act_grad(y: np.ndarray, stats: NormStats) -> np.ndarray:
    """d(output)/d(pre-activation) given the activation output ``y``."""
    _, scale = _normalise(np.zeros_like(stats.x_min), stats)
    return ACT_GAIN * (1.0 - y * y) * scale


# -- forward passes --------------------------------------------------------


def reparameterize(mu: np.ndarray, logvar: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return mu + eps * np.exp(0.5 * logvar)


def encoder_forward(p: EncoderParams, x: np.ndarray, eps: np.ndarray,
                    stats: NormStats) -> tuple[LatentSample, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    h = norm_act_forward(p.layer1(x), stats)
    mu = p.layer2(h)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.shape:
        raise InputError(f"eps shape {eps.shape} does not match latent shape {mu.shape}")
    # Single head: the same array serves as mean and log-variance.
    return LatentSample(mu, mu, eps, reparameterize(mu, mu, eps)), h


def decoder_forward(p: DecoderParams, z: np.ndarray, stats: NormStats) -> np.ndarray:
    hidden = norm_act_forward(p.layer1(np.asarray(z, dtype=np.float64)), stats)
    return p.layer2(hidden)


def kl_term(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Elementwise KL divergence of N(mu, exp(logvar)) from N(0, 1)."""
    return -0.5 * (1.0 + logvar - np.exp(logvar) - mu * mu)


def vae_loss(recon: np.ndarray, x: np.ndarray, mu: np.ndarray, logvar: np.ndarray,
             beta: float) -> float:
    """Mean absolute reconstruction error plus ``beta`` times the KL term.

    The MAE is averaged over features and then over the batch; the KL term
    is summed over latent dimensions and averaged over the batch.
    """
    recon, x = np.atleast_2d(recon), np.atleast_2d(x)
    mu, logvar = np.atleast_2d(mu), np.atleast_2d(logvar)
    if recon.shape != x.shape or mu.shape != logvar.shape:
        raise InputError("shape mismatch in vae_loss")
    mae = float(np.abs(recon - x).mean())
    kl = float(kl_term(mu, logvar).sum(axis=1).mean())
    return mae + beta * kl


def vae_batch_stats(p: VaeParams, x: np.ndarray, eps: np.ndarray) -> tuple[NormStats, NormStats]:
    """Encoder- and decoder-hidden statistics of one batch, fitted in order."""
    enc_stats = fit_norm_stats(p.encoder.layer1(x))
    latent, _ = encoder_forward(p.encoder, x, eps, enc_stats)
    dec_stats = fit_norm_stats(p.decoder.layer1(latent.z))
    return enc_stats, dec_stats


def mlp_hidden(p: MlpParams, x: np.ndarray,
               stats: tuple[NormStats, NormStats]) -> tuple[np.ndarray, np.ndarray]:
    h1 = norm_act_forward(p.hidden1(np.asarray(x, dtype=np.float64)), stats[0])
    h2 = norm_act_forward(p.hidden2(h1), stats[1])
    return h1, h2


def mlp_forward(p: MlpParams, x: np.ndarray, stats: tuple[NormStats, NormStats]) -> np.ndarray:
    return p.output(mlp_hidden(p, x, stats)[1])


def mlp_batch_stats(p: MlpParams, x: np.ndarray) -> tuple[NormStats, NormStats]:
    s1 = fit_norm_stats(p.hidden1(x))
    s2 = fit_norm_stats(p.hidden2(norm_act_forward(p.hidden1(x), s1)))
    return s1, s2


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_with_threshold_moving(probs, n_asd: int, n_hc: int):
    """Positive iff ``p_asd / p_hc > n_asd / n_hc``; the tie goes negative.

    ``probs`` is one ``(p_asd, p_hc)`` pair or an array of them; class counts
    come from the training set. Returns 1 (positive) or 0 per pair.
    """
    if n_asd <= 0 or n_hc <= 0:
        raise InputError("training class counts must both be positive")
    probs = np.asarray(probs, dtype=np.float64)
    # Cross-multiplied to avoid dividing by p_hc.
    out = (probs[..., 0] * n_hc > n_asd * probs[..., 1]).astype(np.int8)
    return int(out) if out.ndim == 0 else out


def targets_one_hot(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    t = np.zeros((labels.size, 2))
    t[np.arange(labels.size), np.where(labels == 1, 0, 1)] = 1.0
    return t


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = np.atleast_2d(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-(targets_one_hot(labels) * logp).sum(axis=1).mean())


# -- backward passes --------------------------------------------------------


def _layer_grads(delta: np.ndarray, inputs: np.ndarray) -> LayerParams:
    return LayerParams(delta.T @ inputs, delta.sum(axis=0))


def vae_gradients(p: VaeParams, x: np.ndarray, eps: np.ndarray,
                  stats: tuple[NormStats, NormStats], beta: float) -> tuple[float, VaeParams]:
    """Batch loss and its gradient with respect to every VAE parameter."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    enc_stats, dec_stats = stats
    batch, dim = x.shape
    latent, h = encoder_forward(p.encoder, x, np.atleast_2d(eps), enc_stats)
    dec_hidden = norm_act_forward(p.decoder.layer1(latent.z), dec_stats)
    recon = p.decoder.layer2(dec_hidden)
    loss = vae_loss(recon, x, latent.mu, latent.logvar, beta)

    d_recon = np.sign(recon - x) / (batch * dim)
    g_dec2 = _layer_grads(d_recon, dec_hidden)
    d_dec_pre = (d_recon @ p.decoder.layer2.weights) * norm_act_grad(dec_hidden, dec_stats)
    g_dec1 = _layer_grads(d_dec_pre, latent.z)
    d_z = d_dec_pre @ p.decoder.layer1.weights

    mu = latent.mu
    sigma = np.exp(0.5 * mu)
    # mu feeds z both as mean and (through logvar) as scale.
    d_mu = d_z * (1.0 + 0.5 * latent.eps * sigma)
    d_mu += (beta / batch) * (mu + 0.5 * (np.exp(mu) - 1.0))
    g_enc2 = _layer_grads(d_mu, h)
    d_enc_pre = (d_mu @ p.encoder.layer2.weights) * norm_act_grad(h, enc_stats)
    g_enc1 = _layer_grads(d_enc_pre, x)
    return loss, VaeParams(EncoderParams(g_enc1, g_enc2), DecoderParams(g_dec1, g_dec2))


def mlp_gradients(p: MlpParams, x: np.ndarray, labels: np.ndarray,
                  stats: tuple[NormStats, NormStats]) -> tuple[float, MlpParams]:
    """Mean cross entropy over the batch and its gradient."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h1, h2 = mlp_hidden(p, x, stats)
    logits = p.output(h2)
    loss = cross_entropy(logits, labels)
    d_logits = (softmax(logits) - targets_one_hot(labels)) / x.shape[0]
    g_out = _layer_grads(d_logits, h2)
    d2 = (d_logits @ p.output.weights) * norm_act_grad(h2, stats[1])
    g_h2 = _layer_grads(d2, h1)
    d1 = (d2 @ p.hidden2.weights) * norm_act_grad(h1, stats[0])
    g_h1 = _layer_grads(d1, x)
    return loss, MlpParams(g_h1, g_h2, g_out)


def gradients(kind: str, params, batch, *, stats, labels=None, eps=None, beta: float = 0.0):
    """Dispatch to :func:`vae_gradients` (``"vae"``) or :func:`mlp_gradients`."""
    if kind == "vae":
        return vae_gradients(params, batch, eps, stats, beta)
    if kind == "cross_entropy":
        return mlp_gradients(params, batch, labels, stats)
    raise InputError(f"unknown loss kind {kind!r}")


# -- trained classifier ----------------------------------------------------


@dataclass
class TrainedModel:
    """A fine-tuned classifier ready for inference.

    ``stats`` are frozen from a full pass over the training set and
    ``class_counts`` are the training ``(positives, negatives)`` used by
    threshold moving. ``feature_indices`` optionally maps model inputs to
    columns of an unselected feature matrix.
    """

    params: MlpParams
    stats: tuple[NormStats, NormStats]
    class_counts: tuple[int, int]
    feature_indices: np.ndarray | None = None
    history: list[dict[str, Any]] | None = None

    def logits(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.params, x, self.stats)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict_with_threshold_moving(self.predict_proba(x), *self.class_counts)

    def select_inputs(self, x: np.ndarray) -> np.ndarray:
        """Pick this model's input columns from a wider feature matrix."""
        if self.feature_indices is None or x.shape[1] == self.params.hidden1.fan_in:
            return x
        if self.feature_indices.size and self.feature_indices[-1] >= x.shape[1]:
            raise InputError("feature matrix is narrower than the model's feature indices")
        return x[:, self.feature_indices]

    def to_json(self) -> dict[str, Any]:
        def layer(lp):
            return {"weights": lp.weights.tolist(), "biases": lp.biases.tolist()}

        return {
            "format": MODEL_FORMAT,
            "layer_dims": self.params.dims,
            "layers": [layer(lp) for lp in layers_of(self.params)],
            "norm_stats": [{"x_min": s.x_min.tolist(), "x_max": s.x_max.tolist()}
                           for s in self.stats],
            "class_counts": {"positive": int(self.class_counts[0]),
                             "negative": int(self.class_counts[1])},
            "feature_indices": (None if self.feature_indices is None
                                else [int(i) for i in self.feature_indices]),
        }

    def dumps(self) -> str:
        # repr-based float output round-trips 64-bit values exactly.
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> TrainedModel:
        if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
            raise FormatError(f"not an {MODEL_FORMAT} model document")
        try:
            dims = [int(d) for d in doc["layer_dims"]]
            raw = doc["layers"]
            if len(dims) != 4 or len(raw) != 3:
                raise FormatError("expected 3 layers")
            layers = []
            for k, item in enumerate(raw):
                w = np.asarray(item["weights"], dtype=np.float64)
                b = np.asarray(item["biases"], dtype=np.float64)
                if w.shape != (dims[k + 1], dims[k]) or b.shape != (dims[k + 1],):
                    raise FormatError(f"layer {k} has shape {w.shape}, expected "
                                      f"{(dims[k + 1], dims[k])}")
                if not (np.isfinite(w).all() and np.isfinite(b).all()):
                    raise FormatError(f"layer {k} has non-finite entries")
                layers.append(LayerParams(w, b))
            stats = []
            for k, item in enumerate(doc["norm_stats"]):
                s = NormStats(np.asarray(item["x_min"], dtype=np.float64),
                              np.asarray(item["x_max"], dtype=np.float64))
                if s.x_min.shape != (dims[k + 1],) or s.x_max.shape != s.x_min.shape:
                    raise FormatError(f"norm_stats {k} has the wrong length")
                stats.append(s)
            if len(stats) != 2:
                raise FormatError("expected two norm_stats entries")
            counts = (int(doc["class_counts"]["positive"]), int(doc["class_counts"]["negative"]))
            fi = doc.get("feature_indices")
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed model document: {exc}") from exc
        return cls(MlpParams(*layers), (stats[0], stats[1]), counts,
                   None if fi is None else np.asarray(fi, dtype=np.int64))

    @classmethod
    def loads(cls, text: str) -> TrainedModel:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"model file is not JSON: {exc}", exc.pos) from exc
        return cls.from_json(doc)
