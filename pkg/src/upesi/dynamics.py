"""Embedding-conditioned forward dynamics: encoder, predictor and reconstruction decoder.

The predictor sees standardized ``(o, a)`` and the raw embedding and outputs a
standardized observation delta, so ``o' = o + sigma_delta * net(...)``.  There
is no mean shift on the delta: a zero network predicts ``o' = o`` exactly.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import MLP, Adam, NonFiniteError, load_mlp, save_mlp

log = logging.getLogger(__name__)

HIDDEN = 128
N_LAYERS = 4
LATENT_DIMS = {"pendulum": 2, "chain": 4}
STD_FLOOR = 1e-6


def _sizes(n_in, n_out, hidden=HIDDEN, n_layers=N_LAYERS):
    return [n_in] + [hidden] * (n_layers - 1) + [n_out]


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))

    def __call__(self, x):
        return (x - self.mean) / self.std

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass
class EmbeddingBounds:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=float)
        self.high = np.asarray(self.high, dtype=float)
        if self.low.shape != self.high.shape or not np.all(self.low < self.high):
            raise ValueError("embedding bounds need low < high in every dimension")

    @property
    def dim(self):
        return self.low.size

    @classmethod
    def from_samples(cls, alpha, pad=0.1):
        lo, hi = alpha.min(axis=0), alpha.max(axis=0)
        width = np.maximum(hi - lo, 1e-6)
        return cls(lo - pad * width, hi + pad * width)

    def sample(self, rng, n):
        return self.low + (self.high - self.low) * np.random.default_rng(rng).random((n, self.dim))

    def contains(self, alpha, tol=0.0):
        a = np.asarray(alpha)
        return bool(np.all(a >= self.low - tol) and np.all(a <= self.high + tol))

    def to_dict(self):
        return {"low": self.low.tolist(), "high": self.high.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["low"], d["high"])


class DynamicsModel:
    """Encoder E(theta) -> alpha, predictor F(o, a, alpha) -> o', decoder D(alpha) -> theta.

    ``latent_dim`` 0 gives a predictor without dynamics input (ablation
    baseline); encoder and decoder are then absent.
    """

    def __init__(self, obs_dim, act_dim, theta_dim, latent_dim, obs_stats=None, act_stats=None,
                 delta_std=None, rng=None, dtype=np.float64, zero=False):
        self.obs_dim, self.act_dim, self.theta_dim, self.latent_dim = obs_dim, act_dim, theta_dim, latent_dim
        rng = np.random.default_rng(rng)
        self.predictor = MLP(_sizes(obs_dim + act_dim + latent_dim, obs_dim), "relu", rng=rng,
                             dtype=dtype, zero=zero)
        if latent_dim > 0:
            self.encoder = MLP(_sizes(theta_dim, latent_dim), "relu", rng=rng, dtype=dtype, zero=zero)
            self.decoder = MLP(_sizes(latent_dim, theta_dim), "relu", rng=rng, dtype=dtype, zero=zero)
        else:
            self.encoder = self.decoder = None
        self.obs_stats = obs_stats or Standardizer(np.zeros(obs_dim), np.ones(obs_dim))
        self.act_stats = act_stats or Standardizer(np.zeros(act_dim), np.ones(act_dim))
        self.delta_std = np.ones(obs_dim) if delta_std is None else np.asarray(delta_std, dtype=float)

    # inference

    def encode(self, theta_norm):
        if self.encoder is None:
            raise ValueError("model has no encoder (latent_dim 0)")
        theta_norm = np.asarray(theta_norm, dtype=float)
        if theta_norm.shape[-1] != self.theta_dim:
            raise ValueError(f"expected {self.theta_dim} dynamics parameters, got {theta_norm.shape[-1]}")
        return np.asarray(self.encoder.forward(theta_norm), dtype=float)

    def decode(self, alpha):
        if self.decoder is None:
            raise ValueError("model has no decoder (latent_dim 0)")
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape[-1] != self.latent_dim:
            raise ValueError(f"expected embedding of size {self.latent_dim}, got {alpha.shape[-1]}")
        return np.asarray(self.decoder.forward(alpha), dtype=float)

    def _predictor_input(self, obs, act, alpha):
        obs = np.atleast_2d(obs)
        act = np.atleast_2d(act)
        parts = [self.obs_stats(obs), self.act_stats(act)]
        if self.latent_dim:
            alpha = np.asarray(alpha, dtype=float)
            parts.append(np.broadcast_to(alpha, (obs.shape[0], self.latent_dim)))
        return np.hstack(parts)

    def predict_next(self, obs, act, alpha=None):
        obs = np.asarray(obs, dtype=float)
        if obs.shape[-1] != self.obs_dim or np.shape(act)[-1] != self.act_dim:
            raise ValueError("observation or action width mismatch")
        if self.latent_dim and (alpha is None or np.shape(alpha)[-1] != self.latent_dim):
            raise ValueError(f"expected embedding of size {self.latent_dim}")
        delta = self.predictor.forward(self._predictor_input(obs, act, alpha))
        out = obs.reshape(-1, self.obs_dim) + self.delta_std * delta
        return out.reshape(obs.shape)

    def prediction_mse(self, obs, act, next_obs, alpha=None):
        """Mean over transitions of the squared prediction error norm (raw units)."""
        err = self.predict_next(obs, act, alpha) - next_obs
        return float(np.mean(np.sum(err ** 2, axis=-1)))

    def bounding_box(self, ranges_dim=None, n=10_000, rng=0, pad=0.1):
        theta = np.random.default_rng(rng).uniform(-1, 1, size=(n, ranges_dim or self.theta_dim))
        return EmbeddingBounds.from_samples(self.encode(theta), pad)

    # persistence

    def save(self, directory, extra=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_mlp(directory / "predictor.mlp", self.predictor)
        if self.latent_dim:
            save_mlp(directory / "encoder.mlp", self.encoder)
            save_mlp(directory / "decoder.mlp", self.decoder)
        meta = {
            "obs_dim": self.obs_dim, "act_dim": self.act_dim, "theta_dim": self.theta_dim,
            "latent_dim": self.latent_dim, "obs_stats": self.obs_stats.to_dict(),
            "act_stats": self.act_stats.to_dict(), "delta_std": self.delta_std.tolist(),
        }
        meta.update(extra or {})
        (directory / "dynamics_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "dynamics_meta.json").read_text())
        model = cls(meta["obs_dim"], meta["act_dim"], meta["theta_dim"], meta["latent_dim"],
                    Standardizer.from_dict(meta["obs_stats"]), Standardizer.from_dict(meta["act_stats"]),
                    meta["delta_std"], zero=True)
        model.predictor = load_mlp(directory / "predictor.mlp")
        if model.latent_dim:
            model.encoder = load_mlp(directory / "encoder.mlp")
            model.decoder = load_mlp(directory / "decoder.mlp")
        return model, meta


@dataclass
class DynamicsTrainConfig:
    latent_dim: int = 2
    recon_weight: float = 1.0  # lambda
    steps: int = 20_000
    batch_size: int = 256
    learning_rate: float = 3e-4
    schedule: str = "joint"  # or "alternating"
    seed: int = 0
    dtype: str = "float32"


@dataclass
class DynamicsTrainResult:
    model: DynamicsModel
    prediction_loss: np.ndarray
    reconstruction_loss: np.ndarray
    bounds: EmbeddingBounds = None
    config: DynamicsTrainConfig = field(default_factory=DynamicsTrainConfig)


def gradients(model, obs, act, next_obs, theta, recon_weight):
    """Losses and parameter gradients for one batch.

    Returns ``(pred_loss, recon_loss, g_predictor, g_encoder, g_decoder)``.
    The prediction loss is the mse in standardized-delta units; the
    reconstruction loss is the mse of ``D(E(theta))`` against ``theta``.
    """
    target = (next_obs - obs) / model.delta_std
    if model.latent_dim:
        alpha, enc_acts = model.encoder.forward_cache(theta)
    else:
        alpha, enc_acts = None, None
    x = model._predictor_input(obs, act, alpha)
    out, acts = model.predictor.forward_cache(x)
    diff = out - target
    pred_loss = float(np.mean(diff ** 2))
    g_out = 2.0 * diff / diff.size
    g_pred, g_x = model.predictor.backward(acts, g_out, want_input_grad=model.latent_dim > 0)
    if not model.latent_dim:
        return pred_loss, 0.0, g_pred, None, None
    g_alpha = g_x[:, -model.latent_dim:]
    recon, dec_acts = model.decoder.forward_cache(alpha)
    rdiff = recon - theta
    recon_loss = float(np.mean(rdiff ** 2))
    g_dec, g_alpha_rec = model.decoder.backward(dec_acts, 2.0 * rdiff / rdiff.size, want_input_grad=True)
    if recon_weight != 0.0:
        g_alpha = g_alpha + recon_weight * g_alpha_rec
    g_enc, _ = model.encoder.backward(enc_acts, g_alpha)
    return pred_loss, recon_loss, g_pred, g_enc, g_dec


def build_model(dataset, latent_dim, rng=None, dtype=np.float64):
    delta = dataset.next_obs - dataset.obs
    return DynamicsModel(dataset.obs_dim, dataset.act_dim, dataset.theta_dim, latent_dim,
                         Standardizer.fit(dataset.obs), Standardizer.fit(dataset.act),
                         np.maximum(delta.std(axis=0), STD_FLOOR), rng=rng, dtype=dtype)


def train_dynamics(dataset, config=None, callback=None):
    """Minibatch training of predictor, encoder and decoder on a labelled dataset."""
    config = config or DynamicsTrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if config.latent_dim and not dataset.has_theta:
        raise ValueError("dynamics training needs dynamics labels on every row")
    if config.schedule not in ("joint", "alternating"):
        raise ValueError(f"unknown schedule {config.schedule!r}")
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    model = build_model(dataset, config.latent_dim, rng, dtype)
    nets = [model.predictor] + ([model.encoder, model.decoder] if config.latent_dim else [])
    opts = [Adam(n.n_params, config.learning_rate, dtype=dtype) for n in nets]
    theta_all = np.nan_to_num(dataset.theta)
    pred_curve = np.empty(config.steps)
    recon_curve = np.empty(config.steps)
    n = len(dataset)
    for step in range(config.steps):
        rows = rng.integers(0, n, size=min(config.batch_size, n))
        pl, rl, gp, ge, gd = gradients(model, dataset.obs[rows], dataset.act[rows], dataset.next_obs[rows],
                                       theta_all[rows], config.recon_weight)
        if not (np.isfinite(pl) and np.isfinite(rl)):
            raise NonFiniteError(f"dynamics loss became non-finite at step {step}")
        pred_curve[step], recon_curve[step] = pl, rl
        if config.schedule == "joint" or step % 2 == 0 or not config.latent_dim:
            opts[0].step(model.predictor.params, gp)
        if config.latent_dim and (config.schedule == "joint" or step % 2 == 1):
            opts[1].step(model.encoder.params, ge)
            opts[2].step(model.decoder.params, gd)
        if callback is not None:
            callback(step, pl, rl)
    bounds = model.bounding_box(rng=rng.integers(2 ** 32)) if config.latent_dim else None
    return DynamicsTrainResult(model, pred_curve, recon_curve, bounds, config)


def smoothed(curve, window=100):
    curve = np.asarray(curve, dtype=float)
    if len(curve) < window:
        return curve.copy()
    c = np.cumsum(np.r_[0.0, curve])
    return (c[window:] - c[:-window]) / window


def per_theta_losses(model, dataset, alphas):
    """Prediction mse of each episode group under the embedding given for it.

    ``alphas`` maps group index -> embedding; groups are consecutive runs of
    identical theta rows.
    """
    theta = dataset.theta
    change = np.r_[True, np.any(theta[1:] != theta[:-1], axis=1)]
    group = np.cumsum(change) - 1
    out = []
    for g in range(group.max() + 1):
        m = group == g
        out.append(model.prediction_mse(dataset.obs[m], dataset.act[m], dataset.next_obs[m], alphas[g]))
    return np.array(out)
