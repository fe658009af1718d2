"""Explicit system identification: regress normalized theta from recent transitions."""

from dataclasses import dataclass
from pathlib import Path
import json

import numpy as np

from .dynamics import Standardizer
from .nn import MLP, Adam, NonFiniteError, load_mlp, save_mlp

STACK_LENGTH = 5
HIDDEN = 128


class TransitionStack:
    """Per-episode ring of the last ``length`` (o, a) pairs plus the current observation.

    Holds ``n`` independent stacks so batched evaluation can share one object.
    """

    def __init__(self, n, obs_dim, act_dim, length=STACK_LENGTH):
        self.n, self.obs_dim, self.act_dim, self.length = n, obs_dim, act_dim, length
        self.pairs = np.zeros((n, length, obs_dim + act_dim))
        self.current = np.zeros((n, obs_dim))
        self.count = np.zeros(n, dtype=np.int64)

    def reset(self, obs):
        self.pairs[:] = 0.0
        self.current[:] = np.reshape(obs, (self.n, self.obs_dim))
        self.count[:] = 0

    def push(self, action, next_obs):
        action = np.reshape(action, (self.n, self.act_dim))
        self.pairs[:, :-1] = self.pairs[:, 1:]
        self.pairs[:, -1] = np.hstack([self.current, action])
        self.current[:] = np.reshape(next_obs, (self.n, self.obs_dim))
        self.count += 1

    @property
    def warm(self):
        return self.count >= self.length

    def features(self):
        return np.hstack([self.pairs.reshape(self.n, -1), self.current])


def stacks_from_dataset(dataset, length=STACK_LENGTH):
    """Feature rows and normalized-theta targets for every full in-episode window."""
    feats, targets = [], []
    for sl in dataset.episode_slices():
        n = sl.stop - sl.start
        if n < length:
            continue
        o, a, o2 = dataset.obs[sl], dataset.act[sl], dataset.next_obs[sl]
        pairs = np.hstack([o, a])
        win = np.lib.stride_tricks.sliding_window_view(pairs, (length, pairs.shape[1]))[:, 0]
        feats.append(np.hstack([win.reshape(len(win), -1), o2[length - 1:]]))
        targets.append(dataset.theta[sl][length - 1:])
    if not feats:
        raise ValueError(f"no episode has at least {length} transitions")
    return np.concatenate(feats), np.concatenate(targets)


class OSIModel:
    def __init__(self, obs_dim, act_dim, theta_dim, stats=None, rng=None, length=STACK_LENGTH,
                 dtype=np.float32):
        self.obs_dim, self.act_dim, self.theta_dim, self.length = obs_dim, act_dim, theta_dim, length
        n_in = length * (obs_dim + act_dim) + obs_dim
        self.net = MLP([n_in, HIDDEN, HIDDEN, HIDDEN, theta_dim], "relu", rng=rng, dtype=dtype)
        self.stats = stats or Standardizer(np.zeros(n_in), np.ones(n_in))

    def predict_features(self, feats):
        out = self.net.forward(self.stats(np.atleast_2d(feats)))
        return np.clip(np.asarray(out, dtype=float), -1.0, 1.0)

    def predict(self, stack):
        """Clipped estimate per stack; the zero vector (range midpoint) until warm."""
        out = self.predict_features(stack.features())
        out[~stack.warm] = 0.0
        return out

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_mlp(directory / "osi.mlp", self.net, {"length": self.length})
        meta = {"obs_dim": self.obs_dim, "act_dim": self.act_dim, "theta_dim": self.theta_dim,
                "length": self.length, "stats": self.stats.to_dict()}
        (directory / "osi_meta.json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "osi_meta.json").read_text())
        model = cls(meta["obs_dim"], meta["act_dim"], meta["theta_dim"],
                    Standardizer.from_dict(meta["stats"]), length=meta["length"])
        model.net = load_mlp(directory / "osi.mlp")
        return model


def predict_theta(osi, stack):
    return osi.predict(stack)


@dataclass
class OSITrainResult:
    model: OSIModel
    loss: np.ndarray


def train_osi(dataset, steps=20_000, batch_size=256, learning_rate=3e-4, seed=0):
    if not dataset.has_theta:
        raise ValueError("OSI training needs dynamics labels")
    feats, targets = stacks_from_dataset(dataset)
    rng = np.random.default_rng(seed)
    model = OSIModel(dataset.obs_dim, dataset.act_dim, dataset.theta_dim, Standardizer.fit(feats), rng)
    x_all = model.stats(feats).astype(model.net.dtype)
    targets = targets.astype(model.net.dtype)
    opt = Adam(model.net.n_params, learning_rate, dtype=model.net.dtype)
    curve = np.empty(steps)
    for step in range(steps):
        rows = rng.integers(0, len(x_all), size=min(batch_size, len(x_all)))
        out, acts = model.net.forward_cache(x_all[rows])
        diff = out - targets[rows]
        loss = float(np.mean(diff ** 2))
        if not np.isfinite(loss):
            raise NonFiniteError(f"OSI loss non-finite at step {step}")
        g, _ = model.net.backward(acts, 2.0 * diff / diff.size)
        opt.step(model.net.params, g)
        curve[step] = loss
    return OSITrainResult(model, curve)
