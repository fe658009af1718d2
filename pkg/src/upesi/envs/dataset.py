"""Transition datasets, their binary file format and batched collection."""

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np

from .core import ZERO_NOISE, VecEnv, get_spec
from .params import RandomizationRanges

DATASET_MAGIC = b"UPESIDS1"


@dataclass
class TransitionDataset:
    """Rows of ``(o, a, o', r, done, theta_normalized)`` grouped into episodes.

    ``theta`` is NaN for target-domain data, whose true dynamics must stay
    hidden from identification.
    """

    env_kind: str
    obs: np.ndarray
    act: np.ndarray
    next_obs: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    theta: np.ndarray
    episode_starts: np.ndarray
    ranges: RandomizationRanges

    def __post_init__(self):
        n = len(self.obs)
        for name in ("act", "next_obs", "reward", "done", "theta"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        if self.next_obs.shape != self.obs.shape:
            raise ValueError("obs and next_obs shapes differ")
        self.episode_starts = np.asarray(self.episode_starts, dtype=np.int64)
        if n and (len(self.episode_starts) == 0 or self.episode_starts[0] != 0):
            raise ValueError("episode_starts must begin at row 0")

    def __len__(self):
        return len(self.obs)

    @property
    def obs_dim(self):
        return self.obs.shape[1]

    @property
    def act_dim(self):
        return self.act.shape[1]

    @property
    def theta_dim(self):
        return self.theta.shape[1]

    @property
    def n_episodes(self):
        return len(self.episode_starts)

    @property
    def has_theta(self):
        return len(self) > 0 and not np.any(np.isnan(self.theta))

    def episode_slices(self):
        ends = np.append(self.episode_starts[1:], len(self))
        return [slice(int(s), int(e)) for s, e in zip(self.episode_starts, ends)]

    def episode_index(self):
        """Episode number of every row."""
        idx = np.zeros(len(self), dtype=np.int64)
        idx[self.episode_starts[1:]] = 1
        return np.cumsum(idx)

    def without_theta(self):
        return self.subset_rows(np.arange(len(self)), hide_theta=True)

    def subset_rows(self, rows, hide_theta=False):
        rows = np.asarray(rows)
        ep = self.episode_index()[rows]
        starts = np.flatnonzero(np.r_[True, ep[1:] != ep[:-1]]) if len(rows) else np.zeros(0)
        theta = np.full_like(self.theta[rows], np.nan) if hide_theta else self.theta[rows]
        return TransitionDataset(self.env_kind, self.obs[rows], self.act[rows], self.next_obs[rows],
                                 self.reward[rows], self.done[rows], theta, starts, self.ranges)

    def episodes(self, which):
        """Dataset made of the given episode numbers, in that order."""
        sl = self.episode_slices()
        rows = np.concatenate([np.arange(sl[i].start, sl[i].stop) for i in which]) if len(which) else np.zeros(0, int)
        return self.subset_rows(rows)

    @staticmethod
    def concatenate(parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        offsets = np.cumsum([0] + [len(p) for p in parts[:-1]])
        first = parts[0]
        return TransitionDataset(
            first.env_kind,
            np.concatenate([p.obs for p in parts]), np.concatenate([p.act for p in parts]),
            np.concatenate([p.next_obs for p in parts]), np.concatenate([p.reward for p in parts]),
            np.concatenate([p.done for p in parts]), np.concatenate([p.theta for p in parts]),
            np.concatenate([p.episode_starts + off for p, off in zip(parts, offsets)]),
            first.ranges)

    def rows_matrix(self):
        return np.hstack([self.obs, self.act, self.next_obs, self.reward[:, None],
                          self.done[:, None].astype(float), self.theta])

    def header(self):
        return {
            "env_kind": self.env_kind, "obs_dim": self.obs_dim, "act_dim": self.act_dim,
            "theta_dim": self.theta_dim, "ranges": self.ranges.to_dict(), "n_rows": len(self),
            "episode_starts": [int(s) for s in self.episode_starts],
        }

    def save(self, path):
        blob = json.dumps(self.header(), sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(DATASET_MAGIC)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            f.write(np.ascontiguousarray(self.rows_matrix(), dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, hide_theta=False):
        with open(path, "rb") as f:
            if f.read(len(DATASET_MAGIC)) != DATASET_MAGIC:
                raise ValueError(f"{path} is not a transition dataset")
            (n,) = struct.unpack("<Q", f.read(8))
            h = json.loads(f.read(n))
            data = np.frombuffer(f.read(), dtype="<f8")
        od, ad, td = h["obs_dim"], h["act_dim"], h["theta_dim"]
        width = 2 * od + ad + 2 + td
        data = data.reshape(h["n_rows"], width)
        c = np.cumsum([0, od, ad, od, 1, 1, td])
        theta = data[:, c[5]:c[6]].copy()
        if hide_theta:
            theta[:] = np.nan
        return cls(h["env_kind"], data[:, c[0]:c[1]].copy(), data[:, c[1]:c[2]].copy(),
                   data[:, c[2]:c[3]].copy(), data[:, c[3]].copy(), data[:, c[4]] > 0.5,
                   theta, np.asarray(h["episode_starts"], dtype=np.int64),
                   RandomizationRanges.from_dict(h["ranges"]))

    def to_csv(self, path):
        cols = (["episode"] + [f"o{i}" for i in range(self.obs_dim)] + [f"a{i}" for i in range(self.act_dim)]
                + [f"next_o{i}" for i in range(self.obs_dim)] + ["r", "done"]
                + [f"theta{i}" for i in range(self.theta_dim)])
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for ep, row in zip(self.episode_index(), self.rows_matrix()):
                w.writerow([int(ep)] + [repr(float(v)) for v in row])


def collect(kind, policy, thetas, episodes_per_theta, max_steps, rng, ranges=None,
            random_mix=0.0, noise=ZERO_NOISE, batch=512, record_theta=True):
    """Roll out ``policy`` (batched obs -> actions) and record transitions.

    Every row of ``thetas`` gets ``episodes_per_theta`` episodes.  With
    ``random_mix`` > 0 each action is replaced by a uniform random one with
    that probability.  Episodes are stored in (theta, episode) order.
    """
    spec = get_spec(kind)
    ranges = spec.ranges if ranges is None else ranges
    rng = np.random.default_rng(rng)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    jobs = np.repeat(np.arange(len(thetas)), episodes_per_theta)
    parts = []
    for lo in range(0, len(jobs), batch):
        idx = jobs[lo:lo + batch]
        env = VecEnv(kind, thetas[idx], noise, seed=rng.integers(2 ** 63), max_steps=max_steps)
        obs = env.reset().observation
        steps = []
        while not np.all(env.done):
            active = ~env.done
            act = np.asarray(policy(obs), dtype=float).reshape(len(idx), spec.act_dim)
            if random_mix > 0:
                swap = rng.random(len(idx)) < random_mix
                act = np.where(swap[:, None], rng.uniform(-1, 1, act.shape), act)
            res = env.step(act)
            steps.append((active, obs, act, res.observation, res.reward, res.terminated))
            obs = res.observation
        norm = ranges.normalize(thetas[idx]) if record_theta else np.full((len(idx), ranges.dim), np.nan)
        active, o, a, o2, r, term = (np.stack(col) for col in zip(*steps))
        for k in range(len(idx)):
            m = active[:, k]
            parts.append(TransitionDataset(
                kind, o[m, k], a[m, k], o2[m, k], r[m, k], term[m, k].astype(bool),
                np.repeat(norm[k][None, :], int(m.sum()), axis=0), np.array([0]), ranges))
    return TransitionDataset.concatenate(parts)
