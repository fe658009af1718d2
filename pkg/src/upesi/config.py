"""Run configuration: flat ``section.key = value`` text, two budget profiles, seeded sub-streams."""

import hashlib
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

METHODS = ("no_dr", "dr_only", "dr_up_true", "dr_up_si", "dr_up_encoding_bo", "dr_up_encoding_true")
# policy variant trained for each comparison method
METHOD_VARIANT = {
    "no_dr": "no_dr",
    "dr_only": "dr_only",
    "dr_up_true": "up_true_theta",
    "dr_up_si": "up_true_theta",
    "dr_up_encoding_bo": "up_embedding",
    "dr_up_encoding_true": "up_embedding",
}
METHOD_CONDITIONING = {
    "no_dr": "none",
    "dr_only": "none",
    "dr_up_true": "true_theta",
    "dr_up_si": "osi_prediction",
    "dr_up_encoding_bo": "bo_embedding",
    "dr_up_encoding_true": "true_embedding",
}

FULL = {
    "pendulum": {
        "env.max_steps": 1000,
        "data.n_theta": 10000,
        "data.episodes_per_theta": 1,
        "data.target_episodes": 1000,
        "data.heldout_theta": 20,
        "data.heldout_episodes": 20,
        "data.random_mix": 0.3,
        "behavior.fraction": 0.2,
        "model.latent_dim": 2,
        "model.recon_weight": 1.0,
        "model.schedule": "joint",
        "model.steps": 20000,
        "model.batch_size": 256,
        "osi.steps": 20000,
        "policy.episodes": 2000,
        "bo.iterations": 500,
        "bo.transform": "log",
        "eval.n_theta": 10,
        "eval.episodes": 10,
        "run.n_seeds": 3,
    },
    "chain": {
        "env.max_steps": 1000,
        "data.n_theta": 2000,
        "data.episodes_per_theta": 1,
        "data.target_episodes": 100,
        "data.heldout_theta": 20,
        "data.heldout_episodes": 5,
        "data.random_mix": 0.3,
        "behavior.fraction": 0.2,
        "model.latent_dim": 4,
        "model.recon_weight": 1.0,
        "model.schedule": "joint",
        "model.steps": 20000,
        "model.batch_size": 256,
        "osi.steps": 20000,
        "policy.episodes": 25000,
        "bo.iterations": 500,
        "bo.transform": "log",
        "eval.n_theta": 10,
        "eval.episodes": 10,
        "run.n_seeds": 3,
    },
}
TD3_DEFAULTS = {
    "td3.gamma": 0.99,
    "td3.tau": 0.005,
    "td3.policy_delay": 2,
    "td3.target_noise": 0.2,
    "td3.target_noise_clip": 0.5,
    "td3.exploration_noise": 0.1,
    "td3.batch_size": 256,
    "td3.buffer_capacity": 1000000,
    "td3.learning_rate": 3e-4,
    "td3.start_steps": 1000,
}
COMMON = {
    "noise.observation_std": "0.0,0.05",
    "noise.action_std": "0.0,0.05",
    "noise.delay_steps": "0,1,2",
    "run.methods": ",".join(METHODS),
    "run.seed": 0,
}
# ci profile: episode, theta and step budgets x0.1; BO at 100 iterations on 100 target episodes
CI_SCALED = ("env.max_steps", "data.n_theta", "data.target_episodes", "policy.episodes")
CI_FIXED = {
    "pendulum": {"bo.iterations": 100, "run.n_seeds": 1, "td3.start_steps": 500},
    "chain": {"bo.iterations": 100, "run.n_seeds": 1, "td3.start_steps": 500},
}
PROFILES = ("full", "ci")


def _parse_value(text):
    text = text.strip()
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_config_text(text):
    """``key = value`` lines; ``#`` starts a comment; ``[section]`` headers prefix later keys."""
    out, section = {}, ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if section and "." not in key:
            key = f"{section}.{key}"
        out[key] = _parse_value(value)
    return out


def profile_values(env_kind, profile):
    if env_kind not in FULL:
        raise ValueError(f"unknown environment kind {env_kind!r}")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    values = {"env.kind": env_kind, "run.profile": profile}
    values.update(COMMON)
    values.update(TD3_DEFAULTS)
    values.update(FULL[env_kind])
    if profile == "ci":
        for k in CI_SCALED:
            values[k] = max(1, int(round(values[k] * 0.1)))
        values.update(CI_FIXED[env_kind])
    return values


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def build(cls, env_kind="pendulum", profile="ci", overrides=None, seed=None):
        overrides = dict(overrides or {})
        env_kind = overrides.pop("env.kind", env_kind)
        profile = overrides.pop("run.profile", profile)
        values = profile_values(env_kind, profile)
        unknown = set(overrides) - set(values)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values.update(overrides)
        if seed is not None:
            values["run.seed"] = int(seed)
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, profile=None, seed=None):
        vals = parse_config_text(open(path).read())
        env_kind = vals.pop("env.kind", "pendulum")
        file_profile = vals.pop("run.profile", "ci")
        # the command line wins over the file
        return cls.build(env_kind, profile or file_profile, vals, seed)

    def __getitem__(self, key):
        return self.values[key]

    def get_list(self, key, conv=str):
        v = self.values[key]
        if isinstance(v, (int, float)):
            return [conv(v)]
        return [conv(s.strip()) for s in str(v).split(",") if s.strip()]

    @property
    def env_kind(self):
        return self.values["env.kind"]

    @property
    def methods(self):
        return self.get_list("run.methods")

    @property
    def seeds(self):
        return list(range(int(self.values["run.n_seeds"])))

    def validate(self):
        for k, v in self.values.items():
            if isinstance(v, (int, float)) and k.split(".")[0] in ("data", "policy", "bo", "eval", "model", "osi") \
                    and k not in ("model.recon_weight", "data.random_mix") and v <= 0:
                raise ValueError(f"budget {k} must be positive, got {v}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if not 0.0 <= float(self.values["data.random_mix"]) <= 1.0:
            raise ValueError("data.random_mix must lie in [0, 1]")

    def to_text(self):
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))

    def hash(self):
        return hashlib.sha256(json.dumps(self.values, sort_keys=True).encode()).hexdigest()

    def stream(self, name):
        """Independent generator for the named sub-stream of the root seed."""
        return np.random.default_rng(np.random.SeedSequence([int(self.values["run.seed"]),
                                                              zlib.crc32(name.encode())]))
