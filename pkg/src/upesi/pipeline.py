"""Stage runner: collect, train-dynamics, train-policy, fit-embedding, evaluate, report.

Every stage reads its inputs from and writes its outputs under one run
directory and records itself in ``manifest.json`` with content hashes, so a
stage can only run once its prerequisites exist unchanged.
"""

import csv
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import theory
from .bo import BOConfig, GPConfig, embedding_objective, fit_embedding
from .config import METHOD_CONDITIONING, METHOD_VARIANT, METHODS, RunConfig
from .dynamics import DynamicsModel, DynamicsTrainConfig, EmbeddingBounds, smoothed, train_dynamics
from .envs import NoiseRanges, TransitionDataset, collect, get_spec, sample_dynamics
from .osi import OSIModel, train_osi
from .rl import TD3Config, act, evaluate, load_policy, train_policy

log = logging.getLogger(__name__)

STAGES = ("collect", "train-dynamics", "train-policy", "fit-embedding", "evaluate", "report")
PREREQUISITES = {
    "collect": (),
    "train-dynamics": ("collect",),
    "train-policy": ("train-dynamics",),
    "fit-embedding": ("collect", "train-dynamics"),
    "evaluate": ("collect", "train-dynamics", "train-policy", "fit-embedding"),
    "report": ("evaluate",),
}


class StageError(RuntimeError):
    """A stage cannot run or failed; the message says why."""


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class Run:
    """One run directory bound to one configuration."""

    def __init__(self, config, out):
        self.config = config
        self.out = Path(out)
        self.spec = get_spec(config.env_kind)
        self.manifest_path = self.out / "manifest.json"

    # manifest

    def manifest(self):
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"config_hash": self.config.hash(), "config": self.config.values, "stages": {}}

    def _save_manifest(self, m):
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(m, indent=1, sort_keys=True))

    def check_ready(self, stage):
        m = self.manifest()
        if m["config_hash"] != self.config.hash():
            raise StageError(f"{self.out} was created with a different configuration; use a fresh --out")
        for pre in PREREQUISITES[stage]:
            rec = m["stages"].get(pre)
            if rec is None or rec.get("status") != "complete":
                raise StageError(f"stage {stage!r} needs {pre!r} to be complete first")
            for rel, digest in rec["outputs"].items():
                p = self.out / rel
                if not p.exists() or file_hash(p) != digest:
                    raise StageError(f"output {rel} of stage {pre!r} is missing or modified")

    def run_stage(self, stage):
        if stage not in STAGES:
            raise StageError(f"unknown stage {stage!r}")
        self.check_ready(stage)
        m = self.manifest()
        m["stages"][stage] = {"status": "running", "outputs": {}}
        self._save_manifest(m)
        started = time.time()
        try:
            outputs = getattr(self, "stage_" + stage.replace("-", "_"))()
        except Exception:
            m["stages"][stage] = {"status": "failed", "outputs": {}}
            self._save_manifest(m)
            raise
        m["stages"][stage] = {
            "status": "complete",
            "outputs": {str(Path(p).relative_to(self.out)): file_hash(p) for p in sorted(map(str, outputs))},
        }
        m.setdefault("timestamps", {})[stage] = {"started": started, "finished": time.time()}
        self._save_manifest(m)
        return outputs

    def run_all(self):
        for stage in STAGES:
            self.run_stage(stage)

    # shared helpers

    @property
    def ranges(self):
        return self.spec.ranges

    def noise_ranges(self):
        c = self.config
        return NoiseRanges(tuple(c.get_list("noise.observation_std", float)),
                           tuple(c.get_list("noise.action_std", float)),
                           tuple(c.get_list("noise.delay_steps", int)))

    def td3_config(self):
        c = self.config
        return TD3Config(c["td3.gamma"], c["td3.tau"], int(c["td3.policy_delay"]), c["td3.target_noise"],
                         c["td3.target_noise_clip"], c["td3.exploration_noise"], int(c["td3.batch_size"]),
                         int(c["td3.buffer_capacity"]), c["td3.learning_rate"], int(c["td3.start_steps"]),
                         int(c["env.max_steps"]))

    def test_thetas(self):
        rows = _read_csv(self.out / "data" / "test_thetas.csv")
        names = self.ranges.names
        return np.array([[float(r[n]) for n in names] for r in rows])

    def load_model(self):
        return DynamicsModel.load(self.out / "models" / "dynamics")

    # stages

    def stage_collect(self):
        c, kind = self.config, self.config.env_kind
        data = self.out / "data"
        data.mkdir(parents=True, exist_ok=True)
        # behavior policy: DR-only, a fraction of the policy budget
        n_behavior = max(1, int(round(c["behavior.fraction"] * c["policy.episodes"])))
        behavior = train_policy("dr_only", kind, n_behavior, seed=c.stream("behavior").integers(2 ** 32),
                                noise_ranges=self.noise_ranges(), config=self.td3_config())
        bpath = self.out / "models" / "behavior.mlp"
        behavior.save(bpath, {"episodes": n_behavior})
        actor = behavior.agent.actor
        policy = lambda o: act(actor, o)  # noqa: E731
        mix, steps = c["data.random_mix"], int(c["env.max_steps"])
        rng = c.stream("collect/source")
        src = collect(kind, policy, sample_dynamics(self.ranges, rng, int(c["data.n_theta"])),
                      int(c["data.episodes_per_theta"]), steps, rng, random_mix=mix)
        src.save(data / "source.ds")
        rng = c.stream("collect/heldout")
        held = collect(kind, policy, sample_dynamics(self.ranges, rng, int(c["data.heldout_theta"])),
                       int(c["data.heldout_episodes"]), steps, rng, random_mix=mix)
        held.save(data / "heldout.ds")
        tt = sample_dynamics(self.ranges, c.stream("test_thetas"), int(c["eval.n_theta"]))
        _write_csv(data / "test_thetas.csv", ["index"] + list(self.ranges.names),
                   [[i] + list(t) for i, t in enumerate(tt)])
        outputs = [bpath, data / "source.ds", data / "heldout.ds", data / "test_thetas.csv"]
        for i, theta in enumerate(tt):
            rng = c.stream(f"collect/target/{i}")
            tgt = collect(kind, policy, theta[None, :], int(c["data.target_episodes"]), steps, rng,
                          random_mix=mix, record_theta=False)
            tgt.save(data / f"target_{i}.ds")
            outputs.append(data / f"target_{i}.ds")
        _write_csv(self.out / "curves" / "behavior.csv", ["episode", "reward", "length"],
                   zip(range(n_behavior), behavior.episode_rewards, behavior.episode_lengths))
        return outputs + [self.out / "curves" / "behavior.csv"]

    def stage_train_dynamics(self):
        c = self.config
        src = TransitionDataset.load(self.out / "data" / "source.ds")
        cfg = DynamicsTrainConfig(int(c["model.latent_dim"]), float(c["model.recon_weight"]), int(c["model.steps"]),
                                  int(c["model.batch_size"]), schedule=c["model.schedule"],
                                  seed=int(c.stream("train_dynamics").integers(2 ** 32)))
        res = train_dynamics(src, cfg)
        mdir = self.out / "models" / "dynamics"
        res.model.save(mdir, {"recon_weight": cfg.recon_weight, "schedule": cfg.schedule,
                              "bounds": res.bounds.to_dict()})
        curve = self.out / "curves" / "dynamics_loss.csv"
        _write_csv(curve, ["step", "prediction_loss", "reconstruction_loss"],
                   zip(range(cfg.steps), res.prediction_loss, res.reconstruction_loss))
        osi = train_osi(src, int(c["osi.steps"]), seed=int(c.stream("train_osi").integers(2 ** 32)))
        odir = self.out / "models" / "osi"
        osi.model.save(odir)
        ocurve = self.out / "curves" / "osi_loss.csv"
        _write_csv(ocurve, ["step", "loss"], zip(range(len(osi.loss)), osi.loss))
        held = TransitionDataset.load(self.out / "data" / "heldout.ds")
        true_l, shuf_l = informativeness(res.model, held, c.stream("informativeness"))
        info = self.out / "curves" / "informativeness.csv"
        _write_csv(info, ["theta_index", "true_loss", "shuffled_loss"], zip(range(len(true_l)), true_l, shuf_l))
        files = [p for p in sorted(mdir.iterdir())] + [p for p in sorted(odir.iterdir())]
        return files + [curve, ocurve, info]

    def policy_variants(self):
        return sorted({METHOD_VARIANT[m] for m in self.config.methods}, key=list(METHOD_VARIANT.values()).index)

    def stage_train_policy(self):
        c = self.config
        model, _ = self.load_model()
        outputs = []
        for variant in self.policy_variants():
            for seed in self.config.seeds:
                encoder = model.encode if variant == "up_embedding" else None
                res = train_policy(variant, c.env_kind, int(c["policy.episodes"]),
                                   seed=int(c.stream(f"policy/{variant}/{seed}").integers(2 ** 32)),
                                   encoder=encoder, noise_ranges=self.noise_ranges(), config=self.td3_config())
                p = self.out / "policies" / f"{variant}_seed{seed}.mlp"
                res.save(p, {"seed": seed})
                curve = self.out / "curves" / f"policy_{variant}_seed{seed}.csv"
                _write_csv(curve, ["episode", "reward", "length"],
                           zip(range(len(res.episode_rewards)), res.episode_rewards, res.episode_lengths))
                outputs += [p, curve]
        return outputs

    def stage_fit_embedding(self):
        c = self.config
        model, meta = self.load_model()
        bounds = EmbeddingBounds.from_dict(meta["bounds"])
        oracle = self.ranges.normalize(self.test_thetas())
        rows, outputs = [], []
        bo_cfg = BOConfig(int(c["bo.iterations"]), transform=c["bo.transform"], gp=GPConfig())
        for i in range(len(oracle)):
            tgt = TransitionDataset.load(self.out / "data" / f"target_{i}.ds", hide_theta=True)
            res = fit_embedding(model, tgt, bounds, int(c["bo.iterations"]),
                                seed=int(c.stream(f"bo/{i}").integers(2 ** 32)), config=bo_cfg)
            trace = self.out / "bo" / f"trace_{i}.csv"
            res.write_trace(trace)
            outputs.append(trace)
            # oracle scoring only: the true embedding's objective on the same subsample
            true_alpha = model.encode(oracle[i])
            true_obj = embedding_objective(model, tgt, true_alpha, res.rows)
            rows.append([i] + list(res.best_alpha) + [res.best_value] + list(true_alpha) + [true_obj,
                        res.best_value / true_obj])
        d = model.latent_dim
        fitted = self.out / "bo" / "fitted.csv"
        _write_csv(fitted, ["index"] + [f"alpha{j}" for j in range(d)] + ["objective"]
                   + [f"true_alpha{j}" for j in range(d)] + ["true_objective", "ratio"], rows)
        return outputs + [fitted]

    def evaluation_noises(self):
        rng = self.config.stream("eval/noise")
        nr = self.noise_ranges()
        return [nr.sample(rng) for _ in range(int(self.config["eval.n_theta"]))]

    def stage_evaluate(self):
        c = self.config
        model, _ = self.load_model()
        osi = OSIModel.load(self.out / "models" / "osi")
        thetas = self.test_thetas()
        tnorm = self.ranges.normalize(thetas)
        fitted = _read_csv(self.out / "bo" / "fitted.csv")
        bo_alpha = np.array([[float(r[f"alpha{j}"]) for j in range(model.latent_dim)] for r in fitted])
        conditioning = {"none": None, "true_theta": tnorm, "true_embedding": model.encode(tnorm),
                        "bo_embedding": bo_alpha, "osi_prediction": None}
        noises = self.evaluation_noises()
        rows, summary = [], []
        for method in self.config.methods:
            variant, source = METHOD_VARIANT[method], METHOD_CONDITIONING[method]
            all_r = []
            for seed in self.config.seeds:
                actor, _ = load_policy(self.out / "policies" / f"{variant}_seed{seed}.mlp")
                res = evaluate(actor, c.env_kind, thetas, int(c["eval.episodes"]), source,
                               conditioning[source], osi if source == "osi_prediction" else None, noises,
                               seed=int(c.stream(f"eval/{method}/{seed}").integers(2 ** 32)),
                               max_steps=int(c["env.max_steps"]))
                for ti in range(res.rewards.shape[0]):
                    for e in range(res.rewards.shape[1]):
                        rows.append([method, seed, ti, e, float(res.rewards[ti, e])])
                all_r.append(res.rewards.ravel())
            all_r = np.concatenate(all_r)
            summary.append([method, float(all_r.mean()), float(all_r.std()), len(all_r)])
        raw = self.out / "results" / "episode_rewards.csv"
        _write_csv(raw, ["method", "seed", "theta_index", "episode", "reward"], rows)
        table = self.out / "results" / "summary.csv"
        _write_csv(table, ["method", "mean", "std", "episodes"], summary)
        return [raw, table]

    def stage_report(self):
        rep = self.out / "report"
        rep.mkdir(parents=True, exist_ok=True)
        summary = {r["method"]: r for r in _read_csv(self.out / "results" / "summary.csv")}
        order = [m for m in METHODS if m in self.config.methods]
        table = rep / "table.csv"
        _write_csv(table, ["method", "mean", "std", "episodes"],
                   [[m, float(summary[m]["mean"]), float(summary[m]["std"]), summary[m]["episodes"]] for m in order])
        lines = [f"{'method':<22}{'mean':>12}{'std':>12}"]
        for m in order:
            lines.append(f"{m:<22}{float(summary[m]['mean']):>12.2f}{float(summary[m]['std']):>12.2f}")
        (rep / "table.txt").write_text("\n".join(lines) + "\n")
        episodes = rep / "episode_rewards.csv"
        episodes.write_bytes((self.out / "results" / "episode_rewards.csv").read_bytes())
        curves = rep / "learning_curves.csv"
        rows = []
        for p in sorted((self.out / "curves").glob("policy_*.csv")):
            name = p.stem[len("policy_"):]
            variant, seed = name.rsplit("_seed", 1)
            for r in _read_csv(p):
                rows.append([variant, int(seed), r["episode"], r["reward"], r["length"]])
        _write_csv(curves, ["variant", "seed", "episode", "reward", "length"], rows)
        traces = rep / "bo_traces.csv"
        rows, header = [], None
        for p in sorted((self.out / "bo").glob("trace_*.csv"), key=lambda q: int(q.stem.split("_")[1])):
            recs = _read_csv(p)
            if header is None:
                header = ["theta_index"] + list(recs[0].keys())
            rows += [[int(p.stem.split("_")[1])] + list(r.values()) for r in recs]
        _write_csv(traces, header or ["theta_index"], rows)
        ident = rep / "identifiability.csv"
        ident.write_bytes((self.out / "bo" / "fitted.csv").read_bytes())
        return [table, rep / "table.txt", episodes, curves, traces, ident]


def informativeness(model, heldout, rng):
    """Per held-out theta: prediction loss at the true embedding and at a shuffled one.

    Labels are shuffled by a random derangement of the distinct theta rows.
    Returns ``(true_losses, shuffled_losses)``.
    """
    theta = heldout.theta
    change = np.r_[True, np.any(theta[1:] != theta[:-1], axis=1)]
    group = np.cumsum(change) - 1
    uniq = theta[change]
    k = len(uniq)
    rng = np.random.default_rng(rng)
    while True:
        perm = rng.permutation(k)
        if k < 2 or np.all(perm != np.arange(k)):
            break
    alpha = model.encode(uniq)
    true_l, shuf_l = [], []
    for g in range(k):
        m = group == g
        o, a, o2 = heldout.obs[m], heldout.act[m], heldout.next_obs[m]
        true_l.append(model.prediction_mse(o, a, o2, alpha[g]))
        shuf_l.append(model.prediction_mse(o, a, o2, alpha[perm[g]]))
    return np.array(true_l), np.array(shuf_l)


def run_theory(out=None, n_instances=100, seed=0):
    """Run the tabular theory suite; optionally write the table as CSV."""
    t0 = time.time()
    rows = theory.run_suite(n_instances, seed)
    elapsed = time.time() - t0
    if out is not None:
        _write_csv(Path(out) / "theory.csv", ["statement", "instances", "value", "measure", "passed"],
                   [[s, n, float(v), meas, bool(ok)] for s, n, v, meas, ok in rows])
    return rows, elapsed


__all__ = ["Run", "StageError", "STAGES", "PREREQUISITES", "RunConfig", "informativeness", "run_theory",
           "smoothed"]
