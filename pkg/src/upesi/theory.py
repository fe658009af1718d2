"""Exact occupancy measures and KL identities on finite randomized-dynamics MDPs.

All tensors index as ``[s, a, theta, s']``.  KL divergences between
conditionals are always averaged under the source-domain occupancy of the
conditioning variables; cells whose conditioning marginal is zero are left
out.
"""

from dataclasses import dataclass

import numpy as np

PROB_TOL = 1e-12


def _check_stochastic(name, arr, axis):
    if np.any(arr < 0):
        raise ValueError(f"{name} has negative entries")
    sums = arr.sum(axis=axis)
    if np.max(np.abs(sums - 1.0)) > PROB_TOL:
        raise ValueError(f"{name} does not sum to 1 along axis {axis} (max error {np.max(np.abs(sums - 1)):.2e})")


@dataclass
class TabularRDMDP:
    """Finite MDP whose transitions depend on a per-episode dynamics index.

    ``T[s, a, k, s']`` transition probabilities, ``policy[s, k, a]`` action
    probabilities, ``prior[k]`` over dynamics, ``init[s]`` initial state.
    """

    T: np.ndarray
    policy: np.ndarray
    prior: np.ndarray
    init: np.ndarray
    horizon: int = 5
    discount: float = 1.0

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=float)
        self.policy = np.asarray(self.policy, dtype=float)
        self.prior = np.asarray(self.prior, dtype=float)
        self.init = np.asarray(self.init, dtype=float)
        S, A, K, S2 = self.T.shape
        if S2 != S or self.policy.shape != (S, K, A) or self.prior.shape != (K,) or self.init.shape != (S,):
            raise ValueError("inconsistent tensor shapes")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        _check_stochastic("T", self.T, -1)
        _check_stochastic("policy", self.policy, -1)
        _check_stochastic("prior", self.prior, -1)
        _check_stochastic("init", self.init, -1)

    @property
    def shape(self):
        S, A, K, _ = self.T.shape
        return S, A, K


def random_mdp(rng, n_states=4, n_actions=3, n_dynamics=3, horizon=5, theta_dependent=True,
               policy_theta_dependent=True):
    rng = np.random.default_rng(rng)
    S, A, K = n_states, n_actions, n_dynamics
    if theta_dependent:
        T = rng.dirichlet(np.ones(S), size=(S, A, K))
    else:
        T = np.repeat(rng.dirichlet(np.ones(S), size=(S, A))[:, :, None, :], K, axis=2)
    if policy_theta_dependent:
        policy = rng.dirichlet(np.ones(A), size=(S, K))
    else:
        policy = np.repeat(rng.dirichlet(np.ones(A), size=S)[:, None, :], K, axis=1)
    return TabularRDMDP(T, policy, rng.dirichlet(np.ones(K)), rng.dirichlet(np.ones(S)), horizon)


@dataclass
class OccupancyMeasures:
    joint: np.ndarray  # rho(s, a, theta, s')

    @property
    def sat(self):
        # rho(s, a, theta)
        return self.joint.sum(axis=3)

    @property
    def sas(self):
        # rho(s, a, s')
        return self.joint.sum(axis=2)

    @property
    def ss(self):
        # rho(s, s')
        return self.joint.sum(axis=(1, 2))

    @classmethod
    def from_joint(cls, joint):
        joint = np.asarray(joint, dtype=float)
        if np.any(joint < 0) or abs(joint.sum() - 1.0) > 1e-10:
            raise ValueError("joint occupancy must be a probability tensor")
        return cls(joint)


def state_dynamics_occupancy(mdp, horizon=None):
    """Normalized finite-horizon visitation rho(s, theta) by forward recursion."""
    H = mdp.horizon if horizon is None else int(horizon)
    if H < 1:
        raise ValueError("horizon must be at least 1")
    d = mdp.init[:, None] * mdp.prior[None, :]
    total = np.zeros_like(d)
    weight_sum = 0.0
    for t in range(H):
        w = mdp.discount ** t
        total += w * d
        weight_sum += w
        # d'(s', k) = sum_{s, a} d(s, k) pi(a | s, k) T(s' | s, a, k)
        d = np.einsum("sk,ska,sakt->tk", d, mdp.policy, mdp.T)
    return total / weight_sum


def compute_occupancies(mdp, horizon=None):
    rho_sk = state_dynamics_occupancy(mdp, horizon)
    sat = rho_sk[:, None, :] * np.transpose(mdp.policy, (0, 2, 1))
    return OccupancyMeasures(sat[..., None] * mdp.T)


@dataclass
class EstimatedDynamics:
    """p(theta | s, a, s') stored as ``[s, a, theta, s']``; ``defined[s, a, s']``."""

    posterior: np.ndarray
    defined: np.ndarray


def estimated_dynamics(occ):
    sas = occ.sas
    defined = sas > 0
    safe = np.where(defined, sas, 1.0)
    post = occ.joint / safe[:, :, None, :]
    post = np.where(defined[:, :, None, :], post, np.nan)
    return EstimatedDynamics(post, defined)


def forward_model(occ):
    """f(s' | s, a, theta) = rho(s, a, theta, s') / rho(s, a, theta); NaN where undefined."""
    sat = occ.sat
    defined = sat > 0
    safe = np.where(defined, sat, 1.0)
    f = occ.joint / safe[..., None]
    return np.where(defined[..., None], f, np.nan), defined


def kl_tabular(p, q):
    """sum p log(p / q) with 0 log(0 / q) = 0; rejects q = 0 where p > 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    bad = (p > 0) & (q <= 0)
    if np.any(bad):
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"absolute continuity violated at index {loc}")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def averaged_conditional_kl(weights, p_joint, q_joint, axis):
    """E_{weights}[ KL(p(. | c) || q(. | c)) ] where the conditioned variable is ``axis``.

    ``weights`` is the source marginal over the conditioning variables (the
    joint summed over ``axis``); cells with zero weight are skipped.
    """
    p_marg = p_joint.sum(axis=axis, keepdims=True)
    q_marg = q_joint.sum(axis=axis, keepdims=True)
    w = np.squeeze(p_marg, axis=axis)
    if weights is not None and not np.allclose(weights, w, atol=1e-12):
        raise ValueError("weights must equal the source conditioning marginal")
    keep = np.broadcast_to(p_marg > 0, p_joint.shape)
    p_cond = np.where(keep, p_joint / np.where(p_marg > 0, p_marg, 1.0), 0.0)
    q_cond = np.where(keep, q_joint / np.where(q_marg > 0, q_marg, 1.0), 0.0)
    bad = (p_cond > 0) & (q_cond <= 0)
    if np.any(bad):
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"absolute continuity violated at index {loc}")
    m = p_cond > 0
    terms = np.zeros_like(p_joint)
    terms[m] = p_cond[m] * np.log(p_cond[m] / q_cond[m])
    per_cell = terms.sum(axis=axis)
    return float(np.sum(w * per_cell))


def _occ(x, horizon):
    if isinstance(x, OccupancyMeasures):
        return x
    return compute_occupancies(x, horizon)


def chain_rule_gap(source, target, axis=3, horizon=None):
    """|KL[joint] - KL[marginal] - E KL[conditional]| for the variable at ``axis``."""
    ps, pt = _occ(source, horizon).joint, _occ(target, horizon).joint
    lhs = kl_tabular(ps, pt)
    rhs = kl_tabular(ps.sum(axis=axis), pt.sum(axis=axis)) + averaged_conditional_kl(None, ps, pt, axis)
    return abs(lhs - rhs)


def _premise_gap(os_, ot):
    return float(np.max(np.abs(os_.sas - ot.sas)))


def verify_lemma2(source, target, horizon=None, premise_tol=1e-9):
    """E_{rho^s(s,a,s')} KL[p^s(theta|s,a,s') || p^t] against KL of the joints."""
    os_, ot = _occ(source, horizon), _occ(target, horizon)
    gap = _premise_gap(os_, ot)
    if gap > premise_tol:
        raise ValueError(f"source and target (s, a, s') marginals differ by {gap:.2e}")
    lhs = averaged_conditional_kl(None, os_.joint, ot.joint, axis=2)
    rhs = kl_tabular(os_.joint, ot.joint)
    return lhs, rhs, abs(lhs - rhs)


def verify_lemma4(source, target, horizon=None):
    """E_{rho^s(s,a,theta)} KL[f^s || f^t] against KL[joint] - KL[rho(s,a,theta)]."""
    os_, ot = _occ(source, horizon), _occ(target, horizon)
    lhs = averaged_conditional_kl(None, os_.joint, ot.joint, axis=3)
    rhs = kl_tabular(os_.joint, ot.joint) - kl_tabular(os_.sat, ot.sat)
    return lhs, rhs, abs(lhs - rhs)


def verify_theorem5(source, target, horizon=None, premise_tol=1e-9, slack=1e-12):
    """Averaged estimated-dynamics KL bounds the averaged forward-model KL from above.

    Returns ``(estimated_side, forward_side, margin)`` and raises if the
    inequality fails by more than ``slack``.
    """
    os_, ot = _occ(source, horizon), _occ(target, horizon)
    gap = _premise_gap(os_, ot)
    if gap > premise_tol:
        raise ValueError(f"source and target (s, a, s') marginals differ by {gap:.2e}")
    est = averaged_conditional_kl(None, os_.joint, ot.joint, axis=2)
    fwd = averaged_conditional_kl(None, os_.joint, ot.joint, axis=3)
    margin = est - fwd
    if margin < -slack:
        raise AssertionError(f"inequality violated: {est} < {fwd}")
    return est, fwd, margin


def equal_marginal_pair(rng, n_states=4, n_actions=3, n_dynamics=3):
    """Two joints sharing rho(s, a, s') but with different posteriors over theta."""
    rng = np.random.default_rng(rng)
    S, A, K = n_states, n_actions, n_dynamics
    m = rng.dirichlet(np.ones(S * A * S)).reshape(S, A, S)
    cs = rng.dirichlet(np.ones(K), size=(S, A, S))
    ct = rng.dirichlet(np.ones(K), size=(S, A, S))
    js = m[:, :, None, :] * np.moveaxis(cs, -1, 2)
    jt = m[:, :, None, :] * np.moveaxis(ct, -1, 2)
    return OccupancyMeasures(js / js.sum()), OccupancyMeasures(jt / jt.sum())


def shared_marginals_pair(rng, n_states=4, n_actions=3, n_dynamics=3, strength=0.5):
    """Two joints that agree on both rho(s, a, s') and rho(s, a, theta).

    Per (s, a) cell the target's (theta, s') table is the source's plus a
    rank-one pattern with zero row and column sums.
    """
    rng = np.random.default_rng(rng)
    S, A, K = n_states, n_actions, n_dynamics
    js = rng.dirichlet(np.ones(S * A * K * S)).reshape(S, A, K, S)
    jt = js.copy()
    for s in range(S):
        for a in range(A):
            i, j = rng.choice(K, 2, replace=False)
            k, l = rng.choice(S, 2, replace=False)
            sign = np.zeros((K, S))
            sign[i, k] = sign[j, l] = 1.0
            sign[i, l] = sign[j, k] = -1.0
            cell = js[s, a]
            eps = strength * min(cell[i, l], cell[j, k])
            jt[s, a] = cell + eps * sign
    return OccupancyMeasures(js), OccupancyMeasures(jt)


def relabelled_mdp(mdp, perm):
    """Same MDP with the dynamics index permuted; shares rho(s, a, s') with the original."""
    perm = np.asarray(perm)
    return TabularRDMDP(mdp.T[:, :, perm, :], mdp.policy[:, perm, :], mdp.prior[perm],
                        mdp.init, mdp.horizon, mdp.discount)


def monte_carlo_joint(mdp, n_traj, rng, horizon=None):
    """Empirical rho(s, a, theta, s') and per-cell standard errors from sampled episodes."""
    rng = np.random.default_rng(rng)
    H = mdp.horizon if horizon is None else int(horizon)
    S, A, K = mdp.shape

    def draw(probs):
        cum = np.cumsum(probs, axis=-1)
        u = rng.random(probs.shape[0])[:, None]
        return np.minimum((u > cum).sum(axis=-1), probs.shape[-1] - 1)

    k = draw(np.broadcast_to(mdp.prior, (n_traj, K)))
    s = draw(np.broadcast_to(mdp.init, (n_traj, S)))
    weights = np.array([mdp.discount ** t for t in range(H)])
    weights = weights / weights.sum()
    cell_sum = np.zeros(S * A * K * S)
    cell_sq = np.zeros(S * A * K * S)
    per_traj = np.zeros((n_traj, H), dtype=np.int64)
    for t in range(H):
        a = draw(mdp.policy[s, k])
        s2 = draw(mdp.T[s, a, k])
        per_traj[:, t] = ((s * A + a) * K + k) * S + s2
        s = s2
    # per-trajectory weighted cell counts; a cell can repeat within one trajectory
    rows = np.repeat(np.arange(n_traj), H)
    flat = per_traj.ravel()
    w = np.tile(weights, n_traj)
    key = rows * cell_sum.size + flat
    uniq, inv = np.unique(key, return_inverse=True)
    vals = np.bincount(inv, weights=w)
    cells = uniq % cell_sum.size
    cell_sum = np.bincount(cells, weights=vals, minlength=cell_sum.size)
    cell_sq = np.bincount(cells, weights=vals ** 2, minlength=cell_sum.size)
    mean = cell_sum / n_traj
    var = cell_sq / n_traj - mean ** 2
    se = np.sqrt(np.maximum(var, 0.0) / n_traj)
    return mean.reshape(S, A, K, S), se.reshape(S, A, K, S)


def run_suite(n_instances=100, seed=0, n_states=4, n_actions=3, n_dynamics=3, horizon=5):
    """Every statement over random instances: rows of (statement, instances, worst, passed)."""
    rng = np.random.default_rng(seed)
    dims = dict(n_states=n_states, n_actions=n_actions, n_dynamics=n_dynamics)
    chain, lemma2, lemma2_mdp, lemma4, thm5_margins, equality = [], [], [], [], [], []
    for _ in range(n_instances):
        a = random_mdp(rng, horizon=horizon, **dims)
        b = random_mdp(rng, horizon=horizon, **dims)
        for axis in (1, 2, 3):
            chain.append(chain_rule_gap(a, b, axis=axis))
        lemma4.append(verify_lemma4(a, b)[2])
        lemma2_mdp.append(verify_lemma2(a, relabelled_mdp(a, rng.permutation(n_dynamics)))[2])
        src, tgt = equal_marginal_pair(rng, **dims)
        lemma2.append(verify_lemma2(src, tgt)[2])
        thm5_margins.append(verify_theorem5(src, tgt)[2])
        src, tgt = shared_marginals_pair(rng, **dims)
        equality.append(abs(verify_theorem5(src, tgt)[2]))
    n_ok = sum(m >= 0 for m in thm5_margins)
    return [
        ("chain-rule KL identity", n_instances, max(chain), "max gap", max(chain) < 1e-9),
        ("estimated-dynamics KL = joint KL (equal marginals)", n_instances, max(lemma2), "max gap",
         max(lemma2) < 1e-9),
        ("same, relabelled-dynamics MDP pairs", n_instances, max(lemma2_mdp), "max gap",
         max(lemma2_mdp) < 1e-9),
        ("forward-model KL = joint KL - state-action-dynamics KL", n_instances, max(lemma4), "max gap",
         max(lemma4) < 1e-9),
        ("estimated KL >= forward KL", n_instances, min(thm5_margins), "min margin",
         n_ok == n_instances),
        ("equality when rho(s,a,theta) also shared", n_instances, max(equality), "max gap",
         max(equality) < 1e-10),
    ]
