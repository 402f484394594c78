"""Finite-MDP certification of the region-aware policy-evaluation backup.

For a Q-table ``Q[s, a]`` the backup is

* ID pairs (behavior support):      ``(T Q)(s, a) = r(s, a) + gamma * E_{s'~P, a'~pi} Q(s', a')``
* OOD-in pairs (inside the per-state action interval spanned by ID actions):
  the mean of ``T Q`` over the ``k`` nearest ID pairs
* OOD-out pairs:                    ``Q_min = min r / (1 - gamma)``

Distance between pairs is ``|s - s'| + |e(a) - e(a')|`` with ``e`` the 1-D
action embedding; ties go to the lowest ``(state, action)`` index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .seeding import derive_rng

ID, OOD_IN, OOD_OUT = 0, 1, 2
LABEL_NAMES = {ID: "ID", OOD_IN: "OOD-in", OOD_OUT: "OOD-out"}


@dataclass
class TabularMdp:
    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A)
    gamma: float
    pi: np.ndarray  # (S, A)
    action_embed: np.ndarray  # (A,)

    def __post_init__(self):
        if not np.allclose(self.P.sum(axis=2), 1.0) or np.any(self.P < 0):
            raise ValueError("transition rows must be probability vectors")
        if not np.allclose(self.pi.sum(axis=1), 1.0) or np.any(self.pi < 0):
            raise ValueError("policy rows must be probability vectors")
        if not np.all(np.isfinite(self.R)):
            raise ValueError("rewards must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]

    @property
    def q_min(self) -> float:
        return float(self.R.min()) / (1.0 - self.gamma)


@dataclass
class RegionLabelsTabular:
    support: np.ndarray  # (S, A) bool, behavior support
    labels: np.ndarray  # (S, A) in {ID, OOD_IN, OOD_OUT}


def label_regions(support: np.ndarray, action_embed: np.ndarray) -> RegionLabelsTabular:
    support = np.asarray(support, dtype=bool)
    labels = np.full(support.shape, OOD_OUT)
    for s in range(support.shape[0]):
        emb = action_embed[support[s]]
        if emb.size == 0:
            continue
        inside = (action_embed >= emb.min()) & (action_embed <= emb.max())
        labels[s, inside] = OOD_IN
        labels[s, support[s]] = ID
    return RegionLabelsTabular(support, labels)


def build_random_mdp(
    n_states: int,
    n_actions: int,
    support_density: float,
    seed: int,
    gamma: float = 0.9,
) -> tuple[TabularMdp, RegionLabelsTabular]:
    if n_states < 2 or n_actions < 2:
        raise ValueError("need at least 2 states and 2 actions")
    if not 0.0 < support_density <= 1.0:
        raise ValueError("support_density must lie in (0, 1]")
    rng = derive_rng(seed, "tabular/mdp")
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    pi = rng.dirichlet(np.ones(n_actions), size=n_states)
    embed = np.linspace(-1.0, 1.0, n_actions)
    support = rng.random((n_states, n_actions)) < support_density
    if support_density >= 1.0:
        support[:] = True
    for s in range(n_states):
        if not support[s].any():
            support[s, rng.integers(n_actions)] = True
    mdp = TabularMdp(P, R, gamma, pi, embed)
    return mdp, label_regions(support, embed)


def policy_backup(Q: np.ndarray, mdp: TabularMdp) -> np.ndarray:
    v = np.sum(mdp.pi * Q, axis=1)
    return mdp.R + mdp.gamma * (mdp.P @ v)


def knn_table(mdp: TabularMdp, labels: RegionLabelsTabular, k: int) -> dict[tuple[int, int], np.ndarray]:
    """Nearest ID pairs (flat indices) for every OOD-in pair."""
    if k < 1:
        raise ValueError("k must be >= 1")
    S, A = labels.labels.shape
    id_flat = np.flatnonzero(labels.labels.ravel() == ID)  # ascending (s, a) order
    id_s, id_a = np.divmod(id_flat, A)
    table = {}
    for s, a in zip(*np.nonzero(labels.labels == OOD_IN)):
        d = np.abs(id_s - s) * 1.0 + np.abs(mdp.action_embed[id_a] - mdp.action_embed[a])
        order = np.argsort(d, kind="stable")
        table[(int(s), int(a))] = id_flat[order[:k]]
    return table


def apply_t_pars(Q: np.ndarray, mdp: TabularMdp, labels: RegionLabelsTabular, k: int = 3, knn=None) -> np.ndarray:
    knn = knn_table(mdp, labels, k) if knn is None else knn
    tq = policy_backup(Q, mdp)
    out = np.where(labels.labels == ID, tq, mdp.q_min)
    flat_tq = tq.ravel()
    for (s, a), nbrs in knn.items():
        out[s, a] = flat_tq[nbrs].mean()
    return out


def verify_contraction(mdp: TabularMdp, labels: RegionLabelsTabular, k: int, trials: int, seed: int) -> float:
    """Largest observed ``||T Q1 - T Q2||_inf / ||Q1 - Q2||_inf`` over random pairs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = derive_rng(seed, "tabular/contraction")
    knn = knn_table(mdp, labels, k)
    worst = 0.0
    shape = labels.labels.shape
    for _ in range(trials):
        scale = 10.0 ** rng.uniform(-2, 2)
        q1 = scale * rng.standard_normal(shape)
        q2 = q1 + scale * rng.standard_normal(shape) * (rng.random(shape) < 0.7)
        den = float(np.max(np.abs(q1 - q2)))
        if den == 0.0:
            continue
        num = float(np.max(np.abs(apply_t_pars(q1, mdp, labels, k, knn) - apply_t_pars(q2, mdp, labels, k, knn))))
        worst = max(worst, num / den)
    return worst


@dataclass
class FixedPointResult:
    Q: np.ndarray
    iterations: int
    residuals: list[float]


def fixed_point_iterate(mdp: TabularMdp, labels: RegionLabelsTabular, k: int, tol: float, max_iter: int = 100_000) -> FixedPointResult:
    """Iterate from ``Q = 0``; stops at the first ``t`` with ``||Q_{t+1} - Q_t|| < tol``.

    ``residuals[t] = ||Q_{t+1} - Q_t||_inf`` and ``iterations`` is that ``t``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    knn = knn_table(mdp, labels, k)
    q = np.zeros(labels.labels.shape)
    residuals = []
    for t in range(max_iter):
        q_next = apply_t_pars(q, mdp, labels, k, knn)
        res = float(np.max(np.abs(q_next - q)))
        residuals.append(res)
        q = q_next
        if res < tol:
            return FixedPointResult(q, t, residuals)
    raise RuntimeError("fixed-point iteration did not converge")


def iteration_bound(gamma: float, tol: float, first_residual: float) -> int:
    if first_residual < tol:
        return 1
    if gamma == 0.0:
        return 1
    return math.ceil(math.log(tol * (1.0 - gamma) / first_residual) / math.log(gamma)) + 1


def policy_evaluation_exact(mdp: TabularMdp) -> np.ndarray:
    """Solve ``Q = R + gamma P Pi Q`` directly."""
    S, A = mdp.R.shape
    pi_mat = np.zeros((S, S * A))
    for s in range(S):
        pi_mat[s, s * A : (s + 1) * A] = mdp.pi[s]
    M = mdp.P.reshape(S * A, S) @ pi_mat
    return np.linalg.solve(np.eye(S * A) - mdp.gamma * M, mdp.R.ravel()).reshape(S, A)


@dataclass
class CertificationRow:
    seed: int
    gamma: float
    max_ratio: float
    iterations: int
    first_residual: float
    final_residual: float
    max_decay: float


def certify(n_instances: int, trials: int, seed: int, n_states: int = 6, n_actions: int = 7, support_density: float = 0.4, gamma: float = 0.9, k: int = 3, tol: float = 1e-10) -> list[CertificationRow]:
    rows = []
    for i in range(n_instances):
        inst_seed = seed * 100_003 + i
        mdp, labels = build_random_mdp(n_states, n_actions, support_density, inst_seed, gamma)
        ratio = verify_contraction(mdp, labels, k, trials, inst_seed)
        fp = fixed_point_iterate(mdp, labels, k, tol)
        res = np.array(fp.residuals)
        nz = res[:-1] > 0
        decay = float(np.max(res[1:][nz] / res[:-1][nz])) if np.any(nz) else 0.0
        rows.append(CertificationRow(inst_seed, gamma, ratio, fp.iterations, float(res[0]), float(res[-1]), decay))
    return rows
