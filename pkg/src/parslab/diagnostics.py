"""Measurement instruments: dormant neurons, NTK similarity maps, max-Q probing and OOD labels."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull

from . import nn_core
from .data_store import TransitionDataset
from .nn_core import MlpParams, MlpSpec
from .pars_trainer import sample_infeasible
from .seeding import derive_rng

ID, OOD_IN, OOD_OUT = "ID", "OOD-in", "OOD-out"


class UnsupportedDimensionError(ValueError):
    pass


class DatasetContinuityError(ValueError):
    """A non-terminal transition has no matching successor record."""


# ---------------------------------------------------------------------------
# Dormant neurons


@dataclass
class DormantReport:
    per_layer_dormant: list[int]
    per_layer_size: list[int]
    dormant_ratio: float
    threshold: float
    batch_size: int


def dormant_ratio(params: MlpParams, eval_batch, threshold: float = 0.0) -> DormantReport:
    """Share of hidden units whose normalized mean |activation| is at or below ``threshold``.

    A unit's score is its mean absolute activation over the batch divided by
    the mean score of its layer. A layer whose scores are all zero counts as
    entirely dormant.
    """
    x = np.atleast_2d(np.asarray(eval_batch, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("eval_batch must be non-empty")
    _, trace = nn_core.mlp_forward(params, x, want_trace=True)
    dormant, sizes = [], []
    for act in trace.post_act:
        score = np.abs(act).mean(axis=0)
        layer_mean = score.mean()
        if layer_mean == 0.0:
            dormant.append(score.size)
        else:
            dormant.append(int(np.count_nonzero(score / layer_mean <= threshold)))
        sizes.append(score.size)
    return DormantReport(dormant, sizes, sum(dormant) / sum(sizes), threshold, x.shape[0])


# ---------------------------------------------------------------------------
# Neural tangent kernel


@dataclass
class NtkMap:
    ref_point: np.ndarray
    grid: np.ndarray
    values: np.ndarray
    flagged: np.ndarray = field(default=None)

    def mean_over(self, mask: np.ndarray) -> float:
        sel = mask & ~self.flagged
        return float(self.values[sel].mean())


def ntk_similarity(params: MlpParams, ref_point, grid, chunk: int = 128) -> NtkMap:
    """Normalized NTK ``K(ref, x) / sqrt(K(ref, ref) K(x, x))`` for every grid row.

    Points whose gradient vanishes (or a vanishing reference gradient) are
    flagged and carry NaN.
    """
    if params.spec.output_dim != 1:
        raise ValueError("ntk_similarity expects a scalar-output network")
    ref = np.asarray(ref_point, dtype=np.float64).reshape(1, -1)
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    g_ref = nn_core.per_sample_grads(params, ref)[0]
    k_rr = float(g_ref @ g_ref)
    values = np.empty(grid.shape[0])
    for start in range(0, grid.shape[0], chunk):
        g = nn_core.per_sample_grads(params, grid[start : start + chunk])
        k_rx = g @ g_ref
        k_xx = np.einsum("ij,ij->i", g, g)
        denom = np.sqrt(k_rr * k_xx)
        with np.errstate(invalid="ignore", divide="ignore"):
            values[start : start + chunk] = np.where(denom > 0, k_rx / denom, np.nan)
    flagged = ~np.isfinite(values)
    return NtkMap(ref[0], grid, np.clip(values, -1.0, 1.0), flagged)


# ---------------------------------------------------------------------------
# Offline SARSA probe critic and max-Q probing


@dataclass
class SarsaConfig:
    gamma: float = 0.99
    c_reward: float = 1.0
    lr: float = 3e-4
    batch_size: int = 256
    tau: float = 5e-3
    alpha: float = 0.0
    guard_multiplier: float = 100.0
    # None: c_reward * min(dataset reward) / (1 - gamma)
    q_min: Optional[float] = None


def successor_actions(ds: TransitionDataset) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(a_next, usable)``: the next record's action and which records can be used.

    Terminal records need no successor; truncated records have none and are skipped.
    """
    n = len(ds)
    a_next = np.zeros_like(ds.a)
    usable = np.ones(n, dtype=bool)
    for i in range(n):
        if ds.done[i]:
            continue
        if ds.truncated[i]:
            usable[i] = False
            continue
        if i + 1 >= n or not np.array_equal(ds.s_next[i], ds.s[i + 1]):
            raise DatasetContinuityError(f"record {i} is non-terminal but record {i + 1} does not continue it")
        a_next[i] = ds.a[i + 1]
    return a_next, usable


def train_sarsa_q(dataset: TransitionDataset, spec: MlpSpec, steps: int, seed: int, cfg: SarsaConfig | None = None) -> MlpParams:
    """Fit Q to the behavior policy with TD on dataset tuples ``(s, a, r, s', a')``.

    With ``cfg.alpha > 0`` the infeasible-action penalty is added, giving the
    regularized probe critic.
    """
    cfg = cfg or SarsaConfig()
    a_next, usable = successor_actions(dataset)
    idx_pool = np.flatnonzero(usable)
    if idx_pool.size == 0:
        raise DatasetContinuityError("no usable transitions")
    q_min = cfg.q_min if cfg.q_min is not None else cfg.c_reward * float(dataset.r.min()) / (1.0 - cfg.gamma)
    rng_sample = derive_rng(seed, "sarsa/sample")
    rng_inf = derive_rng(seed, "sarsa/infeasible")
    params = nn_core.mlp_init(spec, derive_rng(seed, "sarsa/init"))
    target = params.copy()
    opt = nn_core.adam_init(params, cfg.lr)
    for _ in range(steps):
        idx = idx_pool[rng_sample.integers(0, idx_pool.size, size=cfg.batch_size)]
        s, a, r = dataset.s[idx], dataset.a[idx], dataset.r[idx]
        nxt = np.concatenate([dataset.s_next[idx], a_next[idx]], axis=1)
        q_next, _ = nn_core.mlp_forward(target, nxt)
        y = cfg.c_reward * r + (1.0 - dataset.done[idx]) * cfg.gamma * q_next[:, 0]
        x = np.concatenate([s, a], axis=1)
        n = x.shape[0]
        if cfg.alpha > 0:
            a_inf = sample_infeasible(dataset.action_dim, cfg.guard_multiplier, n, rng_inf)
            x = np.concatenate([x, np.concatenate([s, a_inf], axis=1)])
        q, trace = nn_core.mlp_forward(params, x, want_trace=True)
        q = q[:, 0]
        rows = x.shape[0]
        g = np.empty(rows)
        g[:n] = 2.0 * (q[:n] - y) / n * rows
        if cfg.alpha > 0:
            g[n:] = cfg.alpha * 2.0 * (q[n:] - q_min) / n * rows
        grad, _ = nn_core.mlp_backward(params, trace, g[:, None])
        params, opt = nn_core.adam_step(params, grad, opt)
        target = nn_core.soft_update(target, params, cfg.tau)
    return params


CriticFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def mlp_critic(params: MlpParams, state_dim: int) -> CriticFn:
    """Wrap a critic network as ``(s, a) -> (Q, dQ/da)``."""

    def critic(s, a):
        x = np.concatenate([s, a], axis=1)
        q, trace = nn_core.mlp_forward(params, x, want_trace=True)
        _, dx = nn_core.mlp_backward(params, trace, np.ones_like(q))
        return q[:, 0], dx[:, state_dim:]

    return critic


@dataclass
class MaxQReport:
    data_action_norm: float
    max_q_action_norm: float
    max_q_actions: np.ndarray


def max_q_probe(
    critic: MlpParams | CriticFn,
    states,
    action_dim: int,
    steps: int,
    seed: int,
    data_actions=None,
    high=None,
    hidden_dims: Sequence[int] = (64, 64),
    lr: float = 1e-3,
    batch_size: int = 256,
) -> MaxQReport:
    """Train a tanh-squashed action network to maximize a frozen critic over ``states``.

    Action norms are divided by the norm of the box corner ``high``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    state_dim = states.shape[1]
    if isinstance(critic, MlpParams):
        critic = mlp_critic(critic, state_dim)
    high = np.ones(action_dim) if high is None else np.asarray(high, dtype=np.float64)
    max_norm = float(np.linalg.norm(high))
    spec = MlpSpec(state_dim, action_dim, tuple(hidden_dims), "relu", False)
    params = nn_core.mlp_init(spec, derive_rng(seed, "maxq/init"))
    opt = nn_core.adam_init(params, lr)
    rng = derive_rng(seed, "maxq/sample")
    for _ in range(steps):
        s = states[rng.integers(0, states.shape[0], size=min(batch_size, states.shape[0]))]
        pre, trace = nn_core.mlp_forward(params, s, want_trace=True)
        th = np.tanh(pre)
        _, dq_da = critic(s, high * th)
        # loss = -mean Q; mlp_backward already averages over rows.
        d_pre = -dq_da * high * (1.0 - th * th)
        grad, _ = nn_core.mlp_backward(params, trace, d_pre)
        params, opt = nn_core.adam_step(params, grad, opt)
    pre, _ = nn_core.mlp_forward(params, states)
    actions = high * np.tanh(pre)
    data_norm = float("nan")
    if data_actions is not None:
        data_norm = float(np.linalg.norm(np.atleast_2d(data_actions), axis=1).mean() / max_norm)
    return MaxQReport(data_norm, float(np.linalg.norm(actions, axis=1).mean() / max_norm), actions)


# ---------------------------------------------------------------------------
# Convex-hull OOD classification


def _monotone_chain(pts: np.ndarray) -> np.ndarray:
    pts = np.unique(pts, axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _inside_full_rank(points: np.ndarray, queries: np.ndarray, tol: float) -> np.ndarray:
    d = points.shape[1]
    if d == 1:
        return (queries[:, 0] >= points[:, 0].min() - tol) & (queries[:, 0] <= points[:, 0].max() + tol)
    if d == 2:
        poly = _monotone_chain(points)
        edges = np.roll(poly, -1, axis=0) - poly
        rel = queries[:, None, :] - poly[None, :, :]
        cross = edges[None, :, 0] * rel[:, :, 1] - edges[None, :, 1] * rel[:, :, 0]
        scale = np.linalg.norm(edges, axis=1)[None, :]
        return np.all(cross >= -tol * scale, axis=1)
    hull = ConvexHull(points)
    return np.all(queries @ hull.equations[:, :-1].T + hull.equations[:, -1] <= tol, axis=1)


def hull_contains(points, queries, tol: float = 1e-9) -> np.ndarray:
    """Exact membership of ``queries`` in the convex hull of ``points`` (dimension <= 3).

    Degenerate point sets are handled by projecting onto their affine hull.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if points.shape[1] > 3:
        raise UnsupportedDimensionError("exact hull membership is limited to dimension <= 3")
    center = points.mean(axis=0)
    _, sv, vt = np.linalg.svd(points - center, full_matrices=False)
    rank = int(np.count_nonzero(sv > 1e-10 * max(1.0, sv[0] if sv.size else 0.0)))
    rel_q = queries - center
    if rank == 0:
        return np.linalg.norm(rel_q, axis=1) <= tol
    basis = vt[:rank]
    coords_q = rel_q @ basis.T
    off_plane = np.linalg.norm(rel_q - coords_q @ basis, axis=1) > tol
    inside = _inside_full_rank((points - center) @ basis.T, coords_q, tol)
    return inside & ~off_plane


@dataclass
class RegionLabelsContinuous:
    labels: np.ndarray
    eps_id: float

    def count(self, label: str) -> int:
        return int(np.count_nonzero(self.labels == label))


def default_eps_id(action_dim: int, low=-1.0, high=1.0) -> float:
    """1% of the feasible box diagonal."""
    return 0.01 * float(high - low) * np.sqrt(action_dim)


def classify_ood(action_set, queries, eps_id: Optional[float] = None) -> RegionLabelsContinuous:
    pts = np.atleast_2d(np.asarray(action_set, dtype=np.float64))
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    dim = pts.shape[1]
    if dim > 3:
        raise UnsupportedDimensionError(f"classify_ood supports action dimension <= 3, got {dim}")
    eps = default_eps_id(dim) if eps_id is None else eps_id
    dists = np.min(np.linalg.norm(q[:, None, :] - pts[None, :, :], axis=2), axis=1)
    is_id = dists <= eps
    inside = hull_contains(pts, q)
    labels = np.where(is_id, ID, np.where(inside, OOD_IN, OOD_OUT)).astype(object)
    return RegionLabelsContinuous(labels, eps)


def region_fractions(labels: RegionLabelsContinuous) -> dict[str, float]:
    n = len(labels.labels)
    return {k: labels.count(k) / n for k in (ID, OOD_IN, OOD_OUT)}


# ---------------------------------------------------------------------------
# Reports


def write_ntk_csv(ntk: NtkMap, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*(f"x{i}" for i in range(ntk.grid.shape[1])), "ntk", "flagged"])
        for p, v, f in zip(ntk.grid, ntk.values, ntk.flagged):
            w.writerow([*(repr(float(c)) for c in p), repr(float(v)), int(f)])
