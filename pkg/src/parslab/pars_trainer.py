"""Actor-critic training with reward scaling, layer-normed critics and infeasible-action penalties.

The critic objective for every ensemble member is

    mean (Q(s, a) - y)^2  +  alpha * mean (Q(s, a_inf) - Q_min)^2

with ``y = c_reward * r + (1 - done) * gamma * min_{k in subset} Q'_k(s', a')``,
``Q_min = c_reward * r_min / (1 - gamma)`` and ``a_inf`` drawn far outside the
feasible box (see :func:`sample_infeasible`). The actor follows TD3+BC:
``-mean(Q_pi) / Z + beta * mean ||pi(s) - a||^2`` where ``Z`` is the detached
mean ``|Q_pi|`` of the batch.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import nn_core
from .data_store import (
    Batch,
    ReplayBuffer,
    Transition,
    TransitionDataset,
    dataset_stats,
    mixed_sample,
    sample_batch,
)
from .nn_core import MlpParams, MlpSpec
from .seeding import derive_rng
from .toy_envs import EnvSpec, env_reset, env_step, evaluate_policy


class DivergenceError(RuntimeError):
    """Q-values grew far beyond any value the scaled rewards can justify."""


@dataclass
class ParsConfig:
    c_reward: float = 1.0
    alpha: float = 0.001
    beta: float = 0.01
    gamma: float = 0.99
    tau: float = 5e-3
    n_critics: int = 2
    critic_subset: int = 2
    actor_subset: int = 1
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_delay: int = 2
    exploration_noise: float = 0.05
    utd_ratio: int = 20
    offline_fraction: float = 0.5
    guard_multiplier: float = 1000.0
    r_min_source: str = "dataset"
    r_min_known: float = 0.0
    batch_size: int = 256
    max_gradient_steps: int = 10000
    hidden_dims: tuple[int, ...] = (256, 256)
    activation: str = "relu"
    critic_ln: bool = True
    actor_ln: bool = False
    train_ln_affine: bool = True
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4
    normalize_actor_q: bool = True
    subset_per_sample: bool = False
    log_interval: int = 1000
    eval_episodes: int = 10
    online_capacity: int = 1_000_000

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if not self.c_reward > 0:
            raise ValueError("c_reward must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_critics < 1:
            raise ValueError("n_critics must be >= 1")
        if not 1 <= self.critic_subset <= self.n_critics:
            raise ValueError("critic_subset must lie in [1, n_critics]")
        if not 1 <= self.actor_subset <= self.n_critics:
            raise ValueError("actor_subset must lie in [1, n_critics]")
        if self.guard_multiplier < 1:
            raise ValueError("guard_multiplier must be >= 1")
        if self.r_min_source not in ("known", "dataset"):
            raise ValueError("r_min_source must be 'known' or 'dataset'")
        if self.policy_delay < 1 or self.utd_ratio < 1 or self.batch_size < 1 or self.log_interval < 1:
            raise ValueError("policy_delay, utd_ratio, batch_size and log_interval must be >= 1")
        if not 0.0 <= self.offline_fraction <= 1.0:
            raise ValueError("offline_fraction must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Networks


@dataclass
class ActorNet:
    params: MlpParams
    target: MlpParams
    low: np.ndarray
    high: np.ndarray

    def squash(self, pre: np.ndarray) -> np.ndarray:
        half = 0.5 * (self.high - self.low)
        return self.low + half * (np.tanh(pre) + 1.0)

    def act(self, s, target: bool = False) -> np.ndarray:
        out, _ = nn_core.mlp_forward(self.target if target else self.params, s)
        return self.squash(out)

    def __call__(self, s) -> np.ndarray:
        return self.act(s)


@dataclass
class CriticEnsemble:
    online: list[MlpParams]
    target: list[MlpParams]

    def __len__(self) -> int:
        return len(self.online)

    def q_values(self, s, a, target: bool = False) -> np.ndarray:
        """Q-values of every member, shape ``(n_critics, batch)``."""
        x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1)
        nets = self.target if target else self.online
        return np.stack([nn_core.mlp_forward(p, x)[0][:, 0] for p in nets])


def build_networks(cfg: ParsConfig, state_dim: int, action_dim: int, low, high, rng) -> tuple[ActorNet, CriticEnsemble]:
    critic_spec = MlpSpec(state_dim + action_dim, 1, cfg.hidden_dims, cfg.activation, cfg.critic_ln)
    actor_spec = MlpSpec(state_dim, action_dim, cfg.hidden_dims, cfg.activation, cfg.actor_ln)
    critics = [nn_core.mlp_init(critic_spec, rng) for _ in range(cfg.n_critics)]
    actor = nn_core.mlp_init(actor_spec, rng)
    return (
        ActorNet(actor, actor.copy(), np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)),
        CriticEnsemble(critics, [c.copy() for c in critics]),
    )


def save_agent(path, actor: ActorNet, critics: CriticEnsemble) -> None:
    nets = {"actor": actor.params, "actor_target": actor.target}
    for i, (c, t) in enumerate(zip(critics.online, critics.target)):
        nets[f"critic{i}"] = c
        nets[f"critic_target{i}"] = t
    nn_core.save_checkpoint(path, nets)


def load_agent(path, low=(-1.0,), high=(1.0,)) -> tuple[ActorNet, CriticEnsemble]:
    nets = nn_core.load_checkpoint(path)
    n = sum(1 for k in nets if k.startswith("critic_target"))
    action_dim = nets["actor"].spec.output_dim
    low = np.broadcast_to(np.asarray(low, dtype=np.float64), (action_dim,)).copy()
    high = np.broadcast_to(np.asarray(high, dtype=np.float64), (action_dim,)).copy()
    actor = ActorNet(nets["actor"], nets["actor_target"], low, high)
    critics = CriticEnsemble([nets[f"critic{i}"] for i in range(n)], [nets[f"critic_target{i}"] for i in range(n)])
    return actor, critics


# ---------------------------------------------------------------------------
# Loss pieces


def compute_q_min(cfg: ParsConfig, ds_stats: Optional[dict] = None) -> float:
    if cfg.gamma >= 1.0:
        raise ValueError("gamma must be < 1 for a finite Q_min")
    if cfg.r_min_source == "known" or ds_stats is None:
        r_min = cfg.r_min_known
    else:
        r_min = ds_stats["r_min"]
    if not math.isfinite(r_min):
        raise ValueError("r_min must be finite")
    return cfg.c_reward * r_min / (1.0 - cfg.gamma)


def infeasible_from_uniform(u: np.ndarray, m: float) -> np.ndarray:
    """Map ``u ~ U[-1, 1)`` onto ``[-2m, -m) U [m, 2m)``."""
    return np.where(u < 0, u - 1.0, u + 1.0) * m


def sample_infeasible(action_dim: int, guard_multiplier: float, batch: int, rng: np.random.Generator) -> np.ndarray:
    if guard_multiplier < 1:
        raise ValueError("guard_multiplier must be >= 1")
    u = rng.uniform(-1.0, 1.0, size=(batch, action_dim))
    return infeasible_from_uniform(u, guard_multiplier)


def _draw_subset(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(n, size=k, replace=False))


def _subset_reduce(q: np.ndarray, k: int, rng, per_sample: bool, how: str) -> np.ndarray:
    """Reduce ``q`` of shape (n_critics, batch) over a random size-k subset of critics."""
    n, b = q.shape
    reduce = np.min if how == "min" else np.mean
    if k == n:
        return reduce(q, axis=0)
    if per_sample:
        idx = np.sort(np.argsort(rng.random((b, n)), axis=1)[:, :k], axis=1)
        return reduce(np.take_along_axis(q.T, idx, axis=1), axis=1)
    return reduce(q[_draw_subset(n, k, rng)], axis=0)


def td_target(cfg: ParsConfig, critics: CriticEnsemble, actor: ActorNet, batch: Batch, rng: np.random.Generator) -> np.ndarray:
    a_next = actor.act(batch.s_next, target=True)
    if cfg.policy_noise > 0:
        noise = np.clip(cfg.policy_noise * rng.standard_normal(a_next.shape), -cfg.noise_clip, cfg.noise_clip)
        a_next = np.clip(a_next + noise, actor.low, actor.high)
    q_next = critics.q_values(batch.s_next, a_next, target=True)
    q_next = _subset_reduce(q_next, cfg.critic_subset, rng, cfg.subset_per_sample, "min")
    return cfg.c_reward * batch.r + (1.0 - batch.done) * cfg.gamma * q_next


@dataclass
class CriticLoss:
    total: float
    td: float
    pa: float
    q_data: float
    q_infeasible: float


def critic_loss_and_grad(
    cfg: ParsConfig,
    critics: CriticEnsemble,
    targets: np.ndarray,
    batch: Batch,
    infeasible_actions: Optional[np.ndarray],
    q_min: float,
) -> tuple[CriticLoss, list[MlpParams]]:
    """Per-critic TD + PA loss; components are averaged over the ensemble."""
    n = len(batch)
    x = np.concatenate([batch.s, batch.a], axis=1)
    use_pa = cfg.alpha > 0 and infeasible_actions is not None
    if use_pa:
        m = infeasible_actions.shape[0]
        x = np.concatenate([x, np.concatenate([batch.s[:m], infeasible_actions], axis=1)])
    rows = x.shape[0]

    grads, td_sum, pa_sum, qd_sum, qi_sum = [], 0.0, 0.0, 0.0, 0.0
    for params in critics.online:
        q, trace = nn_core.mlp_forward(params, x, want_trace=True)
        q = q[:, 0]
        err = q[:n] - targets
        td = float(np.mean(err * err))
        g = np.zeros(rows)
        # mlp_backward averages over all rows, so rescale per-row loss derivatives by `rows`.
        g[:n] = 2.0 * err / n * rows
        pa = 0.0
        if use_pa:
            err_inf = q[n:] - q_min
            pa = float(np.mean(err_inf * err_inf))
            g[n:] = cfg.alpha * 2.0 * err_inf / m * rows
            qi_sum += float(np.mean(q[n:]))
        grad, _ = nn_core.mlp_backward(params, trace, g[:, None])
        if not cfg.train_ln_affine:
            grad = nn_core.without_ln_affine_grads(grad)
        grads.append(grad)
        td_sum += td
        pa_sum += pa
        qd_sum += float(np.mean(q[:n]))
    k = len(critics)
    td, pa = td_sum / k, pa_sum / k
    loss = CriticLoss(td + cfg.alpha * pa, td, pa, qd_sum / k, qi_sum / k if use_pa else float("nan"))
    return loss, grads


def actor_loss_and_grad(
    cfg: ParsConfig,
    critics: CriticEnsemble,
    actor: ActorNet,
    batch: Batch,
    phase: str,
    rng: Optional[np.random.Generator] = None,
) -> tuple[float, MlpParams]:
    if phase not in ("offline", "online"):
        raise ValueError("phase must be 'offline' or 'online'")
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    pre, a_trace = nn_core.mlp_forward(actor.params, batch.s, want_trace=True)
    pi = actor.squash(pre)
    x = np.concatenate([batch.s, pi], axis=1)
    sd = batch.s.shape[1]

    if phase == "offline":
        chosen = list(range(len(critics)))
    else:
        chosen = list(_draw_subset(len(critics), cfg.actor_subset, rng))
    qs, dq_da = [], []
    for i in chosen:
        q, trace = nn_core.mlp_forward(critics.online[i], x, want_trace=True)
        _, dx = nn_core.mlp_backward(critics.online[i], trace, np.ones((n, 1)))
        qs.append(q[:, 0])
        dq_da.append(dx[:, sd:])
    qs = np.stack(qs)
    dq_da = np.stack(dq_da)
    if phase == "offline":
        pick = np.argmin(qs, axis=0)
        q_pi = qs[pick, np.arange(n)]
        dq = dq_da[pick, np.arange(n)]
    else:
        q_pi = qs.mean(axis=0)
        dq = dq_da.mean(axis=0)

    z = float(np.mean(np.abs(q_pi))) if cfg.normalize_actor_q else 1.0
    if z == 0.0:
        z = 1.0
    diff = pi - batch.a
    loss = -float(np.mean(q_pi)) / z
    d_pi = -dq / (n * z)
    if cfg.beta > 0:
        loss += cfg.beta * float(np.mean(np.sum(diff * diff, axis=1)))
        d_pi = d_pi + cfg.beta * 2.0 * diff / n
    half = 0.5 * (actor.high - actor.low)
    d_pre = d_pi * half * (1.0 - np.tanh(pre) ** 2)
    grad, _ = nn_core.mlp_backward(actor.params, a_trace, d_pre * n)
    return loss, grad


# ---------------------------------------------------------------------------
# Logs


LOG_COLUMNS = (
    "phase",
    "grad_steps",
    "env_steps",
    "critic_loss",
    "td_loss",
    "pa_loss",
    "q_data",
    "q_infeasible",
    "actor_loss",
    "eval_return",
    "goal_rate",
    "dormant_ratio",
)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append({k: row.get(k, float("nan")) for k in LOG_COLUMNS})

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([v if isinstance(v, str) else repr(v) for v in (r[k] for k in LOG_COLUMNS)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


class _Accumulator:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def add(self, key: str, value: float) -> None:
        if value != value:  # NaN: nothing measured
            return
        self.sums[key] = self.sums.get(key, 0.0) + value
        self.counts[key] = self.counts.get(key, 0) + 1

    def flush(self) -> dict[str, float]:
        out = {k: self.sums[k] / self.counts[k] for k in self.sums}
        self.sums, self.counts = {}, {}
        return out


# ---------------------------------------------------------------------------
# Training loops


@dataclass
class _Learner:
    """Mutable training state shared by the offline and online loops."""

    cfg: ParsConfig
    actor: ActorNet
    critics: CriticEnsemble
    actor_opt: nn_core.AdamState
    critic_opts: list[nn_core.AdamState]
    q_min: float
    q_limit: float
    rng_target: np.random.Generator
    rng_infeasible: np.random.Generator
    rng_actor: np.random.Generator
    action_dim: int
    acc: _Accumulator = field(default_factory=_Accumulator)
    grad_steps: int = 0

    def update(self, batch: Batch, phase: str) -> None:
        cfg = self.cfg
        y = td_target(cfg, self.critics, self.actor, batch, self.rng_target)
        a_inf = None
        if cfg.alpha > 0:
            a_inf = sample_infeasible(self.action_dim, cfg.guard_multiplier, len(batch), self.rng_infeasible)
        loss, grads = critic_loss_and_grad(cfg, self.critics, y, batch, a_inf, self.q_min)
        if not abs(loss.q_data) <= self.q_limit:
            raise DivergenceError(f"mean Q {loss.q_data:.4g} exceeds divergence limit {self.q_limit:.4g}")
        online, opts = [], []
        for p, g, o in zip(self.critics.online, grads, self.critic_opts):
            p, o = nn_core.adam_step(p, g, o)
            online.append(p)
            opts.append(o)
        self.critic_opts = opts
        target = [nn_core.soft_update(t, p, cfg.tau) for t, p in zip(self.critics.target, online)]
        self.critics = CriticEnsemble(online, target)
        self.grad_steps += 1
        for k in ("total", "td", "pa", "q_data", "q_infeasible"):
            self.acc.add(k, getattr(loss, k))

        if self.grad_steps % cfg.policy_delay == 0:
            a_loss, a_grad = actor_loss_and_grad(cfg, self.critics, self.actor, batch, phase, self.rng_actor)
            params, self.actor_opt = nn_core.adam_step(self.actor.params, a_grad, self.actor_opt)
            self.actor = replace(
                self.actor, params=params, target=nn_core.soft_update(self.actor.target, params, cfg.tau)
            )
            self.acc.add("actor", a_loss)

    def log_row(self, phase: str, env_steps: int, probe: Batch, env: Optional[EnvSpec], eval_seed: int) -> dict:
        from .diagnostics import dormant_ratio

        stats = self.acc.flush()
        row = {
            "phase": phase,
            "grad_steps": self.grad_steps,
            "env_steps": env_steps,
            "critic_loss": stats.get("total", float("nan")),
            "td_loss": stats.get("td", float("nan")),
            "pa_loss": stats.get("pa", float("nan")),
            "q_data": stats.get("q_data", float("nan")),
            "q_infeasible": stats.get("q_infeasible", float("nan")),
            "actor_loss": stats.get("actor", float("nan")),
        }
        x = np.concatenate([probe.s, probe.a], axis=1)
        row["dormant_ratio"] = float(np.mean([dormant_ratio(c, x).dormant_ratio for c in self.critics.online]))
        if env is not None and self.cfg.eval_episodes > 0:
            ev = evaluate_policy(env, self.actor, self.cfg.eval_episodes, eval_seed)
            row["eval_return"], row["goal_rate"] = ev["mean_return"], ev["goal_rate"]
        return row


def _make_learner(cfg: ParsConfig, actor: ActorNet, critics: CriticEnsemble, ds: TransitionDataset, seed: int, tag: str) -> _Learner:
    stats = dataset_stats(ds)
    q_min = compute_q_min(cfg, stats)
    r_scale = max(abs(stats["r_max"]), abs(stats["r_min"]), abs(cfg.r_min_known))
    q_limit = 1e3 * cfg.c_reward * (r_scale if r_scale > 0 else 1.0) / (1.0 - cfg.gamma)
    return _Learner(
        cfg,
        actor,
        critics,
        nn_core.adam_init(actor.params, cfg.actor_lr),
        [nn_core.adam_init(c, cfg.critic_lr) for c in critics.online],
        q_min,
        q_limit,
        derive_rng(seed, f"{tag}/target"),
        derive_rng(seed, f"{tag}/infeasible"),
        derive_rng(seed, f"{tag}/actor"),
        ds.action_dim,
    )


def train_offline(
    cfg: ParsConfig,
    dataset: TransitionDataset,
    seed: int,
    env: Optional[EnvSpec] = None,
) -> tuple[ActorNet, CriticEnsemble, TrainLog]:
    """Offline training for ``cfg.max_gradient_steps`` critic updates.

    When ``env`` is given, each log row carries an evaluation of the current actor.
    """
    actor, critics = build_networks(
        cfg, dataset.state_dim, dataset.action_dim, dataset.feasible_low, dataset.feasible_high, derive_rng(seed, "init")
    )
    learner = _make_learner(cfg, actor, critics, dataset, seed, "offline")
    rng_sample = derive_rng(seed, "offline/sample")
    rng_probe = derive_rng(seed, "offline/probe")
    log = TrainLog()
    for step in range(1, cfg.max_gradient_steps + 1):
        learner.update(sample_batch(dataset, cfg.batch_size, rng_sample), "offline")
        if step % cfg.log_interval == 0 or step == cfg.max_gradient_steps:
            probe = sample_batch(dataset, cfg.batch_size, rng_probe)
            log.append(learner.log_row("offline", 0, probe, env, seed + step))
    return learner.actor, learner.critics, log


def finetune_online(
    cfg: ParsConfig,
    checkpoint: tuple[ActorNet, CriticEnsemble],
    env: EnvSpec,
    dataset: TransitionDataset,
    online_steps: int,
    seed: int,
) -> tuple[ActorNet, CriticEnsemble, TrainLog]:
    """Online fine-tuning: one environment step, then ``utd_ratio`` updates on mixed batches.

    Logging happens every ``log_interval`` environment steps. The penalty term is
    active iff ``cfg.alpha > 0``.
    """
    actor, critics = checkpoint
    actor = replace(actor, params=actor.params.copy(), target=actor.target.copy())
    critics = CriticEnsemble([c.copy() for c in critics.online], [c.copy() for c in critics.target])
    learner = _make_learner(cfg, actor, critics, dataset, seed, "online")
    rng_sample = derive_rng(seed, "online/sample")
    rng_explore = derive_rng(seed, "online/explore")
    rng_env = derive_rng(seed, "online/env")
    rng_probe = derive_rng(seed, "online/probe")
    buffer = ReplayBuffer(max(1, min(cfg.online_capacity, online_steps)), env.state_dim, env.action_dim)
    log = TrainLog()

    s, t = env_reset(env, rng_env), 0
    for step in range(1, online_steps + 1):
        a = learner.actor.act(s)
        if cfg.exploration_noise > 0:
            a = a + cfg.exploration_noise * rng_explore.standard_normal(a.shape)
        a = np.clip(a, learner.actor.low, learner.actor.high)
        res = env_step(env, s, a, t)
        buffer.add(Transition(s, a, res.r, res.s_next, res.done, res.truncated))
        if res.done or res.truncated:
            s, t = env_reset(env, rng_env), 0
        else:
            s, t = res.s_next, t + 1
        frac = cfg.offline_fraction if len(buffer) else 1.0
        for _ in range(cfg.utd_ratio):
            learner.update(mixed_sample(dataset, buffer, frac, cfg.batch_size, rng_sample), "online")
        if step % cfg.log_interval == 0 or step == online_steps:
            probe = mixed_sample(dataset, buffer, frac, cfg.batch_size, rng_probe)
            log.append(learner.log_row("online", step, probe, env, seed + step))
    return learner.actor, learner.critics, log


def config_fields() -> list[str]:
    return [f.name for f in fields(ParsConfig)]
