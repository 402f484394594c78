"""Deterministic toy continuous-control tasks and behavior-policy data generators.

Two tasks share the feasible action box ``[-1, 1]^n``:

* ``point_maze_2d``: a point in the unit square moves by ``step_scale * a``.
  A wall rectangle forces a U-shaped detour from the start to a goal disc.
  Moves that leave the square or touch a wall are rejected (position
  unchanged). Reward is 1 on entering the goal disc, which ends the episode,
  and 0 otherwise.
* ``line_walk_1d``: ``x' = clip(x + step_scale * a, 0, 1)`` with shaped
  reward ``-|x' - goal|`` and no terminal state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data_store import Transition, TransitionDataset

ENV_IDS = ("point_maze_2d", "line_walk_1d")
BEHAVIOR_KINDS = ("clustered_noisy_expert", "random", "mixture")


class InfeasibleActionError(ValueError):
    """An action outside the feasible box reached the environment."""


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int
    max_episode_steps: int
    step_scale: float = 0.05
    reward_kind: str = "sparse_goal"
    start: tuple[float, ...] = (0.5,)
    start_noise: float = 0.0
    goal: tuple[float, ...] = (0.8,)
    goal_radius: float = 0.05
    # Axis-aligned wall rectangles (x0, y0, x1, y1); maze only.
    walls: tuple[tuple[float, float, float, float], ...] = ()
    # Points the scripted expert visits in order before heading to the goal.
    waypoints: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ValueError(f"unknown env_id {self.env_id!r}")
        if self.reward_kind not in ("sparse_goal", "shaped"):
            raise ValueError(f"unknown reward_kind {self.reward_kind!r}")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")

    @property
    def feasible_low(self) -> np.ndarray:
        return -np.ones(self.action_dim)

    @property
    def feasible_high(self) -> np.ndarray:
        return np.ones(self.action_dim)


def point_maze_2d(**overrides) -> EnvSpec:
    """U-maze: start bottom-left, goal top-left, a wall from the left edge to x=0.7 between them."""
    cfg = dict(
        env_id="point_maze_2d",
        state_dim=2,
        action_dim=2,
        max_episode_steps=300,
        step_scale=0.05,
        reward_kind="sparse_goal",
        start=(0.15, 0.15),
        start_noise=0.03,
        goal=(0.15, 0.85),
        goal_radius=0.1,
        walls=((0.0, 0.45, 0.7, 0.55),),
        waypoints=((0.85, 0.2), (0.85, 0.8)),
    )
    cfg.update(overrides)
    return EnvSpec(**cfg)


def line_walk_1d(**overrides) -> EnvSpec:
    cfg = dict(
        env_id="line_walk_1d",
        state_dim=1,
        action_dim=1,
        max_episode_steps=50,
        step_scale=0.05,
        reward_kind="shaped",
        start=(0.5,),
        start_noise=0.5,
        goal=(0.8,),
        goal_radius=0.05,
    )
    cfg.update(overrides)
    return EnvSpec(**cfg)


def make_env_spec(env_id: str, **overrides) -> EnvSpec:
    if env_id == "point_maze_2d":
        return point_maze_2d(**overrides)
    if env_id == "line_walk_1d":
        return line_walk_1d(**overrides)
    raise ValueError(f"unknown env_id {env_id!r}")


@dataclass(frozen=True)
class StepResult:
    s_next: np.ndarray
    r: float
    done: bool
    truncated: bool


def env_reset(spec: EnvSpec, seed: int | np.random.Generator) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    start = np.array(spec.start, dtype=np.float64)
    jitter = rng.uniform(-spec.start_noise, spec.start_noise, size=spec.state_dim)
    return np.clip(start + jitter, 0.0, 1.0)


def _blocked(spec: EnvSpec, p: np.ndarray) -> bool:
    if np.any(p < 0.0) or np.any(p > 1.0):
        return True
    for x0, y0, x1, y1 in spec.walls:
        if x0 <= p[0] <= x1 and y0 <= p[1] <= y1:
            return True
    return False


def in_goal(spec: EnvSpec, s: np.ndarray) -> bool:
    return float(np.linalg.norm(np.asarray(s) - np.asarray(spec.goal))) <= spec.goal_radius


def env_step(spec: EnvSpec, state, action, t: int = 0) -> StepResult:
    """Advance one step from ``state``; ``t`` is the number of steps already taken this episode."""
    s = np.asarray(state, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64).reshape(spec.action_dim)
    if np.any(a < spec.feasible_low - 1e-12) or np.any(a > spec.feasible_high + 1e-12) or not np.all(np.isfinite(a)):
        raise InfeasibleActionError(f"action {a} outside feasible box; clip before stepping")
    delta = spec.step_scale * a
    truncated_time = t + 1 >= spec.max_episode_steps

    if spec.env_id == "line_walk_1d":
        s_next = np.clip(s + delta, 0.0, 1.0)
        r = -abs(float(s_next[0]) - spec.goal[0])
        return StepResult(s_next, r, False, truncated_time)

    # Sub-sample the segment so a move can never tunnel through a wall.
    s_next = s + delta
    if any(_blocked(spec, s + f * delta) for f in (0.25, 0.5, 0.75, 1.0)):
        s_next = s.copy()
    if in_goal(spec, s_next):
        return StepResult(s_next, 1.0, True, False)
    return StepResult(s_next, 0.0, False, truncated_time)


# ---------------------------------------------------------------------------
# Behavior policies


@dataclass(frozen=True)
class BehaviorSpec:
    kind: str = "clustered_noisy_expert"
    centers: tuple[tuple[float, ...], ...] = ((-0.6,), (0.6,))
    noise: float = 0.03
    episodes: int = 20
    # Probability the expert plays the center best aligned with its heading.
    expert_prob: float = 0.8
    # Share of uniformly random actions for kind="mixture".
    random_prob: float = 0.3

    def __post_init__(self):
        if self.kind not in BEHAVIOR_KINDS:
            raise ValueError(f"unknown behavior kind {self.kind!r}")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")


def default_behavior(env: EnvSpec, **overrides) -> BehaviorSpec:
    if env.env_id == "point_maze_2d":
        cfg = dict(centers=((0.6, 0.0), (-0.6, 0.0), (0.0, 0.6), (0.0, -0.6)), noise=0.05, episodes=60, expert_prob=0.75)
    else:
        cfg = dict(centers=((-0.6,), (0.6,)), noise=0.03, episodes=40, expert_prob=0.75)
    cfg.update(overrides)
    return BehaviorSpec(**cfg)


class _Expert:
    """Scripted heading: waypoints in order, then the goal."""

    def __init__(self, env: EnvSpec):
        self.targets = [np.array(w, dtype=np.float64) for w in env.waypoints] + [np.array(env.goal, dtype=np.float64)]
        self.idx = 0

    def heading(self, s: np.ndarray) -> np.ndarray:
        while self.idx < len(self.targets) - 1 and np.linalg.norm(self.targets[self.idx] - s) < 0.05:
            self.idx += 1
        d = self.targets[self.idx] - s
        n = np.linalg.norm(d)
        return d / n if n > 0 else d


def _behavior_action(env: EnvSpec, beh: BehaviorSpec, expert: _Expert, s, rng) -> np.ndarray:
    if beh.kind == "random" or (beh.kind == "mixture" and rng.random() < beh.random_prob):
        return rng.uniform(env.feasible_low, env.feasible_high)
    centers = np.array(beh.centers, dtype=np.float64).reshape(-1, env.action_dim)
    if rng.random() < beh.expert_prob:
        a = centers[int(np.argmax(centers @ expert.heading(s)))]
    else:
        a = centers[rng.integers(len(centers))]
    a = a + beh.noise * rng.standard_normal(env.action_dim)
    return np.clip(a, env.feasible_low, env.feasible_high)


def generate_offline_dataset(env: EnvSpec, behavior: BehaviorSpec, seed: int) -> TransitionDataset:
    """Roll out the behavior policy; transitions are stored in episode order."""
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(behavior.episodes):
        s = env_reset(env, rng)
        expert = _Expert(env)
        for t in range(env.max_episode_steps):
            a = _behavior_action(env, behavior, expert, s, rng)
            res = env_step(env, s, a, t)
            records.append(Transition(s, a, res.r, res.s_next, res.done, res.truncated))
            s = res.s_next
            if res.done or res.truncated:
                break
    return TransitionDataset.from_transitions(
        env.env_id, env.state_dim, env.action_dim, env.feasible_low, env.feasible_high, records
    )


def scripted_expert(env: EnvSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Full-speed straight-line policy toward the goal (ignores walls)."""

    def act(s):
        d = np.asarray(env.goal) - np.asarray(s)
        m = np.max(np.abs(d))
        return d / m if m > 0 else np.zeros(env.action_dim)

    return act


def evaluate_policy(env: EnvSpec, actor: Callable[[np.ndarray], np.ndarray], episodes: int, seed: int) -> dict[str, float]:
    """Run ``episodes`` rollouts; an episode counts toward goal_rate if it ever enters the goal disc."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    returns, hits = [], 0
    for _ in range(episodes):
        s = env_reset(env, rng)
        total, reached = 0.0, False
        for t in range(env.max_episode_steps):
            res = env_step(env, s, actor(s), t)
            total += res.r
            s = res.s_next
            reached = reached or in_goal(env, s)
            if res.done or res.truncated:
                break
        returns.append(total)
        hits += reached
    return {"mean_return": float(np.mean(returns)), "goal_rate": hits / episodes}
