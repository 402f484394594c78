"""Regression studies on cone-shaped targets.

The target is ``y = c_reward * ||x - center||`` on one disc (``cone``) or on
two disjoint discs (``two_cone``); nothing is observed elsewhere in the plane.
Fitting it with and without layer norm, at several reward scales and with
several activations, shows how the fitted surface extrapolates outside the
data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import nn_core
from .nn_core import MlpParams, MlpSpec
from .pars_trainer import DivergenceError, infeasible_from_uniform
from .seeding import derive_rng

ID_REGION, OOD_IN_REGION, OOD_OUT_REGION = 0, 1, 2


@dataclass(frozen=True)
class RegressionTask:
    kind: str = "cone"
    c_reward: float = 1.0
    radius: float = 0.5
    n_samples: int = 2048
    extent: float = 1.0
    use_ln: bool = True
    activation: str = "relu"
    hidden_dims: tuple[int, ...] = (256, 256)
    lr: float = 1e-3
    batch_size: int = 256
    # Penalty at points drawn from [-2m, -m) U [m, 2m) per axis, pulling predictions to 0.
    pa_alpha: float = 0.0
    pa_multiplier: float = 5.0
    # two_cone: disc centers at (+-separation, 0)
    separation: float = 0.5

    def __post_init__(self):
        if self.kind not in ("cone", "two_cone"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if not self.c_reward > 0:
            raise ValueError("c_reward must be positive")
        if self.extent < self.radius:
            raise ValueError("grid extent must cover the data discs")

    @property
    def centers(self) -> np.ndarray:
        if self.kind == "cone":
            return np.zeros((1, 2))
        return np.array([[-self.separation, 0.0], [self.separation, 0.0]])

    @property
    def disc_radius(self) -> float:
        # Two-cone discs shrink so a gap of 0.2 * separation stays between them.
        return self.radius if self.kind == "cone" else 0.9 * self.separation

    def spec(self) -> MlpSpec:
        return MlpSpec(2, 1, self.hidden_dims, self.activation, self.use_ln)


def cone_target(task: RegressionTask, x: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(x[:, None, :] - task.centers[None, :, :], axis=2)
    return task.c_reward * d.min(axis=1)


def _sample_disc(rng, n: int, center: np.ndarray, radius: float) -> np.ndarray:
    out = np.empty((0, 2))
    while len(out) < n:
        cand = rng.uniform(-radius, radius, size=(2 * n, 2))
        cand = cand[np.sum(cand * cand, axis=1) <= radius * radius]
        out = np.vstack([out, cand])
    return out[:n] + center


def make_cone_dataset(task: RegressionTask, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = derive_rng(seed, "didactic/data")
    x = _sample_disc(rng, task.n_samples, np.zeros(2), task.radius)
    return x, cone_target(replace(task, kind="cone"), x)


def make_two_cone_dataset(task: RegressionTask, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = derive_rng(seed, "didactic/data")
    half = task.n_samples // 2
    parts = [
        _sample_disc(rng, half, c, task.disc_radius) for c in task.centers[:1]
    ] + [_sample_disc(rng, task.n_samples - half, task.centers[1], task.disc_radius)]
    x = np.vstack(parts)
    return x, cone_target(task, x)


def make_dataset(task: RegressionTask, seed: int) -> tuple[np.ndarray, np.ndarray]:
    return make_cone_dataset(task, seed) if task.kind == "cone" else make_two_cone_dataset(task, seed)


def fit_regressor(task: RegressionTask, spec: MlpSpec | None, steps: int, seed: int) -> MlpParams:
    """Minibatch MSE fit with Adam; optionally adds the far-field penalty."""
    spec = spec or task.spec()
    x, y = make_dataset(task, seed)
    params = nn_core.mlp_init(spec, derive_rng(seed, "didactic/init"))
    opt = nn_core.adam_init(params, task.lr)
    rng = derive_rng(seed, "didactic/sample")
    rng_pa = derive_rng(seed, "didactic/penalty")
    limit = 1e3 * float(np.max(np.abs(y))) if np.any(y) else 1e3
    b = task.batch_size
    for _ in range(steps):
        idx = rng.integers(0, len(x), size=b)
        xb = x[idx]
        if task.pa_alpha > 0:
            far = infeasible_from_uniform(rng_pa.uniform(-1.0, 1.0, size=(b, 2)), task.pa_multiplier)
            xb = np.vstack([xb, far])
        pred, trace = nn_core.mlp_forward(params, xb, want_trace=True)
        pred = pred[:, 0]
        rows = len(xb)
        g = np.empty(rows)
        g[:b] = 2.0 * (pred[:b] - y[idx]) / b * rows
        if task.pa_alpha > 0:
            g[b:] = task.pa_alpha * 2.0 * pred[b:] / b * rows
        if not np.all(np.isfinite(pred)) or np.mean(np.abs(pred[:b])) > limit:
            raise DivergenceError("regression diverged")
        grad, _ = nn_core.mlp_backward(params, trace, g[:, None])
        params, opt = nn_core.adam_step(params, grad, opt)
    return params


def training_mse(params: MlpParams, task: RegressionTask, seed: int) -> float:
    x, y = make_dataset(task, seed)
    pred, _ = nn_core.mlp_forward(params, x)
    return float(np.mean((pred[:, 0] - y) ** 2))


def region_of(task: RegressionTask, pts: np.ndarray) -> np.ndarray:
    """ID inside a data disc, OOD-in inside the discs' hull but outside the discs, OOD-out elsewhere."""
    r = task.disc_radius
    d = np.linalg.norm(pts[:, None, :] - task.centers[None, :, :], axis=2)
    region = np.full(len(pts), OOD_OUT_REGION)
    if task.kind == "two_cone":
        # Hull of two equal discs on the x-axis: the stadium |y| <= r between the centers.
        between = (np.abs(pts[:, 1]) <= r) & (np.abs(pts[:, 0]) <= task.separation)
        region[between] = OOD_IN_REGION
    region[d.min(axis=1) <= r] = ID_REGION
    return region


def make_grid(extent: float, resolution: int) -> np.ndarray:
    """Row-major grid; row 0 is the top edge (largest x2)."""
    axis = np.linspace(-extent, extent, resolution)
    x1, x2 = np.meshgrid(axis, axis[::-1])
    return np.column_stack([x1.ravel(), x2.ravel()])


@dataclass
class RegionStats:
    id_max: float
    id_mean: float
    ood_out_max: float
    ood_out_mean: float
    ood_in_max: float = float("nan")
    ood_in_mean: float = float("nan")
    grid_values: np.ndarray = field(default=None, repr=False)


def region_stats(params: MlpParams, task: RegressionTask, grid_resolution: int = 81) -> RegionStats:
    """Grid predictions over ``[-extent, extent]^2`` split by region, divided by ``c_reward``."""
    grid = make_grid(task.extent, grid_resolution)
    pred, _ = nn_core.mlp_forward(params, grid)
    pred = pred[:, 0] / task.c_reward
    reg = region_of(task, grid)

    def stat(mask, fn):
        return float(fn(pred[mask])) if np.any(mask) else float("nan")

    return RegionStats(
        stat(reg == ID_REGION, np.max),
        stat(reg == ID_REGION, np.mean),
        stat(reg == OOD_OUT_REGION, np.max),
        stat(reg == OOD_OUT_REGION, np.mean),
        stat(reg == OOD_IN_REGION, np.max),
        stat(reg == OOD_IN_REGION, np.mean),
        pred.reshape(grid_resolution, grid_resolution),
    )


def activation_sweep(task: RegressionTask, activations: Iterable[str], steps: int, seed: int, grid_resolution: int = 81) -> dict[str, RegionStats]:
    out = {}
    for act in activations:
        t = replace(task, activation=act)
        out[act] = region_stats(fit_regressor(t, None, steps, seed), t, grid_resolution)
    return out


def panel_name(task: RegressionTask, seed: int) -> str:
    ln = "ln" if task.use_ln else "noln"
    pa = "_pa" if task.pa_alpha > 0 else ""
    return f"{task.kind}_{ln}{pa}_{task.activation}_c{task.c_reward:g}_e{task.extent:g}_s{seed}"
