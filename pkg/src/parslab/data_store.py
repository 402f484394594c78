"""Transition datasets, their text persistence, replay buffers and batch sampling.

Rewards are always stored unscaled; reward scaling happens in the trainer.

Dataset file layout (one record per line, single-space separated)::

    parslab-dataset v1 <env_id> <state_dim> <action_dim> <low_1..low_A> <high_1..high_A>
    <s_1..s_S> <a_1..a_A> <r> <s'_1..s'_S> <done> <truncated>
    ...

Reals use the shortest decimal that round-trips, flags are ``0``/``1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_TAG = "parslab-dataset"
_VERSION = "v1"


class DatasetParseError(ValueError):
    """Malformed dataset file; the message names the offending line."""


class DatasetSchemaError(ValueError):
    """A record is inconsistent with the header's dimensions."""


class EmptySourceError(ValueError):
    """Sampling was requested from a source that holds no transitions."""


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    truncated: bool = False


@dataclass
class Batch:
    """Column-stacked transitions; every array's first axis is the batch index."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return self.r.shape[0]

    @staticmethod
    def concat(parts: list["Batch"]) -> "Batch":
        return Batch(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("s", "a", "r", "s_next", "done")))


@dataclass
class TransitionDataset:
    """An offline dataset stored column-wise, in the order transitions were generated."""

    env_id: str
    state_dim: int
    action_dim: int
    feasible_low: np.ndarray
    feasible_high: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    truncated: np.ndarray = field(default=None)

    def __post_init__(self):
        self.feasible_low = np.asarray(self.feasible_low, dtype=np.float64).reshape(self.action_dim)
        self.feasible_high = np.asarray(self.feasible_high, dtype=np.float64).reshape(self.action_dim)
        n = len(self.r)
        self.s = np.asarray(self.s, dtype=np.float64).reshape(n, self.state_dim)
        self.a = np.asarray(self.a, dtype=np.float64).reshape(n, self.action_dim)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(n)
        self.s_next = np.asarray(self.s_next, dtype=np.float64).reshape(n, self.state_dim)
        self.done = np.asarray(self.done, dtype=bool).reshape(n)
        if self.truncated is None:
            self.truncated = np.zeros(n, dtype=bool)
        self.truncated = np.asarray(self.truncated, dtype=bool).reshape(n)

    @classmethod
    def from_transitions(cls, env_id, state_dim, action_dim, low, high, transitions) -> "TransitionDataset":
        transitions = list(transitions)
        return cls(
            env_id,
            state_dim,
            action_dim,
            low,
            high,
            s=np.array([t.s for t in transitions], dtype=np.float64).reshape(-1, state_dim),
            a=np.array([t.a for t in transitions], dtype=np.float64).reshape(-1, action_dim),
            r=np.array([t.r for t in transitions], dtype=np.float64),
            s_next=np.array([t.s_next for t in transitions], dtype=np.float64).reshape(-1, state_dim),
            done=np.array([t.done for t in transitions], dtype=bool),
            truncated=np.array([t.truncated for t in transitions], dtype=bool),
        )

    def __len__(self) -> int:
        return self.r.shape[0]

    @property
    def transitions(self) -> list[Transition]:
        return [self[i] for i in range(len(self))]

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i], bool(self.done[i]), bool(self.truncated[i]))

    def batch(self, idx) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx].astype(np.float64))

    def with_rewards(self, r) -> "TransitionDataset":
        return TransitionDataset(
            self.env_id, self.state_dim, self.action_dim, self.feasible_low, self.feasible_high,
            self.s, self.a, r, self.s_next, self.done, self.truncated,
        )

    def equals(self, other: "TransitionDataset") -> bool:
        if (self.env_id, self.state_dim, self.action_dim) != (other.env_id, other.state_dim, other.action_dim):
            return False
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("feasible_low", "feasible_high", "s", "a", "r", "s_next", "done", "truncated")
        )


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, t: Transition) -> None:
        i = self.inserted % self.capacity
        self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i] = t.s, t.a, t.r, t.s_next, float(t.done)
        self.inserted += 1

    def _ordered_slots(self) -> np.ndarray:
        if self.inserted <= self.capacity:
            return np.arange(self.inserted)
        start = self.inserted % self.capacity
        return (start + np.arange(self.capacity)) % self.capacity

    def contents(self) -> list[Transition]:
        """Transitions currently held, oldest first."""
        return [
            Transition(self.s[i].copy(), self.a[i].copy(), float(self.r[i]), self.s_next[i].copy(), bool(self.done[i]))
            for i in self._ordered_slots()
        ]

    def batch(self, idx) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])


def save_dataset(ds: TransitionDataset, path) -> None:
    header = [_TAG, _VERSION, ds.env_id, str(ds.state_dim), str(ds.action_dim)]
    header += [repr(float(v)) for v in ds.feasible_low] + [repr(float(v)) for v in ds.feasible_high]
    lines = [" ".join(header)]
    for i in range(len(ds)):
        fields = [repr(float(v)) for v in ds.s[i]]
        fields += [repr(float(v)) for v in ds.a[i]]
        fields.append(repr(float(ds.r[i])))
        fields += [repr(float(v)) for v in ds.s_next[i]]
        fields += [str(int(ds.done[i])), str(int(ds.truncated[i]))]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_float(tok: str, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise DatasetParseError(f"line {lineno}: cannot parse {tok!r} as a real number") from None


def _parse_flag(tok: str, lineno: int) -> bool:
    if tok not in ("0", "1"):
        raise DatasetParseError(f"line {lineno}: expected flag 0 or 1, got {tok!r}")
    return tok == "1"


def load_dataset(path) -> TransitionDataset:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DatasetParseError("line 1: missing header")
    head = lines[0].split()
    if len(head) < 5 or head[0] != _TAG or head[1] != _VERSION:
        raise DatasetParseError(f"line 1: expected '{_TAG} {_VERSION} <env_id> <state_dim> <action_dim> ...'")
    env_id = head[2]
    try:
        state_dim, action_dim = int(head[3]), int(head[4])
    except ValueError:
        raise DatasetParseError("line 1: state_dim and action_dim must be integers") from None
    if state_dim < 1 or action_dim < 1:
        raise DatasetSchemaError("line 1: dimensions must be positive")
    if len(head) != 5 + 2 * action_dim:
        raise DatasetSchemaError(f"line 1: expected {2 * action_dim} bound values for action_dim={action_dim}")
    bounds = [_parse_float(t, 1) for t in head[5:]]
    low, high = bounds[:action_dim], bounds[action_dim:]

    width = 2 * state_dim + action_dim + 3
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        toks = line.split()
        if not toks:
            continue
        if len(toks) != width:
            raise DatasetSchemaError(
                f"line {lineno}: expected {width} fields for state_dim={state_dim}, action_dim={action_dim}, got {len(toks)}"
            )
        vals = [_parse_float(t, lineno) for t in toks[:-2]]
        done, trunc = _parse_flag(toks[-2], lineno), _parse_flag(toks[-1], lineno)
        s = vals[:state_dim]
        a = vals[state_dim : state_dim + action_dim]
        r = vals[state_dim + action_dim]
        s_next = vals[state_dim + action_dim + 1 :]
        records.append(Transition(np.array(s), np.array(a), r, np.array(s_next), done, trunc))
    return TransitionDataset.from_transitions(env_id, state_dim, action_dim, low, high, records)


def sample_batch(src: ReplayBuffer | TransitionDataset, n: int, rng: np.random.Generator) -> Batch:
    """Uniform with-replacement sample of ``n`` transitions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    size = len(src)
    if size == 0:
        raise EmptySourceError("cannot sample from an empty source")
    return src.batch(rng.integers(0, size, size=n))


def split_counts(n: int, offline_fraction: float) -> tuple[int, int]:
    """Offline/online counts for a mixed batch; offline gets n*fraction rounded half up."""
    if not 0.0 <= offline_fraction <= 1.0:
        raise ValueError("offline_fraction must lie in [0, 1]")
    n_off = int(np.floor(n * offline_fraction + 0.5))
    return n_off, n - n_off


def mixed_sample(offline: TransitionDataset, online: ReplayBuffer, offline_fraction: float, n: int, rng) -> Batch:
    n_off, n_on = split_counts(n, offline_fraction)
    parts = []
    if n_off:
        parts.append(sample_batch(offline, n_off, rng))
    if n_on:
        parts.append(sample_batch(online, n_on, rng))
    return Batch.concat(parts)


def dataset_stats(ds: TransitionDataset) -> dict[str, float]:
    if len(ds) == 0:
        raise EmptySourceError("dataset_stats needs at least one transition")
    max_norm = float(np.linalg.norm(np.maximum(np.abs(ds.feasible_low), np.abs(ds.feasible_high))))
    return {
        "r_min": float(ds.r.min()),
        "r_max": float(ds.r.max()),
        "mean_action_norm": float(np.linalg.norm(ds.a, axis=1).mean() / max_norm),
        "max_possible_norm": max_norm,
    }


def write_stats_csv(stats: dict[str, float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in stats.items():
            w.writerow([k, repr(float(v))])
