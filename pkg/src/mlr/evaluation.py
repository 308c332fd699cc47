"""Policy evaluation and aggregate score statistics (HNS, IQM, OG, profiles)."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import DegenerateReference, InvalidSpec


def evaluate_policy(agent, env, episodes: int = 10, seed: Optional[int] = None):
    """Mean and std of undiscounted returns over full episodes in EVAL mode."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    returns = []
    for ep in range(episodes):
        obs = env.reset(seed=None if seed is None else seed + ep)
        total, done = 0.0, False
        while not done:
            obs, reward, done, _ = env.step(agent.act(obs, "eval"))
            total += reward
        returns.append(total)
    returns = np.asarray(returns, dtype=np.float64)
    return float(returns.mean()), float(returns.std())


def hns(score, random_ref, human_ref):
    """(S_A - S_R) / (S_H - S_R); accepts scalars or arrays."""
    random_ref = np.asarray(random_ref, dtype=np.float64)
    human_ref = np.asarray(human_ref, dtype=np.float64)
    if np.any(human_ref == random_ref):
        raise DegenerateReference("human and random reference scores coincide")
    out = (np.asarray(score, dtype=np.float64) - random_ref) / (human_ref - random_ref)
    return float(out) if out.ndim == 0 else out


def trimmed_mean(x, proportion: float = 0.25) -> float:
    """Mean after removing ``proportion`` of the mass from each tail.

    Boundary values that straddle the cut contribute the fraction of their
    unit weight that lies inside the kept range, so non-integer cut points
    are handled without rounding.
    """
    v = np.sort(np.asarray(x, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        raise ValueError("need at least one value")
    if not 0.0 <= proportion < 0.5:
        raise ValueError("proportion must lie in [0, 0.5)")
    g = proportion * n
    lo = np.arange(n, dtype=np.float64)
    w = np.clip(np.minimum(lo + 1, n - g) - np.maximum(lo, g), 0.0, 1.0)
    return float((w * v).sum() / w.sum())


def iqm(x) -> float:
    """Interquartile mean: the middle 50% of the pooled values."""
    return trimmed_mean(x, 0.25)


def optimality_gap(values, threshold: float = 1.0) -> float:
    """Mean shortfall below ``threshold``; values above it contribute 0."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("need at least one value")
    return float(np.mean(threshold - np.minimum(v, threshold)))


def performance_profile(x, taus) -> np.ndarray:
    """Fraction of (run, task) scores strictly above each tau, averaged per run."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    taus = np.asarray(taus, dtype=np.float64)
    if taus.size > 1 and np.any(np.diff(taus) < 0):
        raise ValueError("tau grid must be sorted")
    above = x[None, :, :] > taus[:, None, None]
    return above.mean(axis=2).mean(axis=1)


@dataclass
class ScoreMatrix:
    """Raw scores [M runs, N tasks] with per-task (random, human) references."""

    tasks: List[str]
    scores: np.ndarray
    random_refs: Optional[np.ndarray] = None
    human_refs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        M, N = self.scores.shape
        if M < 1 or N < 1 or N != len(self.tasks):
            raise InvalidSpec(f"score matrix {self.scores.shape} does not match {len(self.tasks)} tasks")
        if (self.random_refs is None) != (self.human_refs is None):
            raise InvalidSpec("give both random and human references or neither")
        if self.random_refs is not None:
            self.random_refs = np.asarray(self.random_refs, dtype=np.float64)
            self.human_refs = np.asarray(self.human_refs, dtype=np.float64)
            if np.any(self.random_refs == self.human_refs):
                raise DegenerateReference("human and random reference scores coincide")

    def normalized(self) -> np.ndarray:
        if self.random_refs is None:
            return self.scores
        return hns(self.scores, self.random_refs[None, :], self.human_refs[None, :])


@dataclass
class EvalReport:
    task_means: Dict[str, float]
    task_medians: Dict[str, float]
    hns_matrix: np.ndarray
    iqm: float
    og: float
    taus: np.ndarray
    profile: np.ndarray = field(repr=False)


def report(matrix: ScoreMatrix, taus=None, og_threshold: float = 1.0) -> EvalReport:
    norm = matrix.normalized()
    taus = np.linspace(0.0, max(2.0, float(norm.max())), 101) if taus is None else np.asarray(taus)
    return EvalReport(
        task_means={t: float(matrix.scores[:, i].mean()) for i, t in enumerate(matrix.tasks)},
        task_medians={t: float(np.median(matrix.scores[:, i])) for i, t in enumerate(matrix.tasks)},
        hns_matrix=norm,
        iqm=iqm(norm),
        og=optimality_gap(norm, og_threshold),
        taus=taus,
        profile=performance_profile(norm, taus),
    )


def write_scores(path, matrix: ScoreMatrix) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(matrix.tasks)
        for row in matrix.scores:
            w.writerow([repr(float(v)) for v in row])


def read_scores(path, random_refs=None, human_refs=None) -> ScoreMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise InvalidSpec(f"{path}: need a header row and at least one run")
    return ScoreMatrix(rows[0], np.array([[float(v) for v in r] for r in rows[1:]]),
                       random_refs, human_refs)


def bootstrap_ci(x, statistic=iqm, reps: int = 2000, alpha: float = 0.05, seed: int = 0):
    """Percentile bootstrap interval over runs (rows) of a score matrix.

    Plain resampling of runs; the stratified variant is not implemented.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rng = np.random.default_rng(seed)
    stats = np.array([statistic(x[rng.integers(0, len(x), len(x))]) for _ in range(reps)])
    return float(np.quantile(stats, alpha / 2)), float(np.quantile(stats, 1 - alpha / 2))


# Reference scores for the discrete benchmark tasks: (random, human).
ATARI_REFERENCES: Dict[str, tuple] = {
    "Alien": (227.8, 7127.7),
    "Pong": (-20.7, 14.6),
    "UpNDown": (533.4, 11693.2),
}
