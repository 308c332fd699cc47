import numpy as np
import pytest

from mlr.errors import DegenerateReference, InvalidSpec
from mlr.evaluation import (ATARI_REFERENCES, ScoreMatrix, bootstrap_ci, evaluate_policy, hns, iqm,
                            optimality_gap, performance_profile, read_scores, report, trimmed_mean,
                            write_scores)
from oracles import brute_iqm, brute_og, brute_profile


def test_iqm_small_examples():
    assert iqm([1, 2, 3, 4]) == 2.5
    assert iqm(np.arange(8)) == 3.5
    # n = 5: cut of 1.25 items per tail
    assert iqm([1, 2, 3, 4, 5]) == pytest.approx((0.75 * 2 + 3 + 0.75 * 4) / 2.5)
    assert iqm([7.0]) == 7.0


@pytest.mark.parametrize("seed", range(20))
def test_iqm_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=rng.integers(1, 60)) * 10
    assert abs(iqm(x) - brute_iqm(x)) <= 1e-9


def test_trimmed_mean_zero_proportion_is_mean():
    x = np.random.default_rng(0).random(17)
    assert trimmed_mean(x, 0.0) == pytest.approx(x.mean())
    with pytest.raises(ValueError):
        trimmed_mean(x, 0.5)
    with pytest.raises(ValueError):
        iqm([])


def test_optimality_gap():
    assert optimality_gap([0.5, 1.5, 1.0, 0.0]) == pytest.approx(0.375)
    # dyadic values keep every partial sum exact, so the comparison can be exact
    x = np.random.default_rng(1).integers(-64, 192, size=64) / 64
    assert optimality_gap(x) == brute_og(x)
    assert optimality_gap([2.0, 3.0]) == 0.0


def test_performance_profile():
    x = np.random.default_rng(2).normal(1, 1, size=(5, 7))
    taus = np.linspace(-3, 4, 29)
    assert np.array_equal(performance_profile(x, taus), brute_profile(x, taus))
    assert performance_profile(x, [-100.0])[0] == 1.0
    assert performance_profile(x, [100.0])[0] == 0.0
    # strict inequality at tau equal to a score
    assert performance_profile([[1.0, 2.0]], [1.0])[0] == 0.5
    with pytest.raises(ValueError):
        performance_profile(x, [1.0, 0.0])


def test_hns():
    assert hns(990.1, *ATARI_REFERENCES["Alien"]) == pytest.approx(0.1105, abs=1e-4)
    assert hns(5.0, 0.0, 10.0) == 0.5
    with pytest.raises(DegenerateReference):
        hns(1.0, 2.0, 2.0)


def test_score_matrix_and_report(tmp_path):
    tasks = ["Alien", "Pong"]
    refs = np.array([ATARI_REFERENCES[t] for t in tasks])
    m = ScoreMatrix(tasks, [[990.1, -20.7], [7127.7, 14.6]], refs[:, 0], refs[:, 1])
    assert np.allclose(m.normalized(), [[0.1105, 0.0], [1.0, 1.0]], atol=1e-4)
    r = report(m, taus=[0.0, 0.5])
    assert r.task_means["Pong"] == pytest.approx(-3.05)
    assert r.og == pytest.approx(brute_og(m.normalized()))
    assert r.profile.tolist() == [0.75, 0.5]
    path = tmp_path / "scores.csv"
    write_scores(path, m)
    back = read_scores(path, refs[:, 0], refs[:, 1])
    assert back.tasks == tasks and np.array_equal(back.scores, m.scores)
    with pytest.raises(InvalidSpec):
        ScoreMatrix(["a"], [[1.0, 2.0]])


def test_bootstrap_interval_brackets_point_estimate():
    x = np.random.default_rng(0).normal(size=(20, 3))
    lo, hi = bootstrap_ci(x, reps=200)
    assert lo <= iqm(x) <= hi


class _Const:
    def act(self, obs, mode):
        return 1


class _Counter:
    """Deterministic env: three steps per episode with reward 1 each."""

    def reset(self, seed=None):
        self.t = 0
        return 0

    def step(self, action):
        self.t += 1
        return self.t, 1.0, self.t == 3, {}


def test_evaluate_policy_deterministic():
    mean, std = evaluate_policy(_Const(), _Counter(), episodes=4, seed=0)
    assert (mean, std) == (3.0, 0.0)
    with pytest.raises(ValueError):
        evaluate_policy(_Const(), _Counter(), episodes=0)
