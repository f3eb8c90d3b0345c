import itertools

import numpy as np
import pytest

from scalesel.env import (
    EnvConfig,
    EnvState,
    EpisodeTrace,
    MatchingEnv,
    SubsetScorer,
    Transition,
    beam_search_baseline,
    exhaustive_oracle,
    random_selection_eval,
    subset_csv_rows,
)
from scalesel.errors import (
    EmptySelectionError,
    InvalidActionError,
    UnsupportedError,
    ValidationError,
)
from scalesel.pyramid import LevelSpec, SyntheticSpec, Warp, gen_synthetic_pair

from conftest import planted_pair


def table_score(scores: dict[tuple[int, ...], float], default=0.0):
    def fn(selected):
        return scores.get(tuple(sorted(selected)), default)

    return fn


def tiny_pair(num_levels, seed=0, noise=0.35):
    """Cheap synthetic pair with the requested level count (for fake-score envs).

    Nonzero noise keeps every feature cell away from exact ReLU kinks, which
    matters for the finite-difference gradient tests.
    """
    levels = tuple(LevelSpec(2, 4, 4, 8.0) for _ in range(num_levels))
    spec = SyntheticSpec(levels, (0,), 2, noise, 4, Warp("identity"), seed=seed, global_dim=4)
    return gen_synthetic_pair(spec)


def make_env(num_levels, score_fn, cost=0.4, beta=20.0):
    config = EnvConfig(costs=np.full(num_levels, cost), beta=beta)
    return MatchingEnv([tiny_pair(num_levels)], config, score_fn=score_fn)


@pytest.fixture
def env4():
    """4-level env with a constructed score table (no matching involved)."""
    table = {
        (0,): 0.2, (1,): 0.5, (2,): 0.3, (3,): 0.1,
        (0, 1): 0.9, (1, 2): 0.6,
    }
    return make_env(4, table_score(table, default=0.05))


# ---------------------------------------------------------------------------
# reset / step / mask


def test_reset_empty_and_pure(env4):
    s1 = env4.reset()
    s2 = env4.reset()
    assert s1.selected == () and not s1.done
    assert s1 == s2


def test_step_select_cost(env4):
    state, reward, done = env4.step(env4.reset(), 3)
    assert reward == pytest.approx(-0.4)
    assert not done and state.selected == (3,)


def test_step_terminate_reward(env4):
    env = make_env(4, table_score({(2,): 0.86}))
    state, _, _ = env.step(env.reset(), 2)
    _, reward, done = env.step(state, env.terminate_action)
    assert done and reward == pytest.approx(20.0 * 0.86)


def test_step_double_select_rejected(env4):
    state, _, _ = env4.step(env4.reset(), 3)
    with pytest.raises(InvalidActionError):
        env4.step(state, 3)


def test_terminate_on_empty_rejected(env4):
    with pytest.raises(InvalidActionError):
        env4.step(env4.reset(), env4.terminate_action)


def test_mask_fresh_state(env4):
    mask = env4.action_mask(env4.reset())
    assert mask[:4].all() and not mask[4]


def test_mask_partial_selection(env4):
    mask = env4.action_mask(EnvState(selected=(0, 2)))
    assert list(mask) == [False, True, False, True, True]


def test_mask_all_selected_forces_terminate(env4):
    mask = env4.action_mask(EnvState(selected=(0, 1, 2, 3)))
    assert list(mask) == [False, False, False, False, True]


def test_episode_return_identity():
    env = make_env(4, table_score({(1, 3): 0.73}))
    state = env.reset()
    rewards = []
    for action in (1, 3, env.terminate_action):
        state, r, done = env.step(state, action)
        rewards.append(r)
    assert done
    expected = env.episode_return((1, 3))
    assert abs(sum(rewards) - expected) < 1e-9
    assert expected == pytest.approx(20.0 * 0.73 - 0.8)


# ---------------------------------------------------------------------------
# score


def test_score_informative_identity_pair_is_one():
    pairs = [planted_pair(seed=s, noise_sigma=0.0) for s in range(3)]
    scorer = SubsetScorer(pairs, alpha=0.1)
    assert scorer((1, 4)) == 1.0


def test_score_noise_level_is_poor():
    # keypoints live on a sparse coarse grid; a pure-noise level must not match them
    levels = (
        LevelSpec(4, 8, 8, 8.0),
        LevelSpec(4, 8, 8, 8.0),
        LevelSpec(4, 4, 4, 16.0),
    )
    pairs = [
        gen_synthetic_pair(
            SyntheticSpec(levels, (1,), 3, 0.1, 4, Warp("identity"), seed=100 + s)
        )
        for s in range(50)
    ]
    scorer = SubsetScorer(pairs, alpha=0.1)
    assert scorer((2,)) < 0.5
    assert scorer((1,)) > scorer((2,))


def test_score_in_unit_interval():
    pairs = [planted_pair(seed=s) for s in range(2)]
    scorer = SubsetScorer(pairs)
    for sel in [(0,), (1,), (0, 1, 2), (0, 1, 2, 3, 4, 5)]:
        assert 0.0 <= scorer(sel) <= 1.0


def test_score_empty_selection_rejected():
    scorer = SubsetScorer([planted_pair(seed=0)])
    with pytest.raises(EmptySelectionError):
        scorer(())


def test_score_memoization_returns_same_object():
    scorer = SubsetScorer([planted_pair(seed=0)])
    assert scorer((1, 4)) == scorer((4, 1))


# ---------------------------------------------------------------------------
# transitions / traces


def test_transition_requires_positive_mu():
    with pytest.raises(ValidationError):
        Transition((), 0, -0.4, (0,), False, 0.0)


def test_trace_requires_terminal_tail():
    t_mid = Transition((), 0, -0.4, (0,), False, 1.0)
    with pytest.raises(ValidationError):
        EpisodeTrace((t_mid,), 0, 0.0)


# ---------------------------------------------------------------------------
# exhaustive oracle


def test_oracle_cardinality_tie_break():
    table = {(0,): 0.3, (1,): 0.5, (0, 1): 0.5}
    subset, score = exhaustive_oracle(
        None, EnvConfig(costs=np.full(2, 0.4)), num_levels=2, score_fn=table_score(table)
    )
    assert subset == (1,) and score == 0.5


def test_oracle_refuses_large_n():
    with pytest.raises(UnsupportedError):
        exhaustive_oracle(
            None, EnvConfig(costs=np.full(13, 0.4)), num_levels=13, score_fn=lambda s: 0.0
        )


def test_oracle_on_planted_data_contains_informative():
    pairs = [planted_pair(seed=s) for s in range(4)]
    subset, score = exhaustive_oracle(pairs, EnvConfig.uniform(6))
    assert set(subset) & {1, 4}
    assert score >= 0.9


def test_oracle_dominates_everything():
    rng = np.random.default_rng(0)
    table = {}
    for size in range(1, 5):
        for sub in itertools.combinations(range(4), size):
            table[sub] = float(rng.random())
    fn = table_score(table)
    cfg = EnvConfig(costs=np.full(4, 0.4))
    _, oracle_score = exhaustive_oracle(None, cfg, num_levels=4, score_fn=fn)
    _, beam_score = beam_search_baseline(None, cfg, 1, num_levels=4, score_fn=fn)
    rand = random_selection_eval(None, cfg, 2, 8, seed=1, num_levels=4, score_fn=fn)
    assert oracle_score >= beam_score >= 0.0
    assert all(oracle_score >= s for _, s in rand)


def test_raising_cost_never_raises_optimal_return():
    rng = np.random.default_rng(3)
    table = {}
    for size in range(1, 4):
        for sub in itertools.combinations(range(3), size):
            table[sub] = float(rng.random())
    fn = table_score(table)

    def best_return(costs):
        best = -np.inf
        for sub in table:
            best = max(best, 20.0 * fn(sub) - sum(costs[i] for i in sub))
        return best

    base = np.full(3, 0.4)
    raised = base.copy()
    raised[1] = 1.5
    assert best_return(raised) <= best_return(base) + 1e-12


# ---------------------------------------------------------------------------
# beam search


def test_beam_full_width_equals_oracle():
    rng = np.random.default_rng(7)
    table = {}
    for size in range(1, 5):
        for sub in itertools.combinations(range(4), size):
            table[sub] = float(rng.random())
    fn = table_score(table)
    cfg = EnvConfig(costs=np.full(4, 0.4))
    o_sub, o_score = exhaustive_oracle(None, cfg, num_levels=4, score_fn=fn)
    b_sub, b_score = beam_search_baseline(None, cfg, 2**4, num_levels=4, score_fn=fn)
    assert b_score == o_score and b_sub == o_sub


def test_beam_width_one_misses_joint_optimum():
    # the best singleton (2) cannot be extended, so greedy prefix search
    # never sees the winning pair {0, 1}
    table = {(0,): 0.5, (1,): 0.5, (2,): 0.625, (0, 1): 1.0, (0, 2): 0.6, (1, 2): 0.6}
    fn = table_score(table, default=0.1)
    cfg = EnvConfig(costs=np.full(3, 0.4))
    _, o_score = exhaustive_oracle(None, cfg, num_levels=3, score_fn=fn)
    _, b_score = beam_search_baseline(None, cfg, 1, num_levels=3, score_fn=fn)
    assert o_score == 1.0
    assert b_score < o_score


def test_beam_returns_sorted_subset():
    rng = np.random.default_rng(11)
    table = {}
    for size in range(1, 6):
        for sub in itertools.combinations(range(5), size):
            table[sub] = float(rng.random())
    subset, _ = beam_search_baseline(
        None, EnvConfig(costs=np.full(5, 0.4)), 3, num_levels=5, score_fn=table_score(table)
    )
    assert list(subset) == sorted(subset)


# ---------------------------------------------------------------------------
# random baseline


def test_random_full_k_returns_full_set():
    res = random_selection_eval(
        None, EnvConfig(costs=np.full(3, 0.4)), 3, 5, seed=0, num_levels=3, score_fn=lambda s: 0.5
    )
    assert all(sub == (0, 1, 2) for sub, _ in res)


def test_random_deterministic_per_seed():
    fn = lambda s: float(sum(s))
    cfg = EnvConfig(costs=np.full(6, 0.4))
    r1 = random_selection_eval(None, cfg, 2, 10, seed=9, num_levels=6, score_fn=fn)
    r2 = random_selection_eval(None, cfg, 2, 10, seed=9, num_levels=6, score_fn=fn)
    assert r1 == r2


def test_random_k_out_of_range():
    with pytest.raises(ValidationError):
        random_selection_eval(
            None, EnvConfig(costs=np.full(3, 0.4)), 4, 1, seed=0, num_levels=3, score_fn=lambda s: 0.0
        )


def test_random_below_restricted_oracle():
    pairs = [planted_pair(seed=s) for s in range(4)]
    cfg = EnvConfig.uniform(6)
    scorer = SubsetScorer(pairs, alpha=cfg.score_alpha)
    results = random_selection_eval(None, cfg, 2, 10, seed=5, num_levels=6, score_fn=scorer)
    best_k2 = max(scorer(sub) for sub in itertools.combinations(range(6), 2))
    assert np.mean([s for _, s in results]) < best_k2


def test_subset_csv_rows_layout():
    rows = subset_csv_rows([((1, 4), 0.5), ((0,), 0.25)])
    assert rows[0] == "subset,k,score"
    assert rows[1] == "1;4,2,0.5"
    assert rows[2] == "0,1,0.25"
