"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete. Criterion 5 trains the full pipeline for three seeds
and dominates the runtime.
"""

import itertools
import time

import numpy as np
import pytest

from scalesel.env import (
    EnvConfig,
    MatchingEnv,
    beam_search_baseline,
    exhaustive_oracle,
    random_selection_eval,
)
from scalesel.hough import (
    hough_vote,
    match_pair,
    reweight,
    transfer_keypoints,
)
from scalesel.metrics import mask_metrics, pck
from scalesel.pyramid import (
    FeatureMap,
    FeaturePyramid,
    KeypointSet,
    SyntheticSpec,
    Warp,
    derive_pair_seed,
    gen_synthetic_pair,
)
from scalesel.qnet import NetConfig, dueling_combine, init_network, param_shapes, soft_update
from scalesel.trainer import (
    TrainerConfig,
    greedy_validation,
    make_observation,
    modal_subset,
    rollout,
    target_double,
    target_retrace,
    target_standard,
    td_loss,
    train,
)

from conftest import PLANTED_LEVELS
from naive_ref import naive_hough_vote, naive_reweight
from test_cli import base_config, tree_bytes
from test_env import make_env, table_score
from scalesel.cli import main as cli_main


def _report(num: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[ACCEPTANCE] criterion {num} ({name}): {status}" + (f" -- {detail}" if detail else ""))
    assert ok, f"acceptance criterion {num} ({name}) failed: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: TD-loss gradients vs central finite differences


def test_criterion_1_gradient_correctness():
    started = time.monotonic()
    rng = np.random.default_rng(2024)
    env = make_env(4, table_score({}, default=0.5))  # 2-channel 4x4 levels
    cfg = NetConfig(num_levels=4, channels=(2, 2, 2, 2), embed_dim=8, global_dim=4)
    net = init_network(cfg, seed=7)

    observations = [(), (0,), (1, 3), (0, 2), (0, 1, 2, 3)]
    batch = []
    for sel in observations:
        mask_valid = [a for a in range(5) if (a == 4 and sel) or (a < 4 and a not in sel)]
        action = int(rng.choice(mask_valid))
        batch.append((0, sel, action, float(rng.normal(scale=2.0))))

    _, grads = td_loss(net, batch, env)
    flat_grads = np.concatenate([grads[n].ravel() for n, _, _ in param_shapes(cfg)])
    flat = net.get_flat()
    eps = 1e-5
    probes = rng.choice(flat.size, size=210, replace=False)
    worst = 0.0
    for idx in probes:
        up, down = flat.copy(), flat.copy()
        up[idx] += eps
        down[idx] -= eps
        n_up, n_down = net.copy(), net.copy()
        n_up.set_flat(up)
        n_down.set_flat(down)
        l_up, _ = td_loss(n_up, batch, env)
        l_down, _ = td_loss(n_down, batch, env)
        fd = (l_up - l_down) / (2 * eps)
        rel = abs(fd - flat_grads[idx]) / max(abs(fd), abs(flat_grads[idx]), 1e-6)
        worst = max(worst, rel)
    elapsed = time.monotonic() - started
    _report(
        1,
        "gradient correctness",
        worst < 1e-4 and elapsed < 30.0,
        f"worst rel err {worst:.2e} over {len(probes)} probes x {len(observations)} observations, "
        f"{elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# criterion 2: equation identities at 1e-9


def test_criterion_2_equation_identities():
    rng = np.random.default_rng(5)
    checks = []

    # dueling advantage-shift invariance
    for _ in range(50):
        v = float(rng.normal())
        a = rng.normal(size=7)
        c = float(rng.normal(scale=50.0))
        checks.append(np.abs(dueling_combine(v, a + c) - dueling_combine(v, a)).max() <= 1e-9)

    # double-Q collapses onto the standard backup when the target is a copy
    env = make_env(3, table_score({(0,): 0.3, (1,): 0.8, (0, 1): 0.9}, default=0.2))
    cfg = NetConfig(num_levels=3, channels=(2, 2, 2), embed_dim=8, global_dim=4)
    net = init_network(cfg, seed=1)
    twin = net.copy()
    for seed in range(4):
        trace = rollout(env, net, 0.5, np.random.default_rng(seed))
        for t in range(len(trace)):
            d = target_double(trace, t, net, twin, env, gamma=0.97)
            s = target_standard(trace, t, twin, env, gamma=0.97)
            checks.append(abs(d - s) <= 1e-9)

    # retrace telescopes into the Monte-Carlo return on greedy episodes
    greedy = rollout(env, net, 0.0, np.random.default_rng(0))
    q = target_retrace(greedy, net, net.copy(), env, gamma=0.9)
    acc, mc = 0.0, np.zeros(len(greedy))
    for t in reversed(range(len(greedy))):
        acc = greedy.transitions[t].reward + 0.9 * acc
        mc[t] = acc
    checks.append(np.abs(q - mc).max() <= 1e-9)

    # retrace truncates to the one-step double backup after a non-greedy action
    from scalesel.env import EpisodeTrace, Transition
    from scalesel.qnet import forward

    state = env.reset()
    transitions = []
    q0 = forward(net, make_observation(env, state.selected, 0)).q_values
    a0 = int(np.argmax(q0))
    nstate, r, done = env.step(state, a0)
    transitions.append(Transition(state.selected, a0, r, nstate.selected, done, 1.0))
    state = nstate
    q1 = forward(net, make_observation(env, state.selected, 0)).q_values
    non_greedy = int(
        next(a for a in np.flatnonzero(env.action_mask(state)) if a != int(np.argmax(q1)))
    )
    nstate, r, done = env.step(state, non_greedy)
    transitions.append(Transition(state.selected, non_greedy, r, nstate.selected, done, 0.3))
    state = nstate
    while not done:
        qs = forward(net, make_observation(env, state.selected, 0)).q_values
        a = int(np.argmax(qs))
        nstate, r, done = env.step(state, a)
        transitions.append(Transition(state.selected, a, r, nstate.selected, done, 1.0))
        state = nstate
    trace = EpisodeTrace(tuple(transitions), 0, env.episode_return(state.selected))
    q = target_retrace(trace, net, twin, env, gamma=0.9)
    checks.append(abs(q[0] - target_double(trace, 0, net, twin, env, gamma=0.9)) <= 1e-9)

    # soft-update contraction factor is exactly (1 - rho)
    target = init_network(cfg, seed=2)
    evalnet = init_network(cfg, seed=3)
    rho = 0.13
    gap = np.linalg.norm(target.get_flat() - evalnet.get_flat())
    for _ in range(4):
        soft_update(target, evalnet, rho)
        new_gap = np.linalg.norm(target.get_flat() - evalnet.get_flat())
        checks.append(abs(new_gap - (1 - rho) * gap) <= 1e-9 * max(1.0, gap))
        gap = new_gap

    # episode return identity
    for seed in range(4):
        trace = rollout(env, net, 0.7, np.random.default_rng(100 + seed))
        total = sum(t.reward for t in trace.transitions)
        checks.append(abs(total - trace.total_return) <= 1e-9)

    _report(2, "equation identities", all(checks), f"{len(checks)} identities checked")


# ---------------------------------------------------------------------------
# criterion 3: hough voting vs the naive O(P_s * P_t) reference


def test_criterion_3_hough_oracle_equivalence():
    started = time.monotonic()
    rng = np.random.default_rng(99)
    worst_vote, worst_rew, worst_conservation = 0.0, 0.0, 0.0
    for trial in range(50):
        levels = []
        for li, (h, w) in enumerate([(8, 8), (4, 4), (2, 2)]):
            levels.append(FeatureMap(li, 64.0 / h, rng.standard_normal((3, h, w))))
        pyr_s = FeaturePyramid(64, 64, tuple(levels), rng.standard_normal(4))
        levels_t = tuple(
            FeatureMap(m.layer_index, m.stride, rng.standard_normal(m.data.shape))
            for m in levels
        )
        pyr_t = FeaturePyramid(64, 64, levels_t, rng.standard_normal(4))
        subset = tuple(
            sorted(rng.choice(3, size=int(rng.integers(1, 4)), replace=False).tolist())
        )
        from scalesel.hough import build_hyperimage, compute_correlation

        corr = compute_correlation(
            build_hyperimage(pyr_s, subset), build_hyperimage(pyr_t, subset)
        )
        bins_x = int(rng.integers(3, 17))
        bins_y = int(rng.integers(3, 17))
        bins = hough_vote(corr, bins_x, bins_y)
        ref_votes = naive_hough_vote(corr, bins_x, bins_y)
        worst_vote = max(worst_vote, np.abs(bins.votes - ref_votes).max())
        conservation = abs(bins.votes.sum() - corr.values.sum()) / max(corr.values.sum(), 1e-12)
        worst_conservation = max(worst_conservation, conservation)
        match = reweight(corr, bins)
        ref_rew, ref_best = naive_reweight(corr, ref_votes)
        worst_rew = max(worst_rew, np.abs(match.reweighted - ref_rew).max())
        assert np.array_equal(match.best_target, ref_best)
    elapsed = time.monotonic() - started
    ok = worst_vote < 1e-6 and worst_rew < 1e-6 and worst_conservation < 1e-5 and elapsed < 60.0
    _report(
        3,
        "hough oracle equivalence",
        ok,
        f"max vote err {worst_vote:.2e}, reweight err {worst_rew:.2e}, "
        f"conservation {worst_conservation:.2e}, {elapsed:.1f}s over 50 pairs",
    )


# ---------------------------------------------------------------------------
# criterion 4: self-match and planted-warp matching


def _planted_spec(seed, warp, sigma):
    return SyntheticSpec(
        levels=PLANTED_LEVELS,
        informative_set=(1, 4),
        signal_dims=3,
        noise_sigma=sigma,
        num_keypoints=8,
        warp=warp,
        seed=seed,
    )


def test_criterion_4_self_match_and_planted_warp():
    identity_ok = True
    for seed in range(5):
        pair = gen_synthetic_pair(_planted_spec(seed, Warp("identity"), 0.0))
        match = match_pair(pair.source, pair.target, (1, 4))
        predicted = transfer_keypoints(match, pair.src_keypoints)
        res = pck(predicted, pair.tgt_keypoints, pair.tgt_keypoints.bbox, 0.1)
        identity_ok = identity_ok and res.pck == 1.0

    max_err = 0.0
    for seed in range(5):
        pair = gen_synthetic_pair(
            _planted_spec(100 + seed, Warp("translation", dx=8.0, dy=0.0), 0.0)
        )
        match = match_pair(pair.source, pair.target, (1, 4))
        predicted = transfer_keypoints(match, pair.src_keypoints)
        err = np.linalg.norm(predicted.points - pair.tgt_keypoints.points, axis=1).max()
        max_err = max(max_err, float(err))
    _report(
        4,
        "self-match and planted warp",
        identity_ok and max_err < 1.0,
        f"identity PCK@0.1 == 1.0: {identity_ok}, translation max err {max_err:.2e} px",
    )


# ---------------------------------------------------------------------------
# criterion 5: end-to-end learning across three seeds


def _planted_envs():
    def gen(split, n):
        return [
            gen_synthetic_pair(
                _planted_spec(derive_pair_seed(123, split, i), Warp("identity"), 0.05)
            )
            for i in range(n)
        ]

    train_env = MatchingEnv(gen(0, 40), EnvConfig.uniform(6, 0.4, beta=20.0))
    val_env = MatchingEnv(gen(1, 10), EnvConfig.uniform(6, 0.4, beta=20.0))
    return train_env, val_env


@pytest.fixture(scope="module")
def planted_training_runs():
    train_env, val_env = _planted_envs()
    oracle_return = max(
        val_env.episode_return(sub)
        for size in range(1, 7)
        for sub in itertools.combinations(range(6), size)
    )
    runs = []
    for seed in (0, 1, 2):
        started = time.monotonic()
        net, metrics = train(
            train_env, TrainerConfig(seed=seed, max_iterations=3000), val_env=val_env
        )
        elapsed = time.monotonic() - started
        val_return, subsets = greedy_validation(val_env, net)
        runs.append(
            {
                "seed": seed,
                "elapsed": elapsed,
                "iterations": len(metrics),
                "val_return": val_return,
                "subsets": subsets,
            }
        )
    return {"oracle_return": oracle_return, "runs": runs, "val_env": val_env}


def test_criterion_5_end_to_end_learning(planted_training_runs):
    oracle_return = planted_training_runs["oracle_return"]
    val_env = planted_training_runs["val_env"]
    passes = 0
    details = []
    for run in planted_training_runs["runs"]:
        subsets = run["subsets"]
        sizes = [len(s) for s in subsets]
        modal = modal_subset(subsets)
        k = len(modal)
        trained_score = val_env.score(modal)
        random_scores = [
            s
            for _, s in random_selection_eval(
                None,
                val_env.config,
                k,
                10,
                seed=run["seed"],
                num_levels=6,
                score_fn=val_env.score_fn,
            )
        ]
        ok = (
            run["val_return"] >= 0.95 * oracle_return
            and float(np.mean(sizes)) <= 3.0
            and trained_score > float(np.mean(random_scores))
            and run["elapsed"] < 600.0
        )
        passes += ok
        details.append(
            f"seed {run['seed']}: {'ok' if ok else 'FAIL'} "
            f"(return {run['val_return']:.2f} vs oracle {oracle_return:.2f}, "
            f"mean size {np.mean(sizes):.1f}, score {trained_score:.2f} vs "
            f"random {np.mean(random_scores):.2f}, {run['elapsed']:.0f}s, "
            f"{run['iterations']} iters)"
        )
    _report(5, "end-to-end learning", passes >= 2, f"{passes}/3 seeds passed; " + "; ".join(details))


# ---------------------------------------------------------------------------
# criterion 6: beam search misses what the oracle recovers


def test_criterion_6_baseline_order_property():
    # the size-2 optimum {0, 1} excludes the best singleton {2}; prefix-ordered
    # width-1 beam commits to {2} and cannot extend it
    table = {(0,): 0.5, (1,): 0.5, (2,): 0.625, (0, 1): 1.0, (0, 2): 0.6, (1, 2): 0.6}
    fn = table_score(table, default=0.05)
    cfg = EnvConfig(costs=np.full(3, 0.4))
    oracle_subset, oracle_score = exhaustive_oracle(None, cfg, num_levels=3, score_fn=fn)
    beam_subset, beam_score = beam_search_baseline(None, cfg, 1, num_levels=3, score_fn=fn)
    ok = oracle_subset == (0, 1) and oracle_score == 1.0 and beam_score < oracle_score
    _report(
        6,
        "baseline order property",
        ok,
        f"oracle {oracle_subset}={oracle_score}, beam width 1 {beam_subset}={beam_score}",
    )


# ---------------------------------------------------------------------------
# criterion 7: command determinism


def test_criterion_7_cli_determinism(tmp_path):
    cfg = base_config(tmp_path)
    ok = True
    assert cli_main(["synth", "--config", str(cfg), "--quiet"]) == 0
    synth_first = tree_bytes(tmp_path / "data")
    assert cli_main(["synth", "--config", str(cfg), "--quiet"]) == 0
    ok &= tree_bytes(tmp_path / "data") == synth_first

    assert cli_main(["train", "--config", str(cfg), "--quiet"]) == 0
    train_first = tree_bytes(tmp_path / "out")
    assert cli_main(["train", "--config", str(cfg), "--quiet"]) == 0
    ok &= tree_bytes(tmp_path / "out") == train_first

    assert cli_main(["eval", "--config", str(cfg), "--quiet"]) == 0
    eval_first = (tmp_path / "out/eval.json").read_bytes()
    assert cli_main(["eval", "--config", str(cfg), "--quiet"]) == 0
    ok &= (tmp_path / "out/eval.json").read_bytes() == eval_first

    _report(7, "command determinism", bool(ok), "synth, train, eval re-runs byte-identical")


# ---------------------------------------------------------------------------
# criterion 8: metric unit suite


def test_criterion_8_metric_unit_suite():
    checks = []

    def kp(pts):
        return KeypointSet(np.asarray(pts, dtype=np.float64), (0.0, 0.0, 100.0, 100.0))

    # exact prediction
    same = kp([[1.0, 2.0], [30.0, 40.0]])
    checks.append(pck(same, same, (0, 0, 100, 100), 0.1).pck == 1.0)

    # boundary-inclusive threshold: error 10 with threshold 0.1 * max(100, 50)
    r = pck(kp([[10.0, 0.0]]), kp([[0.0, 0.0]]), (0.0, 0.0, 100.0, 50.0), 0.1)
    checks.append(r.pck == 1.0 and r.threshold_px == 10.0)

    # half the points within threshold
    pred = kp([[3.0, 0.0]] * 5 + [[30.0, 0.0]] * 5)
    gt = kp([[0.0, 0.0]] * 10)
    checks.append(pck(pred, gt, (0.0, 0.0, 100.0, 100.0), 0.1).pck == 0.5)

    # mask metrics: equal, disjoint quarters, both empty
    m = np.zeros((4, 4), dtype=bool)
    m[:2, :2] = True
    checks.append(mask_metrics(m, m) == mask_metrics(m, m))
    r = mask_metrics(m, m)
    checks.append(r.lt_acc == 1.0 and r.iou == 1.0)
    other = np.zeros((4, 4), dtype=bool)
    other[2:, 2:] = True
    r = mask_metrics(m, other)
    checks.append(r.iou == 0.0 and r.lt_acc == 0.5)
    empty = np.zeros((5, 5), dtype=bool)
    r = mask_metrics(empty, empty)
    checks.append(r.iou == 1.0 and r.lt_acc == 1.0)

    _report(8, "metric unit suite", all(checks), f"{len(checks)} exact checks")
