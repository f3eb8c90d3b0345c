"""The feature-selection MDP plus exhaustive, beam-search, and random baselines.

An episode selects pyramid levels one at a time, paying a per-level cost,
and ends with a terminate action rewarded by beta times the matching score
of the selected subset. The score V_s is the mean PCK over a fixed batch of
image pairs; subset scores are memoized since the oracle and training
revisit subsets constantly.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    EmptySelectionError,
    InvalidActionError,
    UnsupportedError,
    ValidationError,
)
from .hough import DEFAULT_BINS, match_pair, transfer_keypoints
from .metrics import pck
from .pyramid import ImagePair

ScoreFn = Callable[[Sequence[int]], float]

EXHAUSTIVE_LIMIT = 12


def worker_count() -> int:
    """Worker cap from SCALESEL_THREADS; defaults to 1 (sequential)."""
    try:
        return max(1, int(os.environ.get("SCALESEL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class EnvConfig:
    """Environment knobs; costs length must match the pyramid level count."""

    costs: np.ndarray
    beta: float = 20.0
    score_alpha: float = 0.1
    max_episode_len: int | None = None

    def __post_init__(self):
        costs = np.asarray(self.costs, dtype=np.float64).reshape(-1)
        if costs.size < 1 or (costs <= 0).any():
            raise ValidationError("all per-level costs must be positive")
        if self.beta <= 0:
            raise ValidationError("beta must be positive")
        if not 0.0 < self.score_alpha <= 1.0:
            raise ValidationError("score_alpha must be in (0, 1]")
        if self.max_episode_len is not None and self.max_episode_len < 2:
            raise ValidationError("max_episode_len must allow one select plus terminate")
        object.__setattr__(self, "costs", costs)

    @staticmethod
    def uniform(num_levels: int, cost: float = 0.4, **kwargs) -> "EnvConfig":
        return EnvConfig(costs=np.full(num_levels, cost), **kwargs)


@dataclass(frozen=True)
class EnvState:
    """Selection progress: the ordered set of chosen levels and the done flag."""

    selected: tuple[int, ...] = ()
    done: bool = False

    @property
    def step_count(self) -> int:
        return len(self.selected)


@dataclass(frozen=True)
class Transition:
    observation: tuple[int, ...]
    action: int
    reward: float
    next_observation: tuple[int, ...]
    done: bool
    behavior_prob: float

    def __post_init__(self):
        if not 0.0 < self.behavior_prob <= 1.0:
            raise ValidationError(
                f"behavior probability must be in (0, 1], got {self.behavior_prob}"
            )


@dataclass(frozen=True)
class EpisodeTrace:
    """A full logged episode; total_return is exactly beta*V_s - sum(costs)."""

    transitions: tuple[Transition, ...]
    pair_index: int
    total_return: float

    def __post_init__(self):
        if not self.transitions or not self.transitions[-1].done:
            raise ValidationError("an episode trace must end with a terminal transition")
        if any(t.done for t in self.transitions[:-1]):
            raise ValidationError("only the final transition may be terminal")

    def __len__(self) -> int:
        return len(self.transitions)


class SubsetScorer:
    """Memoized matching score over a fixed pair batch, keyed by sorted subset."""

    def __init__(
        self,
        pairs: Sequence[ImagePair],
        alpha: float = 0.1,
        bins_x: int = DEFAULT_BINS,
        bins_y: int = DEFAULT_BINS,
    ):
        if not pairs:
            raise ValidationError("score_pairs must be non-empty")
        self.pairs = list(pairs)
        self.alpha = alpha
        self.bins_x = bins_x
        self.bins_y = bins_y
        self._cache: dict[tuple[int, ...], float] = {}

    def pair_score(self, pair: ImagePair, selected: Sequence[int]) -> float:
        match = match_pair(pair.source, pair.target, selected, self.bins_x, self.bins_y)
        predicted = transfer_keypoints(match, pair.src_keypoints)
        return pck(predicted, pair.tgt_keypoints, pair.tgt_keypoints.bbox, self.alpha).pck

    def __call__(self, selected: Sequence[int]) -> float:
        key = tuple(sorted(set(int(i) for i in selected)))
        if not key:
            raise EmptySelectionError("cannot score an empty selection")
        if key not in self._cache:
            workers = worker_count()
            if workers > 1 and len(self.pairs) > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    scores = list(pool.map(lambda p: self.pair_score(p, key), self.pairs))
            else:
                scores = [self.pair_score(p, key) for p in self.pairs]
            self._cache[key] = float(np.mean(scores))
        return self._cache[key]


def score(pairs: Sequence[ImagePair], selected: Sequence[int], alpha: float = 0.1) -> float:
    """One-shot V_s: mean PCK@alpha of the selected subset over the pairs."""
    return SubsetScorer(pairs, alpha=alpha)(selected)


class MatchingEnv:
    """Feature-selection environment over a fixed batch of image pairs.

    Actions 0..N-1 select the corresponding level; action N terminates.
    ``score_fn`` may replace the PCK-based scorer (used by tests and
    baselines with constructed score tables).
    """

    def __init__(
        self,
        pairs: Sequence[ImagePair],
        config: EnvConfig,
        score_fn: ScoreFn | None = None,
    ):
        if not pairs:
            raise ValidationError("the environment needs a non-empty pair batch")
        n = pairs[0].num_levels
        if any(p.num_levels != n for p in pairs):
            raise ValidationError("all pairs must share the same level count")
        if config.costs.size != n:
            raise ValidationError(
                f"costs vector has length {config.costs.size}, expected {n}"
            )
        self.pairs = list(pairs)
        self.config = config
        self.num_levels = n
        self.terminate_action = n
        self.num_actions = n + 1
        self.max_episode_len = config.max_episode_len or n + 1
        self.score_fn: ScoreFn = (
            score_fn if score_fn is not None else SubsetScorer(pairs, alpha=config.score_alpha)
        )

    def reset(self) -> EnvState:
        return EnvState()

    def action_mask(self, state: EnvState) -> np.ndarray:
        """Valid-action mask of length N+1; the terminate entry is last."""
        mask = np.ones(self.num_actions, dtype=bool)
        for i in state.selected:
            mask[i] = False
        mask[self.terminate_action] = len(state.selected) > 0
        if len(state.selected) >= self.max_episode_len - 1:
            mask[: self.num_levels] = False  # selection budget exhausted: must terminate
        return mask

    def step(self, state: EnvState, action: int) -> tuple[EnvState, float, bool]:
        if state.done:
            raise InvalidActionError("the episode has already terminated")
        mask = self.action_mask(state)
        if not 0 <= action < self.num_actions or not mask[action]:
            raise InvalidActionError(
                f"action {action} is invalid for selection {state.selected}"
            )
        if action == self.terminate_action:
            reward = self.config.beta * self.score_fn(state.selected)
            return EnvState(state.selected, done=True), reward, True
        next_state = EnvState(state.selected + (action,), done=False)
        return next_state, -float(self.config.costs[action]), False

    def score(self, selected: Sequence[int]) -> float:
        return self.score_fn(selected)

    def episode_return(self, selected: Sequence[int]) -> float:
        """beta * V_s - sum of selected costs (the exact episode identity)."""
        sel = list(selected)
        return self.config.beta * self.score_fn(sel) - float(np.sum(self.config.costs[sel]))


# ---------------------------------------------------------------------------
# Baselines


def _resolve_score_fn(
    pairs: Sequence[ImagePair] | None, config: EnvConfig, score_fn: ScoreFn | None
) -> ScoreFn:
    if score_fn is not None:
        return score_fn
    if pairs is None:
        raise ValidationError("either pairs or a score_fn must be provided")
    return SubsetScorer(pairs, alpha=config.score_alpha)


def exhaustive_oracle(
    pairs: Sequence[ImagePair] | None,
    config: EnvConfig,
    num_levels: int | None = None,
    score_fn: ScoreFn | None = None,
) -> tuple[tuple[int, ...], float]:
    """Best non-empty subset by brute force; ties prefer fewer levels, then lex order."""
    n = num_levels if num_levels is not None else pairs[0].num_levels
    if n > EXHAUSTIVE_LIMIT:
        raise UnsupportedError(
            f"exhaustive oracle is limited to N <= {EXHAUSTIVE_LIMIT} levels, got {n}"
        )
    fn = _resolve_score_fn(pairs, config, score_fn)
    best_subset: tuple[int, ...] | None = None
    best_score = -np.inf
    for size in range(1, n + 1):
        for subset in itertools.combinations(range(n), size):
            s = fn(subset)
            if s > best_score:
                best_subset, best_score = subset, s
    return best_subset, float(best_score)


def beam_search_baseline(
    pairs: Sequence[ImagePair] | None,
    config: EnvConfig,
    beam_width: int,
    num_levels: int | None = None,
    score_fn: ScoreFn | None = None,
) -> tuple[tuple[int, ...], float]:
    """Prefix-ordered beam search: subsets grow only by strictly larger indices.

    Every evaluated subset is a candidate answer; the search space excludes
    any subset whose prefix was pruned, which is exactly what the full-power-
    set oracle does not suffer from.
    """
    if beam_width < 1:
        raise ValidationError("beam width must be >= 1")
    n = num_levels if num_levels is not None else pairs[0].num_levels
    fn = _resolve_score_fn(pairs, config, score_fn)
    beam: list[tuple[int, ...]] = [()]
    best_subset: tuple[int, ...] | None = None
    best_score = -np.inf
    while beam:
        candidates: list[tuple[tuple[int, ...], float]] = []
        for subset in beam:
            start = subset[-1] + 1 if subset else 0
            for j in range(start, n):
                cand = subset + (j,)
                s = fn(cand)
                candidates.append((cand, s))
                if s > best_score or (
                    s == best_score and (len(cand), cand) < (len(best_subset), best_subset)
                ):
                    best_subset, best_score = cand, s
        candidates.sort(key=lambda cs: (-cs[1], len(cs[0]), cs[0]))
        beam = [c for c, _ in candidates[:beam_width]]
    return best_subset, float(best_score)


def random_selection_eval(
    pairs: Sequence[ImagePair] | None,
    config: EnvConfig,
    k: int,
    trials: int,
    seed: int,
    num_levels: int | None = None,
    score_fn: ScoreFn | None = None,
) -> list[tuple[tuple[int, ...], float]]:
    """Score ``trials`` uniformly sampled K-subsets; deterministic per seed."""
    n = num_levels if num_levels is not None else pairs[0].num_levels
    if not 1 <= k <= n:
        raise ValidationError(f"K must be in 1..{n}, got {k}")
    fn = _resolve_score_fn(pairs, config, score_fn)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        subset = tuple(sorted(int(i) for i in rng.choice(n, size=k, replace=False)))
        out.append((subset, fn(subset)))
    return out


def subset_csv_rows(entries: Sequence[tuple[tuple[int, ...], float]]) -> list[str]:
    """CSV lines "subset,k,score" with subsets as semicolon-joined indices."""
    lines = ["subset,k,score"]
    for subset, s in entries:
        lines.append(f"{';'.join(str(i) for i in subset)},{len(subset)},{s!r}")
    return lines
