"""Off-policy Q-learning: rollouts, episode replay, targets, Adam, plateau schedule.

The behavior policy is epsilon-greedy with the recorded probability
mu(a|s) = eps/|valid| + (1 - eps) * 1[a = argmax]. Targets come in three
flavors: the standard max backup, the double-Q backup (action chosen by the
evaluation net, valued by the target net), and the retrace correction
computed backward over whole episodes with truncated importance weights.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import EnvState, EpisodeTrace, MatchingEnv, Transition
from .errors import DivergenceError, ShapeError, ValidationError
from .qnet import (
    NetConfig,
    Observation,
    QNetwork,
    accumulate_backward,
    forward,
    forward_tape,
    init_network,
    param_shapes,
    save_checkpoint,
    soft_update,
)

TARGET_MODES = ("standard", "double", "retrace")
LOSS_KINDS = ("mse", "huber")

QFn = Callable[[QNetwork, tuple[int, ...], int], np.ndarray]


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    max_iterations: int = 3000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    soft_update_rho: float = 0.01
    target_mode: str = "retrace"
    lr_patience: int = 10
    stop_patience: int = 20
    lr_decay: float = 0.5
    buffer_capacity: int = 1000
    rollouts_per_iteration: int = 4
    val_interval: int = 10
    loss: str = "mse"
    huber_delta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValidationError("gamma must be in [0, 1]")
        if self.target_mode not in TARGET_MODES:
            raise ValidationError(f"target_mode must be one of {TARGET_MODES}")
        if self.loss not in LOSS_KINDS:
            raise ValidationError(f"loss must be one of {LOSS_KINDS}")
        if self.lr_patience < 1 or self.stop_patience < 1:
            raise ValidationError("patience values must be positive")
        if self.buffer_capacity < 1 or self.batch_size < 1:
            raise ValidationError("buffer capacity and batch size must be positive")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ValidationError("need 0 <= epsilon_end <= epsilon_start <= 1")


class ReplayBuffer:
    """Ring buffer of episode traces; sampling is uniform over transitions."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValidationError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.episodes: list[EpisodeTrace] = []
        self.insertions = 0

    def add(self, trace: EpisodeTrace) -> None:
        if len(self.episodes) < self.capacity:
            self.episodes.append(trace)
        else:
            self.episodes[self.insertions % self.capacity] = trace
        self.insertions += 1

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def num_transitions(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def sample_transitions(
        self, batch_size: int, rng: np.random.Generator
    ) -> list[tuple[EpisodeTrace, int]]:
        """Uniform i.i.d. draws over all stored transitions."""
        total = self.num_transitions
        if total == 0:
            raise ValidationError("cannot sample from an empty buffer")
        bounds = np.cumsum([len(ep) for ep in self.episodes])
        picks = rng.integers(total, size=batch_size)
        out = []
        for r in picks:
            e = int(np.searchsorted(bounds, r, side="right"))
            start = 0 if e == 0 else int(bounds[e - 1])
            out.append((self.episodes[e], int(r - start)))
        return out


def make_observation(env: MatchingEnv, selected: Sequence[int], pair_index: int) -> Observation:
    """Build the Q-network input for a selection snapshot on one pair."""
    sel = tuple(sorted(int(i) for i in selected))
    pair = env.pairs[pair_index]
    return Observation(
        selected=sel,
        src_feats=tuple(pair.source.levels[i] for i in sel),
        tgt_feats=tuple(pair.target.levels[i] for i in sel),
        src_global=pair.source.global_descriptor,
        tgt_global=pair.target.global_descriptor,
        valid_mask=env.action_mask(EnvState(selected=sel)),
        cache_key=(pair_index, sel),
    )


def _default_q_fn(env: MatchingEnv) -> QFn:
    def q_fn(net: QNetwork, selected: tuple[int, ...], pair_index: int) -> np.ndarray:
        return forward(net, make_observation(env, selected, pair_index)).q_values

    return q_fn


class _CachedQ:
    """Per-iteration forward cache; valid only while the net is not mutated."""

    def __init__(self, env: MatchingEnv):
        self.env = env
        self.cache: dict[tuple, np.ndarray] = {}

    def __call__(self, net: QNetwork, selected: tuple[int, ...], pair_index: int) -> np.ndarray:
        key = (id(net), net.version, pair_index, tuple(sorted(selected)))
        if key not in self.cache:
            self.cache[key] = forward(net, make_observation(self.env, selected, pair_index)).q_values
        return self.cache[key]


def rollout(
    env: MatchingEnv,
    net: QNetwork,
    epsilon: float,
    rng: np.random.Generator,
    pair_index: int = 0,
    q_fn: QFn | None = None,
) -> EpisodeTrace:
    """One epsilon-greedy episode with recorded behavior probabilities."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValidationError(f"epsilon must be in [0, 1], got {epsilon}")
    q_fn = q_fn or _default_q_fn(env)
    state = env.reset()
    transitions = []
    while True:
        mask = env.action_mask(state)
        valid = np.flatnonzero(mask)
        q = q_fn(net, state.selected, pair_index)
        greedy = int(np.argmax(q))
        if rng.random() < epsilon:
            action = int(valid[rng.integers(len(valid))])
        else:
            action = greedy
        mu = epsilon / len(valid) + (1.0 - epsilon) * (action == greedy)
        next_state, reward, done = env.step(state, action)
        transitions.append(
            Transition(state.selected, action, reward, next_state.selected, done, mu)
        )
        state = next_state
        if done:
            break
    return EpisodeTrace(tuple(transitions), pair_index, env.episode_return(state.selected))


# ---------------------------------------------------------------------------
# Target computation


def target_standard(
    trace: EpisodeTrace,
    t: int,
    target_net: QNetwork,
    env: MatchingEnv,
    gamma: float,
    q_fn: QFn | None = None,
) -> float:
    """q_t = r_t + gamma * max_a Q_target(s_{t+1}, a); terminal steps return r_t."""
    q_fn = q_fn or _default_q_fn(env)
    tr = trace.transitions[t]
    if tr.done:
        return tr.reward
    q_next = q_fn(target_net, tr.next_observation, trace.pair_index)
    return tr.reward + gamma * float(np.max(q_next))


def target_double(
    trace: EpisodeTrace,
    t: int,
    eval_net: QNetwork,
    target_net: QNetwork,
    env: MatchingEnv,
    gamma: float,
    q_fn: QFn | None = None,
) -> float:
    """Double-Q backup: argmax from the evaluation net, value from the target net."""
    q_fn = q_fn or _default_q_fn(env)
    tr = trace.transitions[t]
    if tr.done:
        return tr.reward
    a_star = int(np.argmax(q_fn(eval_net, tr.next_observation, trace.pair_index)))
    q_next = q_fn(target_net, tr.next_observation, trace.pair_index)
    return tr.reward + gamma * float(q_next[a_star])


def target_retrace(
    trace: EpisodeTrace,
    eval_net: QNetwork,
    target_net: QNetwork,
    env: MatchingEnv,
    gamma: float,
    q_fn: QFn | None = None,
) -> np.ndarray:
    """Retrace targets for every step, computed backward from the terminal step.

    The target policy is greedy w.r.t. the evaluation net, so the truncated
    importance weight is 1 where the logged action matches the greedy action
    and 0 elsewhere; on fully greedy episodes the recursion telescopes into
    the discounted Monte-Carlo return.
    """
    q_fn = q_fn or _default_q_fn(env)
    steps = len(trace.transitions)
    q_t = np.zeros(steps)
    for t in reversed(range(steps)):
        tr = trace.transitions[t]
        if tr.done:
            q_t[t] = tr.reward
            continue
        nxt = trace.transitions[t + 1]
        q_eval = q_fn(eval_net, tr.next_observation, trace.pair_index)
        q_tgt = q_fn(target_net, tr.next_observation, trace.pair_index)
        greedy = int(np.argmax(q_eval))
        expected_pi = float(q_tgt[greedy])
        rho_bar = 1.0 if nxt.action == greedy else 0.0
        q_t[t] = tr.reward + gamma * expected_pi + gamma * rho_bar * (
            q_t[t + 1] - float(q_tgt[nxt.action])
        )
    return q_t


# ---------------------------------------------------------------------------
# Loss and optimizer


def td_loss(
    net: QNetwork,
    batch: Sequence[tuple[int, tuple[int, ...], int, float]],
    env: MatchingEnv,
    loss_kind: str = "mse",
    huber_delta: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean TD loss and parameter gradients over (pair, selection, action, q_t) items.

    Targets are constants: no gradient flows through q_t.
    """
    if not batch:
        raise ValidationError("td_loss needs a non-empty batch")
    grads = net.zero_grads()
    total = 0.0
    scale = 1.0 / len(batch)
    for pair_index, selected, action, q_target in batch:
        if not np.isfinite(q_target):
            raise ValidationError("non-finite target in batch")
        obs = make_observation(env, selected, pair_index)
        if not obs.valid_mask[action]:
            raise ValidationError(
                f"batch contains masked action {action} for selection {selected}"
            )
        out, tape = forward_tape(net, obs)
        residual = float(out.q_values[action]) - q_target
        if loss_kind == "mse":
            total += 0.5 * residual * residual
            dq_a = residual * scale
        elif loss_kind == "huber":
            if abs(residual) <= huber_delta:
                total += 0.5 * residual * residual
            else:
                total += huber_delta * (abs(residual) - 0.5 * huber_delta)
            dq_a = float(np.clip(residual, -huber_delta, huber_delta)) * scale
        else:
            raise ValidationError(f"unknown loss kind {loss_kind!r}")
        dq = np.zeros(net.config.action_count)
        dq[action] = dq_a
        accumulate_backward(net, tape, dq, grads)
    return total * scale, grads


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def for_net(net: QNetwork) -> "AdamState":
        n = net.param_count()
        return AdamState(np.zeros(n), np.zeros(n))


def optimizer_step(
    net: QNetwork,
    grads: dict[str, np.ndarray] | np.ndarray,
    adam: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected adaptive-moment update; raises on non-finite gradients."""
    if isinstance(grads, dict):
        flat = np.concatenate([grads[n].ravel() for n, _, _ in param_shapes(net.config)])
    else:
        flat = np.asarray(grads, dtype=np.float64)
    if flat.size != net.param_count():
        raise ShapeError(f"gradient has {flat.size} entries, expected {net.param_count()}")
    if not np.isfinite(flat).all():
        raise DivergenceError("non-finite gradient: training diverged")
    adam.t += 1
    adam.m = beta1 * adam.m + (1.0 - beta1) * flat
    adam.v = beta2 * adam.v + (1.0 - beta2) * flat * flat
    m_hat = adam.m / (1.0 - beta1**adam.t)
    v_hat = adam.v / (1.0 - beta2**adam.t)
    net.set_flat(net.get_flat() - lr * m_hat / (np.sqrt(v_hat) + eps))


# ---------------------------------------------------------------------------
# Training loop


@dataclass(frozen=True)
class IterationMetrics:
    iteration: int
    mean_train_return: float
    val_return: float | None
    lr: float
    epsilon: float
    loss: float
    mean_episode_len: float
    selected_subset_mode: tuple[int, ...]


@dataclass
class TrainState:
    eval_net: QNetwork
    target_net: QNetwork
    adam: AdamState
    iteration: int = 0
    lr: float = 0.001
    best_val_return: float = -np.inf
    best_params: np.ndarray | None = None
    lr_streak: int = 0
    val_streak: int = 0
    train_returns: list = field(default_factory=list)
    val_returns: list = field(default_factory=list)


def epsilon_at(iteration: int, config: TrainerConfig) -> float:
    """Linear decay from epsilon_start to epsilon_end over the first half of training."""
    half = max(1, config.max_iterations // 2)
    frac = min(1.0, iteration / half)
    return config.epsilon_start + (config.epsilon_end - config.epsilon_start) * frac


def greedy_validation(env: MatchingEnv, net: QNetwork, q_fn: QFn | None = None) -> tuple[float, list[tuple[int, ...]]]:
    """Mean greedy-episode return over the env's pairs plus the chosen subsets."""
    rng = np.random.default_rng(0)  # epsilon = 0: the rng is never consulted
    returns, subsets = [], []
    for pair_index in range(len(env.pairs)):
        trace = rollout(env, net, 0.0, rng, pair_index, q_fn=q_fn)
        returns.append(trace.total_return)
        subsets.append(tuple(sorted(trace.transitions[-1].observation)))
    return float(np.mean(returns)), subsets


def modal_subset(subsets: Sequence[tuple[int, ...]]) -> tuple[int, ...]:
    counts = Counter(subsets)
    top = max(counts.values())
    return min(s for s, c in counts.items() if c == top)


def train(
    env: MatchingEnv,
    config: TrainerConfig,
    net: QNetwork | None = None,
    val_env: MatchingEnv | None = None,
    checkpoint_path=None,
    embed_dim: int = 16,
    aggregation: str = "product",
) -> tuple[QNetwork, list[IterationMetrics]]:
    """Run the full training loop; returns the best-validation parameters.

    Learning-rate decay follows the mean rollout return on the training env
    (a halving after ``lr_patience`` consecutive non-increasing iterations);
    early stopping follows the greedy validation return (``stop_patience``
    consecutive checks without a new best).
    """
    if net is None:
        pair = env.pairs[0]
        net_config = NetConfig(
            num_levels=env.num_levels,
            channels=tuple(m.channels for m in pair.source.levels),
            embed_dim=embed_dim,
            global_dim=pair.source.global_dim,
            aggregation=aggregation,
        )
        net = init_network(net_config, config.seed)
    val_env = val_env or env
    rng = np.random.default_rng(config.seed)
    target_net = net.copy()
    adam = AdamState.for_net(net)
    buffer = ReplayBuffer(config.buffer_capacity)
    lr = config.lr
    best_val = -np.inf
    best_flat = net.get_flat().copy()
    best_iteration = -1
    lr_streak = 0
    val_streak = 0
    prev_train_return = -np.inf
    metrics: list[IterationMetrics] = []

    for iteration in range(config.max_iterations):
        eps = epsilon_at(iteration, config)
        q_cache_train = _CachedQ(env)

        returns, lengths, subsets = [], [], []
        for r in range(config.rollouts_per_iteration):
            pair_index = (iteration * config.rollouts_per_iteration + r) % len(env.pairs)
            trace = rollout(env, net, eps, rng, pair_index, q_fn=q_cache_train)
            buffer.add(trace)
            returns.append(trace.total_return)
            lengths.append(len(trace))
            subsets.append(tuple(sorted(trace.transitions[-1].observation)))

        batch_refs = buffer.sample_transitions(config.batch_size, rng)
        retrace_cache: dict[int, np.ndarray] = {}
        batch = []
        for ep, t in batch_refs:
            if config.target_mode == "standard":
                q_t = target_standard(ep, t, target_net, env, config.gamma, q_cache_train)
            elif config.target_mode == "double":
                q_t = target_double(ep, t, net, target_net, env, config.gamma, q_cache_train)
            else:
                if id(ep) not in retrace_cache:
                    retrace_cache[id(ep)] = target_retrace(
                        ep, net, target_net, env, config.gamma, q_cache_train
                    )
                q_t = float(retrace_cache[id(ep)][t])
            tr = ep.transitions[t]
            batch.append((ep.pair_index, tr.observation, tr.action, q_t))

        loss, grads = td_loss(net, batch, env, config.loss, config.huber_delta)
        optimizer_step(net, grads, adam, lr, config.beta1, config.beta2)
        soft_update(target_net, net, config.soft_update_rho)

        mean_return = float(np.mean(returns))
        if mean_return > prev_train_return:
            lr_streak = 0
        else:
            lr_streak += 1
            if lr_streak >= config.lr_patience:
                lr *= config.lr_decay
                lr_streak = 0
        prev_train_return = mean_return

        val_return = None
        if (iteration + 1) % config.val_interval == 0:
            val_return, _ = greedy_validation(val_env, net)
            if val_return > best_val:
                best_val = val_return
                best_flat = net.get_flat().copy()
                best_iteration = iteration
                val_streak = 0
                if checkpoint_path is not None:
                    save_checkpoint(
                        net,
                        checkpoint_path,
                        metadata={"iteration": iteration, "val_return": val_return},
                    )
            else:
                val_streak += 1

        metrics.append(
            IterationMetrics(
                iteration=iteration,
                mean_train_return=mean_return,
                val_return=val_return,
                lr=lr,
                epsilon=eps,
                loss=loss,
                mean_episode_len=float(np.mean(lengths)),
                selected_subset_mode=modal_subset(subsets),
            )
        )
        if val_streak >= config.stop_patience:
            break

    if best_iteration < 0:  # no validation check ever ran: keep the final parameters
        best_flat = net.get_flat()
    best_net = net.copy()
    best_net.set_flat(best_flat)
    if checkpoint_path is not None and best_iteration < 0:
        save_checkpoint(
            best_net,
            checkpoint_path,
            metadata={"iteration": len(metrics) - 1, "val_return": None},
        )
    return best_net, metrics


def write_metrics_csv(path, metrics: Sequence[IterationMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "iteration",
                "mean_train_return",
                "val_return",
                "lr",
                "epsilon",
                "loss",
                "mean_episode_len",
                "selected_subset_mode",
            ]
        )
        for m in metrics:
            writer.writerow(
                [
                    m.iteration,
                    repr(m.mean_train_return),
                    "" if m.val_return is None else repr(m.val_return),
                    repr(m.lr),
                    repr(m.epsilon),
                    repr(m.loss),
                    repr(m.mean_episode_len),
                    ";".join(str(i) for i in m.selected_subset_mode),
                ]
            )
