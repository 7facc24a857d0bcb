"""Goal-conditioned behavior cloning and rollout evaluation.

The policy is a dense net mapping (state one-hot ++ goal embedding) to
five action logits, trained with cross-entropy on expert actions. Goal
embeddings are normalized before conditioning, so the policy sees a
direction; corrupted training goals are unit length already, and raw
collapsed goals at evaluation time get the same treatment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .banks import Embedding, EmbeddingBank, Modality
from .collapse import CollapseTransform, apply_transform
from .corrupt import CorruptConfig, corrupt_bank
from .errors import (
    DegenerateVectorError,
    DimensionError,
    DivergenceError,
    ParameterError,
)
from .banks import normalize
from .gridworld import Action, GridTask, Trajectory, expert_trajectory, step
from .nets import DenseParams, MomentumState, dense_backward, dense_forward, init_dense
from .trainer import EncoderParams, frame_difference_embedding, text_forward


@dataclass(frozen=True)
class PolicyConfig:
    steps: int = 3000
    batch_size: int = 64
    learning_rate: float = 0.3
    momentum: float = 0.9
    hidden: tuple[int, ...] = (64,)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0.0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class PolicyParams:
    net: DenseParams
    grid_size: int
    goal_dim: int


@dataclass
class PolicyResult:
    params: PolicyParams
    loss_trace: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class EvalReport:
    success_rate: float
    per_task: dict[str, float]
    episodes_per_task: int
    horizon: int


def goal_embedding(
    encoders: EncoderParams,
    transform: CollapseTransform | None,
    item,
    modality: Modality,
    template_index: int | None = None,
    rng: np.random.Generator | None = None,
    template_pool: Sequence[int] | None = None,
    visual_offset: np.ndarray | None = None,
) -> Embedding:
    """Collapsed goal representation of a trajectory (visual) or task (text).

    Raw encoder outputs are unit-normalized before anything else (the
    contrastive objective only constrains directions, so the scale is an
    artifact), which makes corruption strengths and injected gap norms
    scale-free. Visual goals are the frame difference of the first and
    last observations; a zero transition (start == target) has no
    direction and raises DegenerateVectorError so callers can exclude it.
    Text goals encode one template, chosen by index or sampled from
    template_pool with the given rng. visual_offset, when set, is added
    to the normalized visual embedding before collapsing (used to inject
    a synthetic modality gap).
    """
    if modality is Modality.VISUAL:
        if not isinstance(item, Trajectory):
            raise ParameterError("visual goals need a Trajectory")
        diff = frame_difference_embedding(encoders, item.observations[0], item.observations[-1])
        if float(np.linalg.norm(diff.values)) < 1e-12:
            raise DegenerateVectorError("zero transition: start and end frames encode equally")
        raw = normalize(diff)
        if visual_offset is not None:
            raw = Embedding(raw.values + visual_offset, Modality.VISUAL)
        return apply_transform(transform, raw)
    if not isinstance(item, GridTask):
        raise ParameterError("text goals need a GridTask")
    if template_index is None:
        pool = tuple(template_pool) if template_pool is not None else tuple(range(len(item.templates)))
        if rng is None:
            raise ParameterError("sampling a template needs an rng")
        template_index = int(pool[int(rng.integers(len(pool)))])
    tokens = item.templates[template_index]
    raw = normalize(Embedding(text_forward(encoders, [tokens])[0], Modality.TEXT))
    return apply_transform(transform, raw)


def build_goal_bank(
    encoders: EncoderParams,
    transform: CollapseTransform | None,
    dataset: Sequence[tuple[Trajectory, GridTask]],
    modality: Modality,
    seed: int,
    template_pool: Sequence[int] | None = None,
    visual_offset: np.ndarray | None = None,
) -> tuple[EmbeddingBank, list[int]]:
    """Per-trajectory goal embeddings as a bank, plus the dataset indices
    that produced each row (zero-transition trajectories are excluded)."""
    rng = np.random.default_rng(seed)
    ids, rows, kept = [], [], []
    for i, (traj, task) in enumerate(dataset):
        if len(traj.states) < 2:
            continue  # excluded: no transition to encode
        emb = goal_embedding(
            encoders,
            transform,
            traj if modality is Modality.VISUAL else task,
            modality,
            rng=rng,
            template_pool=template_pool,
            visual_offset=visual_offset,
        )
        ids.append(task.task_id)
        rows.append(emb.values)
        kept.append(i)
    if not rows:
        raise ParameterError("no usable trajectories in the dataset")
    bank = EmbeddingBank(modality, len(rows[0]), tuple(ids), np.stack(rows))
    return bank, kept


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("goal embedding with zero norm")
    return matrix / norms[:, None]


def _state_onehot(grid_size: int, cell: tuple[int, int]) -> np.ndarray:
    onehot = np.zeros(grid_size * grid_size)
    onehot[cell[0] * grid_size + cell[1]] = 1.0
    return onehot


def train_policy_from_arrays(
    states: np.ndarray,
    goals: np.ndarray,
    actions: np.ndarray,
    grid_size: int,
    config: PolicyConfig,
) -> PolicyResult:
    """Cross-entropy behavior cloning on explicit (state, goal, action)
    arrays. Goals are used as given (no normalization here)."""
    states = np.asarray(states, dtype=np.float64)
    goals = np.asarray(goals, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.intp)
    if states.ndim != 2 or goals.ndim != 2 or states.shape[0] != goals.shape[0]:
        raise DimensionError(f"states {states.shape} and goals {goals.shape} disagree")
    if actions.shape != (states.shape[0],):
        raise DimensionError(f"actions shape {actions.shape} does not match rows")
    if states.shape[0] == 0:
        raise ParameterError("behavior cloning needs at least one example")
    inputs = np.concatenate([states, goals], axis=1)
    rng = np.random.default_rng(config.seed)
    net = init_dense([inputs.shape[1], *config.hidden, len(Action)], rng)
    optimizer = MomentumState(net.arrays(), config.learning_rate, config.momentum)
    trace: list[float] = []
    n = inputs.shape[0]
    for step_idx in range(config.steps):
        batch = rng.integers(0, n, size=min(config.batch_size, n))
        x = inputs[batch]
        y = actions[batch]
        logits, cache = dense_forward(net, x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        loss = float(-np.mean(np.log(probs[np.arange(len(y)), y] + 1e-300)))
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step_idx}")
        trace.append(loss)
        dlogits = probs.copy()
        dlogits[np.arange(len(y)), y] -= 1.0
        dlogits /= len(y)
        grads, _ = dense_backward(net, cache, dlogits)
        optimizer.step(net.arrays(), grads.arrays())
    return PolicyResult(PolicyParams(net, grid_size, goals.shape[1]), trace)


def train_policy(
    dataset: Sequence[tuple[Trajectory, GridTask]],
    encoders: EncoderParams,
    transform: CollapseTransform | None,
    corrupt_cfg: CorruptConfig | None,
    train_modality: Modality,
    config: PolicyConfig,
    template_pool: Sequence[int] | None = None,
    visual_offset: np.ndarray | None = None,
) -> PolicyResult:
    """Behavior cloning on one modality's collapsed, corrupted goal
    embeddings; corrupt_cfg None trains on uncorrupted goals."""
    if not dataset:
        raise ParameterError("dataset must be non-empty")
    grid_size = dataset[0][1].grid_size
    bank, kept = build_goal_bank(
        encoders,
        transform,
        dataset,
        train_modality,
        seed=config.seed,
        template_pool=template_pool,
        visual_offset=visual_offset,
    )
    if corrupt_cfg is not None:
        bank = corrupt_bank(bank, corrupt_cfg)
    goal_rows = _normalize_rows(bank.values)
    states, goals, actions = [], [], []
    for row, dataset_idx in enumerate(kept):
        traj, _ = dataset[dataset_idx]
        for t, action in enumerate(traj.actions):
            states.append(_state_onehot(grid_size, traj.states[t]))
            goals.append(goal_rows[row])
            actions.append(int(action))
    return train_policy_from_arrays(
        np.stack(states), np.stack(goals), np.asarray(actions), grid_size, config
    )


def policy_action(policy: PolicyParams, cell: tuple[int, int], goal: np.ndarray) -> Action:
    """Greedy action for one state; argmax breaks ties at the lowest index."""
    x = np.concatenate([_state_onehot(policy.grid_size, cell), goal])[None, :]
    logits, _ = dense_forward(policy.net, x)
    return Action(int(np.argmax(logits[0])))


def evaluate_policy(
    policy: PolicyParams,
    tasks: Sequence[GridTask],
    eval_modality: Modality,
    encoders: EncoderParams,
    transform: CollapseTransform | None,
    episodes_per_task: int,
    horizon: int,
    seed: int,
    template_pool: Sequence[int] | None = None,
    visual_offset: np.ndarray | None = None,
) -> EvalReport:
    """Greedy rollouts from seeded random starts; success means the agent
    sits on the target at or before the horizon.

    Evaluation goals are collapsed but never corrupted. Visual goals come
    from a fresh prompt demonstration per episode (its own start cell and
    distractors), so they never match the rollout's own observations.
    """
    ordered = sorted(tasks, key=lambda t: t.task_id)
    per_task: dict[str, float] = {}
    total = 0
    for ti, task in enumerate(ordered):
        grid = task.grid_size
        wins = 0
        for episode in range(episodes_per_task):
            rng = np.random.default_rng([seed, ti, episode])
            if eval_modality is Modality.VISUAL:
                while True:
                    prompt_start = (int(rng.integers(grid)), int(rng.integers(grid)))
                    if prompt_start != task.target:
                        break
                prompt = expert_trajectory(task, prompt_start, int(rng.integers(0, 2**63 - 1)))
                goal = goal_embedding(
                    encoders, transform, prompt, Modality.VISUAL, visual_offset=visual_offset
                )
            else:
                goal = goal_embedding(
                    encoders,
                    transform,
                    task,
                    Modality.TEXT,
                    rng=rng,
                    template_pool=template_pool,
                )
            goal_vec = normalize(goal.values)
            cell = (int(rng.integers(grid)), int(rng.integers(grid)))
            reached = cell == task.target
            for _ in range(horizon):
                if reached:
                    break
                cell = step(grid, cell, policy_action(policy, cell, goal_vec))
                reached = cell == task.target
            wins += int(reached)
        per_task[task.task_id] = wins / episodes_per_task
        total += wins
    return EvalReport(
        success_rate=total / (len(ordered) * episodes_per_task),
        per_task=per_task,
        episodes_per_task=episodes_per_task,
        horizon=horizon,
    )


def chance_floor(
    tasks: Sequence[GridTask], episodes_per_task: int, horizon: int, seed: int
) -> float:
    """Success rate of a uniformly random policy under the same protocol."""
    ordered = sorted(tasks, key=lambda t: t.task_id)
    wins = 0
    for ti, task in enumerate(ordered):
        grid = task.grid_size
        for episode in range(episodes_per_task):
            rng = np.random.default_rng([seed, ti, episode])
            cell = (int(rng.integers(grid)), int(rng.integers(grid)))
            reached = cell == task.target
            for _ in range(horizon):
                if reached:
                    break
                cell = step(grid, cell, Action(int(rng.integers(len(Action)))))
                reached = cell == task.target
            wins += int(reached)
    return wins / (len(ordered) * episodes_per_task)
