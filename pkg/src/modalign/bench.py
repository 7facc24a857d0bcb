"""End-to-end transfer experiment: train encoders on gridworld pairs,
fit a collapse transform, corrupt one modality's goal embeddings, train a
behavior-cloning policy on them, and evaluate the policy under both
modalities against a measured chance floor.

Everything is seeded; re-running a config reproduces every output byte.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .banks import EmbeddingBank, Modality, normalize
from .collapse import CollapseTransform, fit_centralize, fit_delete
from .corrupt import CorruptConfig, NoiseKind
from .errors import ParameterError, PipelineError
from .gridworld import (
    HELDOUT_TEMPLATE_INDICES,
    TRAIN_TEMPLATE_INDICES,
    GridTask,
    Trajectory,
    build_dataset,
    build_vocab,
    generate_tasks,
)
from .policy import (
    PolicyConfig,
    build_goal_bank,
    chance_floor,
    evaluate_policy,
    train_policy,
)
from .trainer import Clip, TrainerConfig, text_forward, train_encoders

_STAGE_DATA = 0
_STAGE_ENCODER = 1
_STAGE_REFBANK = 2
_STAGE_POLICY = 3
_STAGE_EVAL = 4
_STAGE_EVAL_HELDOUT = 5
_STAGE_CORRUPT = 6
_CHANCE_TAG = 97
_GAP_TAG = 98

CSV_COLUMNS = (
    "collapse",
    "corrupt_kind",
    "alpha_or_std",
    "train_modality",
    "eval_modality",
    "success_mean",
    "success_std",
    "chance_floor",
)


def subseed(*keys: int) -> int:
    """Deterministic derived seed for a pipeline stage."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class VariantSpec:
    """One ablation cell: collapse kind, corruption, and injected gap."""

    collapse: str = "centralize"  # centralize | delete | none
    delete_k: int = 1
    corrupt_kind: str = "cosine"  # cosine | gaussian | none
    alpha: float = 0.2
    std: float = 0.1
    injected_gap_norm: float = 0.0

    def __post_init__(self):
        if self.collapse not in ("centralize", "delete", "none"):
            raise ParameterError(f"unknown collapse kind {self.collapse!r}")
        if self.corrupt_kind not in ("cosine", "gaussian", "none"):
            raise ParameterError(f"unknown corrupt kind {self.corrupt_kind!r}")
        if self.injected_gap_norm < 0.0:
            raise ParameterError("injected_gap_norm must be >= 0")

    @property
    def alpha_or_std(self) -> float | None:
        if self.corrupt_kind == "cosine":
            return self.alpha
        if self.corrupt_kind == "gaussian":
            return self.std
        return None

    def corrupt_config(self, seed: int) -> CorruptConfig | None:
        if self.corrupt_kind == "none":
            return None
        if self.corrupt_kind == "cosine":
            return CorruptConfig(NoiseKind.COSINE, alpha=self.alpha, seed=seed)
        return CorruptConfig(NoiseKind.GAUSSIAN, std=self.std, seed=seed)


_VARIANT_KEYS = {"collapse", "delete_k", "corrupt_kind", "alpha", "std", "injected_gap_norm"}


@dataclass(frozen=True)
class BenchConfig:
    schema_version: int = 1
    grid_size: int = 5
    demos_per_task: int = 20
    dim: int = 16
    world_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    train_modality: str = "visual"
    eval_modalities: tuple[str, ...] = ("visual", "text")
    eval_heldout_text: bool = True
    episodes_per_task: int = 10
    horizon: int = 8
    encoder_steps: int = 4000
    encoder_batch_size: int = 32
    encoder_learning_rate: float = 0.1
    encoder_momentum: float = 0.9
    encoder_visual_hidden: tuple[int, ...] = (64,)
    encoder_text_hidden: tuple[int, ...] = (64,)
    encoder_token_dim: int = 32
    encoder_temperature: float = 0.5
    encoder_freeze_text_after: int | None = None
    policy_steps: int = 3000
    policy_batch_size: int = 64
    policy_learning_rate: float = 0.3
    policy_momentum: float = 0.9
    policy_hidden: tuple[int, ...] = (64,)
    collapse: str = "centralize"
    delete_k: int = 1
    corrupt_kind: str = "cosine"
    alpha: float = 0.2
    std: float = 0.1
    injected_gap_norm: float = 0.0
    ablations: tuple[dict, ...] = ()

    def __post_init__(self):
        if self.schema_version != 1:
            raise ParameterError(f"unsupported schema_version {self.schema_version!r}")
        if self.train_modality not in ("visual", "text"):
            raise ParameterError(f"train_modality must be visual or text, got {self.train_modality!r}")
        for m in self.eval_modalities:
            if m not in ("visual", "text"):
                raise ParameterError(f"eval modality must be visual or text, got {m!r}")
        if self.horizon < 2 * (self.grid_size - 1):
            raise ParameterError(
                f"horizon {self.horizon} cannot reach every cell of a {self.grid_size} grid"
            )
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "eval_modalities", tuple(self.eval_modalities))
        for name in ("encoder_visual_hidden", "encoder_text_hidden", "policy_hidden"):
            object.__setattr__(self, name, tuple(int(h) for h in getattr(self, name)))
        object.__setattr__(self, "ablations", tuple(dict(a) for a in self.ablations))
        for abl in self.ablations:
            unknown = set(abl) - _VARIANT_KEYS
            if unknown:
                raise ParameterError(f"unknown ablation keys: {sorted(unknown)}")
        self.base_variant()  # validate the base cell eagerly

    def base_variant(self) -> VariantSpec:
        return VariantSpec(
            collapse=self.collapse,
            delete_k=self.delete_k,
            corrupt_kind=self.corrupt_kind,
            alpha=self.alpha,
            std=self.std,
            injected_gap_norm=self.injected_gap_norm,
        )

    def variants(self) -> list[VariantSpec]:
        base = self.base_variant()
        return [base] + [replace(base, **abl) for abl in self.ablations]

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchConfig":
        if not isinstance(doc, dict):
            raise ParameterError("config must be a JSON object")
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(doc) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        if "schema_version" not in doc:
            raise ParameterError("config is missing schema_version")
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if isinstance(value, tuple):
                value = list(value)
            doc[name] = value
        return doc

    def trainer_config(self, seed: int) -> TrainerConfig:
        return TrainerConfig(
            obs_dim=self.grid_size * self.grid_size,
            vocab_size=len(build_vocab(self.grid_size)),
            dim=self.dim,
            visual_hidden=self.encoder_visual_hidden,
            text_hidden=self.encoder_text_hidden,
            token_dim=self.encoder_token_dim,
            temperature=self.encoder_temperature,
            steps=self.encoder_steps,
            batch_size=self.encoder_batch_size,
            learning_rate=self.encoder_learning_rate,
            momentum=self.encoder_momentum,
            seed=seed,
            freeze_text_after=self.encoder_freeze_text_after,
        )

    def policy_config(self, seed: int) -> PolicyConfig:
        return PolicyConfig(
            steps=self.policy_steps,
            batch_size=self.policy_batch_size,
            learning_rate=self.policy_learning_rate,
            momentum=self.policy_momentum,
            hidden=self.policy_hidden,
            seed=seed,
        )


@dataclass(frozen=True)
class BenchRow:
    collapse: str
    corrupt_kind: str
    alpha_or_std: float | None
    train_modality: str
    eval_modality: str  # visual | text | text_heldout
    seed: int
    injected_gap_norm: float
    success_mean: float
    success_std: float
    chance_floor: float

    def csv_values(self) -> list[str]:
        return [
            self.collapse,
            self.corrupt_kind,
            "" if self.alpha_or_std is None else repr(float(self.alpha_or_std)),
            self.train_modality,
            self.eval_modality,
            repr(float(self.success_mean)),
            repr(float(self.success_std)),
            repr(float(self.chance_floor)),
        ]


@dataclass
class TransferReport:
    config: dict
    chance_floor: float
    rows: list[BenchRow] = field(default_factory=list)
    aggregates: list[dict] = field(default_factory=list)

    def aggregate(self, eval_modality: str, **variant_fields) -> dict:
        """The cross-seed aggregate row matching the given cell."""
        for agg in self.aggregates:
            if agg["eval_modality"] != eval_modality:
                continue
            if all(agg[k] == v for k, v in variant_fields.items()):
                return agg
        raise KeyError(f"no aggregate for {eval_modality} {variant_fields}")

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "chance_floor": self.chance_floor,
            "rows": [
                {
                    "collapse": r.collapse,
                    "corrupt_kind": r.corrupt_kind,
                    "alpha_or_std": r.alpha_or_std,
                    "train_modality": r.train_modality,
                    "eval_modality": r.eval_modality,
                    "seed": r.seed,
                    "injected_gap_norm": r.injected_gap_norm,
                    "success_mean": r.success_mean,
                    "success_std": r.success_std,
                    "chance_floor": r.chance_floor,
                }
                for r in self.rows
            ],
            "aggregates": self.aggregates,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow(row.csv_values())


def clips_from_dataset(
    dataset: Sequence[tuple[Trajectory, GridTask]],
    template_indices: Sequence[int] = TRAIN_TEMPLATE_INDICES,
) -> list[Clip]:
    """Trajectories with at least one transition become encoder clips."""
    clips = []
    for traj, task in dataset:
        if len(traj.states) < 2:
            continue
        clips.append(
            Clip(traj.observations, tuple(task.templates[i] for i in template_indices))
        )
    return clips


def text_reference_bank(
    encoders, tasks: Sequence[GridTask], template_indices: Sequence[int] = TRAIN_TEMPLATE_INDICES
) -> EmbeddingBank:
    """Unit text embeddings of every task under every given template.

    Rows are normalized to match the goal-embedding boundary, so collapse
    statistics fit here apply to what policies actually consume.
    """
    ids, seqs = [], []
    for task in sorted(tasks, key=lambda t: t.task_id):
        for i in template_indices:
            ids.append(task.task_id)
            seqs.append(task.templates[i])
    values = text_forward(encoders, seqs)
    values = values / np.linalg.norm(values, axis=1, keepdims=True)
    return EmbeddingBank(Modality.TEXT, values.shape[1], tuple(ids), values)


def _fit_transform(
    variant: VariantSpec, ref_v: EmbeddingBank, ref_l: EmbeddingBank
) -> CollapseTransform | None:
    if variant.collapse == "none":
        return None
    if variant.collapse == "centralize":
        return fit_centralize(ref_v, ref_l, fit_reference="bench_reference_banks")
    return fit_delete(ref_v, ref_l, variant.delete_k, fit_reference="bench_reference_banks")


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc


def run_transfer_experiment(config: BenchConfig) -> TransferReport:
    """Run the full pipeline per seed and variant; aggregate mean and std
    across seeds per (variant, eval modality)."""
    tasks = _stage("generate_tasks", generate_tasks, config.grid_size, config.world_seed)
    floor = _stage(
        "chance_floor",
        chance_floor,
        tasks,
        config.episodes_per_task,
        config.horizon,
        subseed(config.world_seed, _CHANCE_TAG),
    )
    gap_direction = normalize(
        np.random.default_rng(subseed(config.world_seed, _GAP_TAG)).standard_normal(config.dim)
    )
    train_modality = Modality(config.train_modality)
    variants = config.variants()
    report = TransferReport(config=config.to_dict(), chance_floor=floor)

    for seed in config.seeds:
        dataset = _stage(
            "build_dataset", build_dataset, tasks, config.demos_per_task, subseed(seed, _STAGE_DATA)
        )
        clips = clips_from_dataset(dataset)
        encoders = _stage(
            "train_encoders", train_encoders, clips, config.trainer_config(subseed(seed, _STAGE_ENCODER))
        ).params
        for vi, variant in enumerate(variants):
            offset = (
                gap_direction * variant.injected_gap_norm
                if variant.injected_gap_norm > 0.0
                else None
            )
            ref_v, _ = _stage(
                "reference_banks",
                build_goal_bank,
                encoders,
                None,
                dataset,
                Modality.VISUAL,
                subseed(seed, _STAGE_REFBANK),
                None,
                offset,
            )
            ref_l = _stage("reference_banks", text_reference_bank, encoders, tasks)
            transform = _stage("fit_collapse", _fit_transform, variant, ref_v, ref_l)
            corrupt_cfg = variant.corrupt_config(subseed(seed, _STAGE_CORRUPT, vi))
            policy = _stage(
                "train_policy",
                train_policy,
                dataset,
                encoders,
                transform,
                corrupt_cfg,
                train_modality,
                config.policy_config(subseed(seed, _STAGE_POLICY, vi)),
                TRAIN_TEMPLATE_INDICES,
                offset,
            ).params

            evals: list[tuple[str, Sequence[int] | None]] = []
            for m in config.eval_modalities:
                evals.append((m, TRAIN_TEMPLATE_INDICES if m == "text" else None))
            if config.eval_heldout_text and "text" in config.eval_modalities:
                evals.append(("text_heldout", HELDOUT_TEMPLATE_INDICES))
            for eval_name, pool in evals:
                eval_modality = Modality.TEXT if eval_name.startswith("text") else Modality.VISUAL
                tag = _STAGE_EVAL_HELDOUT if eval_name == "text_heldout" else _STAGE_EVAL
                result = _stage(
                    "evaluate_policy",
                    evaluate_policy,
                    policy,
                    tasks,
                    eval_modality,
                    encoders,
                    transform,
                    config.episodes_per_task,
                    config.horizon,
                    subseed(seed, tag, vi),
                    pool,
                    offset if eval_modality is Modality.VISUAL else None,
                )
                per_task = np.array(list(result.per_task.values()))
                report.rows.append(
                    BenchRow(
                        collapse=variant.collapse,
                        corrupt_kind=variant.corrupt_kind,
                        alpha_or_std=variant.alpha_or_std,
                        train_modality=config.train_modality,
                        eval_modality=eval_name,
                        seed=seed,
                        injected_gap_norm=variant.injected_gap_norm,
                        success_mean=float(result.success_rate),
                        success_std=float(per_task.std()),
                        chance_floor=floor,
                    )
                )

    for variant in variants:
        names = list(config.eval_modalities)
        if config.eval_heldout_text and "text" in config.eval_modalities:
            names.append("text_heldout")
        for eval_name in names:
            values = [
                r.success_mean
                for r in report.rows
                if r.eval_modality == eval_name
                and r.collapse == variant.collapse
                and r.corrupt_kind == variant.corrupt_kind
                and r.alpha_or_std == variant.alpha_or_std
                and r.injected_gap_norm == variant.injected_gap_norm
            ]
            report.aggregates.append(
                {
                    "collapse": variant.collapse,
                    "corrupt_kind": variant.corrupt_kind,
                    "alpha_or_std": variant.alpha_or_std,
                    "injected_gap_norm": variant.injected_gap_norm,
                    "train_modality": config.train_modality,
                    "eval_modality": eval_name,
                    "success_mean": float(np.mean(values)),
                    "success_std": float(np.std(values)),
                    "chance_floor": floor,
                    "n_seeds": len(values),
                }
            )
    return report
