import json

import pytest

from modalign import ParameterError, PipelineError
from modalign.bench import (
    CSV_COLUMNS,
    BenchConfig,
    VariantSpec,
    run_transfer_experiment,
    subseed,
)


def tiny_config(**overrides):
    base = dict(
        grid_size=3,
        demos_per_task=4,
        dim=8,
        seeds=(0,),
        episodes_per_task=2,
        horizon=4,
        encoder_steps=150,
        policy_steps=150,
        eval_heldout_text=True,
    )
    base.update(overrides)
    return BenchConfig(**base)


class TestBenchConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ParameterError, match="bogus"):
            BenchConfig.from_dict({"schema_version": 1, "bogus": 3})

    def test_missing_schema_version_rejected(self):
        with pytest.raises(ParameterError, match="schema_version"):
            BenchConfig.from_dict({"grid_size": 4})

    def test_unknown_ablation_key_rejected(self):
        with pytest.raises(ParameterError, match="nope"):
            tiny_config(ablations=({"nope": 1},))

    def test_horizon_must_reach_every_cell(self):
        with pytest.raises(ParameterError, match="horizon"):
            tiny_config(horizon=3)

    def test_roundtrip_through_dict(self):
        cfg = tiny_config(ablations=({"collapse": "delete"},))
        again = BenchConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_variants_apply_overrides(self):
        cfg = tiny_config(ablations=({"collapse": "none", "injected_gap_norm": 2.0},))
        variants = cfg.variants()
        assert variants[0].collapse == "centralize"
        assert variants[1].collapse == "none"
        assert variants[1].injected_gap_norm == 2.0

    def test_bad_variant_values(self):
        with pytest.raises(ParameterError):
            VariantSpec(collapse="sideways")
        with pytest.raises(ParameterError):
            VariantSpec(corrupt_kind="salt")


class TestSubseed:
    def test_deterministic_and_distinct(self):
        assert subseed(1, 2) == subseed(1, 2)
        assert subseed(1, 2) != subseed(2, 1)
        assert subseed(0, 0) != subseed(0, 1)


@pytest.fixture(scope="module")
def report():
    return run_transfer_experiment(tiny_config())


class TestRunTransferExperiment:
    def test_rows_cover_eval_modalities(self, report):
        names = {r.eval_modality for r in report.rows}
        assert names == {"visual", "text", "text_heldout"}

    def test_row_counts(self, report):
        # 1 seed x 1 variant x 3 eval rows
        assert len(report.rows) == 3

    def test_chance_floor_in_unit_interval(self, report):
        assert 0.0 <= report.chance_floor <= 1.0
        for row in report.rows:
            assert row.chance_floor == report.chance_floor

    def test_aggregates_match_rows_for_single_seed(self, report):
        for agg in report.aggregates:
            rows = [r for r in report.rows if r.eval_modality == agg["eval_modality"]]
            assert agg["success_mean"] == pytest.approx(rows[0].success_mean)
            assert agg["n_seeds"] == 1

    def test_deterministic_rerun(self, report):
        again = run_transfer_experiment(tiny_config())
        assert [r.success_mean for r in again.rows] == [r.success_mean for r in report.rows]

    def test_json_and_csv_outputs(self, report, tmp_path):
        json_path = tmp_path / "report.json"
        csv_path = tmp_path / "report.csv"
        report.write_json(json_path)
        report.write_csv(csv_path)
        doc = json.loads(json_path.read_text())
        assert doc["chance_floor"] == report.chance_floor
        assert len(doc["rows"]) == len(report.rows)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 1 + len(report.rows)

    def test_csv_byte_identical_on_rerun(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        run_transfer_experiment(tiny_config()).write_csv(p1)
        run_transfer_experiment(tiny_config()).write_csv(p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestAblations:
    def test_ablation_rows_added(self):
        cfg = tiny_config(
            eval_heldout_text=False,
            eval_modalities=("text",),
            ablations=({"collapse": "none"},),
        )
        report = run_transfer_experiment(cfg)
        assert {r.collapse for r in report.rows} == {"centralize", "none"}
        assert len(report.rows) == 2

    def test_injected_gap_hurts_without_collapse(self):
        # ablation oracle at small scale: uncorrected gap must not beat
        # centralize on cross-modal success
        cfg = tiny_config(
            grid_size=4,
            demos_per_task=8,
            dim=12,
            encoder_steps=800,
            policy_steps=1200,
            episodes_per_task=4,
            horizon=6,
            eval_heldout_text=False,
            eval_modalities=("text",),
            ablations=({"collapse": "none", "injected_gap_norm": 2.0},),
        )
        report = run_transfer_experiment(cfg)
        centralize = report.aggregate("text", collapse="centralize")
        none_gap = report.aggregate("text", collapse="none")
        assert none_gap["success_mean"] < centralize["success_mean"]

    def test_gaussian_variant_runs(self):
        cfg = tiny_config(
            eval_heldout_text=False,
            eval_modalities=("visual",),
            corrupt_kind="gaussian",
            std=0.05,
        )
        report = run_transfer_experiment(cfg)
        assert report.rows[0].corrupt_kind == "gaussian"
        assert report.rows[0].alpha_or_std == 0.05

    def test_stage_failure_is_named(self, monkeypatch):
        import modalign.bench as bench_module

        def broken(*args, **kwargs):
            raise ValueError("boom")

        monkeypatch.setattr(bench_module, "train_encoders", broken)
        with pytest.raises(PipelineError, match="train_encoders") as info:
            run_transfer_experiment(tiny_config())
        assert info.value.stage == "train_encoders"
