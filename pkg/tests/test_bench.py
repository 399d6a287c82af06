"""Bench harness: analytic byte model, histograms, scenario runs, report schema."""

import json

import numpy as np
import pytest

from coedge import bench as B
from coedge import model as M
from coedge import prompts as PR
from coedge.client import TokenTrace


@pytest.fixture
def prompt_file(tmp_path):
    prompts = PR.make_prompt_set(3, (6, 10), vocab_limit=40, seed=2)
    path = tmp_path / "prompts.txt"
    PR.save_prompt_file(str(path), prompts)
    return str(path)


def scenario(model_file, prompt_file, **kw):
    base = dict(
        model_file=model_file,
        mode="collaborative",
        theta=1.5,
        wire_precision="f32",
        prompts=prompt_file,
        max_new_tokens=8,
        repetitions=2,
        seed=5,
    )
    base.update(kw)
    return B.Scenario(**base)


class TestAnalyticBytes:
    def test_naive_large_model_scale(self):
        result = B.analytic_bytes(30, 100, 4096, "f32", "naive")
        assert result.payload == 130_252_800

    def test_collaborative_large_model_scale(self):
        result = B.analytic_bytes(30, 100, 4096, "f16", "collaborative")
        assert result.payload == 1_064_960

    def test_reduction_ratio_magnitude(self):
        naive = B.analytic_bytes(30, 100, 4096, "f32", "naive").payload
        ce = B.analytic_bytes(30, 100, 4096, "f16", "collaborative").payload
        reduction = 1 - ce / naive
        assert reduction == pytest.approx(0.9918, abs=5e-4)

    def test_zero_new_tokens_boundary(self):
        naive = B.analytic_bytes(12, 0, 64, "f32", "naive")
        assert naive.payload == 0 and naive.framed_up == 0
        ce = B.analytic_bytes(12, 0, 64, "f16", "collaborative")
        assert ce.payload == 12 * 64 * 2  # prompt rows still uploaded

    def test_naive_requires_f32(self):
        with pytest.raises(ValueError):
            B.analytic_bytes(10, 5, 64, "f16", "naive")

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            B.analytic_bytes(10, 5, 64, "f32", "hybrid")

    def test_quadratic_vs_linear_growth(self):
        """Naive bytes fit the quadratic closed form, collaborative the linear one."""
        P, d = 11, 32
        for t in (25, 50, 100):
            naive = B.analytic_bytes(P, t, d, "f32", "naive").payload
            assert naive == (P * t + t * (t - 1) // 2) * d * 4  # quadratic in t
            assert naive == sum((P + i - 1) * d * 4 for i in range(1, t + 1))
            ce = B.analytic_bytes(P, t, d, "f16", "collaborative").payload
            assert ce == (P + t) * d * 2


class TestConfidenceHistogram:
    def trace(self, conf, exit_boundary=2):
        return TokenTrace(position=0, origin=f"exit:{exit_boundary}", confs={exit_boundary: conf}, edge_s=0.0)

    def test_identical_confidences_single_bin(self):
        hist = B.ConfidenceHistogram.from_traces([self.trace(0.41) for _ in range(9)])
        assert sum(1 for c in hist.bins[2] if c) == 1
        assert hist.bins[2][8] == 9  # 0.41 falls in bin [0.40, 0.45)
        assert hist.quantiles[2] == (pytest.approx(0.41), pytest.approx(0.41), pytest.approx(0.41))

    def test_counts_sum_to_evaluated_tokens(self):
        rng = np.random.default_rng(3)
        traces = [self.trace(float(c)) for c in rng.uniform(0, 1, 57)]
        hist = B.ConfidenceHistogram.from_traces(traces)
        assert sum(hist.bins[2]) == 57 == hist.counts[2]

    def test_empty_traces_rejected(self):
        with pytest.raises(ValueError):
            B.ConfidenceHistogram.from_traces([])

    def test_csv_emission(self, tmp_path):
        traces = [self.trace(0.2), self.trace(0.9), self.trace(0.5, exit_boundary=4)]
        hist = B.ConfidenceHistogram.from_traces(traces)
        out = tmp_path / "hist.csv"
        hist.write_csv(str(out))
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("exit,count,p25,p50,p75,bin_00")
        assert len(lines) == 3  # header + two exits


class TestRunScenario:
    def test_standalone_zero_cloud_and_comm(self, tiny_model_file, prompt_file):
        report = B.run_scenario(scenario(tiny_model_file, prompt_file, mode="standalone", theta=0.2))
        assert report.cloud_s_mean == 0.0
        assert report.comm_s_mean == 0.0
        assert report.cloud_request_rate == 0.0
        assert report.bytes_up == 0

    def test_cloud_only_zero_edge(self, tiny_model_file, prompt_file):
        report = B.run_scenario(scenario(tiny_model_file, prompt_file, mode="cloud-only"))
        assert report.edge_s_mean == 0.0
        assert report.disagreement_rate == 0.0

    def test_naive_request_rate_exactly_one(self, tiny_model_file, prompt_file):
        report = B.run_scenario(scenario(tiny_model_file, prompt_file, mode="naive-split"))
        assert report.cloud_request_rate == 1.0
        assert report.disagreement_rate == 0.0

    def test_collaborative_always_offload_matches_oracle_and_analytic(
        self, tiny_model_file, prompt_file
    ):
        report = B.run_scenario(scenario(tiny_model_file, prompt_file))
        assert report.disagreement_rate == 0.0
        assert report.cloud_request_rate == 1.0
        mdl = M.load_model(tiny_model_file)
        d = mdl.config.hidden_dim
        expected_up = expected_down = 0
        for prompt in PR.load_prompt_file(prompt_file):
            a = B.analytic_bytes(len(prompt), 8, d, "f32", "collaborative")
            expected_up += a.framed_up
            expected_down += a.framed_down
        assert report.bytes_up == expected_up
        assert report.bytes_down == expected_down

    def test_deterministic_repetitions_have_zero_std(self, tiny_model_file, prompt_file):
        report = B.run_scenario(scenario(tiny_model_file, prompt_file, repetitions=1))
        assert report.total_s_std == 0.0
        report5 = B.run_scenario(scenario(tiny_model_file, prompt_file, repetitions=3))
        assert report5.total_s_std == pytest.approx(0.0, abs=1e-12)

    def test_wire_deviation_recorded(self, tiny_model_file, prompt_file):
        report = B.run_scenario(
            scenario(tiny_model_file, prompt_file, wire_precision="f16", record_wire_deviation=True)
        )
        assert report.wire_logit_deviation is not None
        assert 0.0 <= report.wire_logit_deviation < 1.0


class TestReportExport:
    def make_report(self, tiny_model_file, prompt_file, **kw):
        return B.run_scenario(scenario(tiny_model_file, prompt_file, **kw))

    def test_json_schema_validation(self, tiny_model_file, prompt_file, tmp_path):
        report = self.make_report(tiny_model_file, prompt_file)
        out = tmp_path / "report.json"
        B.export_report([report], str(out), "json")
        doc = json.loads(out.read_text())
        B.validate_report(doc)  # committed schema

    def test_schema_rejects_bad_strategy(self):
        doc = {"schema_version": 1, "rows": [{"strategy": "bogus"}]}
        import jsonschema

        with pytest.raises(jsonschema.ValidationError):
            B.validate_report(doc)

    def test_json_csv_json_round_trip_preserves_numeric_fields(
        self, tiny_model_file, prompt_file, tmp_path
    ):
        reports = [
            self.make_report(tiny_model_file, prompt_file),
            self.make_report(tiny_model_file, prompt_file, mode="standalone", theta=0.3),
        ]
        json_path = tmp_path / "r.json"
        csv_path = tmp_path / "r.csv"
        B.export_report(reports, str(json_path), "json")
        rows_a = json.loads(json_path.read_text())["rows"]
        B.write_rows_csv(rows_a, str(csv_path))
        rows_b = B.read_rows_csv(str(csv_path))
        assert rows_a == rows_b

    def test_csv_columns_fixed(self, tiny_model_file, prompt_file, tmp_path):
        report = self.make_report(tiny_model_file, prompt_file)
        out = tmp_path / "report.csv"
        B.export_report([report], str(out), "csv")
        header = out.read_text().splitlines()[0]
        assert header == ",".join(B.CSV_COLUMNS)


class TestScenarioConfig:
    def test_toml_round_trip(self, tiny_model_file, prompt_file, tmp_path):
        config = tmp_path / "scenario.toml"
        config.write_text(
            "\n".join(
                [
                    f'model = "{tiny_model_file}"',
                    'mode = "collaborative"',
                    "theta = 1.5",
                    'wire_precision = "f32"',
                    f'prompts = "{prompt_file}"',
                    "max_new_tokens = 8",
                    "repetitions = 2",
                    "seed = 5",
                    "[link]",
                    "bandwidth_mbps = 50.0",
                    "rtt_ms = 10.0",
                    "[cost]",
                    "edge_layer_s = 1e-3",
                ]
            )
        )
        sc = B.load_scenario(str(config))
        assert sc.mode == "collaborative"
        assert sc.link.bandwidth == pytest.approx(50e6 / 8)
        assert sc.cost.edge_layer_s == pytest.approx(1e-3)
        report = B.run_scenario(sc)
        assert report.tokens_generated > 0
