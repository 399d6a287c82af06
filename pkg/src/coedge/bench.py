"""Scenario runner and report generator.

Executes the four deployment modes over prompt sets on the simulated link,
aggregates the cost breakdown (edge / cloud / critical-path communication),
byte and request-rate accounting, and per-exit confidence histograms, and
exports CSV/JSON reports against a committed schema.

"Communication cost" here is critical-path transfer time: transfer intervals
that delay token progress. Asynchronous uploads overlapped with edge compute
are excluded, which is exactly the benefit the overlap design buys.

The analytic byte model reproduces, in closed form, what the ledger measures:

    naive     sum_{t=1..T} (P + t - 1) * d * 4        (full-prefix float32 re-upload)
    collaborative  (P + T) * d * (2 if f16 else 4)          (each position uploaded once)

plus per-message framing overhead for the framed totals.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from dataclasses import dataclass, field
from importlib import resources
from itertools import zip_longest

import numpy as np

from . import client as client_mod
from . import model as model_mod
from . import prompts as prompts_mod
from . import protocol, transport
from .channels import SimCostModel
from .client import EdgeConfig, RunResult, TokenTrace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

STRATEGY_NAIVE = "naive"
STRATEGY_COLLAB = "collaborative"

CSV_COLUMNS = [
    "strategy",
    "theta",
    "total_s_mean",
    "total_s_std",
    "cloud_s",
    "edge_s",
    "comm_s",
    "bytes_up",
    "bytes_down",
    "cloud_req_rate",
    "disagreement_rate",
]

HIST_BINS = 20

# fixed wire overheads (see PROTOCOL.md)
_FRAME = protocol.FRAME_HEADER_LEN  # 18
_OPEN_EMPTY = _FRAME + protocol.OPEN_SESSION_FIXED_LEN  # 54, prompt-free OpenSession
_UPLOAD_OVERHEAD = _FRAME + protocol.CONTEXT_UPLOAD_FIXED_LEN  # 29 per ContextUpload
_REQUEST = _FRAME + protocol.INFER_REQUEST_LEN  # 22
_RESPONSE = _FRAME + protocol.INFER_RESPONSE_LEN  # 30
_CLOSE = _FRAME  # 18


# --- analytic byte model -----------------------------------------------------


@dataclass(frozen=True)
class AnalyticBytes:
    payload: int
    framed_up: int
    framed_down: int

    @property
    def framed_total(self) -> int:
        return self.framed_up + self.framed_down


def analytic_bytes(
    prompt_len: int,
    new_tokens: int,
    hidden_dim: int,
    precision: str,
    strategy: str,
) -> AnalyticBytes:
    """Closed-form transmitted activation bytes per run.

    Framed totals assume the deterministic message pattern of the
    corresponding client: for "collaborative" that is always-offload
    (theta > 1) with upload_policy=always.
    """
    if prompt_len < 1 or new_tokens < 0 or hidden_dim < 1:
        raise ValueError("prompt_len, hidden_dim must be >= 1 and new_tokens >= 0")
    if precision not in (client_mod.WIRE_F16, client_mod.WIRE_F32):
        raise ValueError(f"unknown precision {precision!r}")
    width = 2 if precision == client_mod.WIRE_F16 else 4
    P, T, d = prompt_len, new_tokens, hidden_dim
    if strategy == STRATEGY_NAIVE:
        if precision != client_mod.WIRE_F32:
            raise ValueError("the naive baseline transmits float32")
        payload = sum((P + t - 1) * d * 4 for t in range(1, T + 1))
        framed_up = T * (_OPEN_EMPTY + _UPLOAD_OVERHEAD + _REQUEST + _CLOSE) + payload
        framed_down = T * _RESPONSE
    elif strategy == STRATEGY_COLLAB:
        payload = (P + T) * d * width
        if T == 0 and P >= 2:
            upload_frames = 2  # prompt context block + last prompt position
        elif T == 0:
            upload_frames = 1
        else:
            upload_frames = (2 if P >= 2 else 1) + T
        framed_up = (
            _OPEN_EMPTY + _CLOSE + upload_frames * _UPLOAD_OVERHEAD + payload + T * _REQUEST
        )
        framed_down = T * _RESPONSE
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    if payload + framed_up > 2**63:
        raise OverflowError("byte count overflow")
    return AnalyticBytes(payload=payload, framed_up=framed_up, framed_down=framed_down)


# --- confidence histograms ----------------------------------------------------


@dataclass
class ConfidenceHistogram:
    """Per exit point: 20 equal-width bins over [0,1] plus quartiles."""

    bins: dict[int, list[int]]
    quantiles: dict[int, tuple[float, float, float]]
    counts: dict[int, int]

    @classmethod
    def from_traces(cls, traces: list[TokenTrace]) -> "ConfidenceHistogram":
        if not traces:
            raise ValueError("empty trace set")
        per_exit: dict[int, list[float]] = {}
        for tr in traces:
            for boundary, conf in tr.confs.items():
                per_exit.setdefault(int(boundary), []).append(conf)
        bins, quant, counts = {}, {}, {}
        for boundary, confs in sorted(per_exit.items()):
            hist, _ = np.histogram(confs, bins=HIST_BINS, range=(0.0, 1.0))
            bins[boundary] = [int(c) for c in hist]
            p25, p50, p75 = np.percentile(confs, [25, 50, 75])
            quant[boundary] = (float(p25), float(p50), float(p75))
            counts[boundary] = len(confs)
        return cls(bins=bins, quantiles=quant, counts=counts)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["exit", "count", "p25", "p50", "p75"]
                + [f"bin_{i:02d}" for i in range(HIST_BINS)]
            )
            for boundary in sorted(self.bins):
                p25, p50, p75 = self.quantiles[boundary]
                writer.writerow(
                    [boundary, self.counts[boundary], repr(p25), repr(p50), repr(p75)]
                    + self.bins[boundary]
                )


def confidence_histogram(traces: list[TokenTrace]) -> ConfidenceHistogram:
    return ConfidenceHistogram.from_traces(traces)


# --- scenarios and reports -----------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    model_file: str
    mode: str
    theta: float = 0.8
    wire_precision: str = client_mod.WIRE_F16
    upload_policy: str = client_mod.POLICY_ALWAYS
    link: transport.LinkParams = field(default_factory=transport.default_link_params)
    prompts: str = "short"
    prompt_count: int | None = None
    max_new_tokens: int = 100
    repetitions: int = 5
    seed: int = 0
    cost: SimCostModel = field(default_factory=SimCostModel)
    record_wire_deviation: bool = False

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def edge_config(self) -> EdgeConfig:
        policy = self.upload_policy
        if self.mode == client_mod.MODE_STANDALONE:
            policy = client_mod.POLICY_NEVER
        return EdgeConfig(
            mode=self.mode,
            theta=self.theta,
            upload_policy=policy,
            wire_precision=self.wire_precision,
            max_new_tokens=self.max_new_tokens,
        )


@dataclass
class MetricsReport:
    strategy: str
    theta: float
    total_s_mean: float
    total_s_std: float
    cloud_s_mean: float
    cloud_s_std: float
    edge_s_mean: float
    edge_s_std: float
    comm_s_mean: float
    comm_s_std: float
    bytes_up: int
    bytes_down: int
    cloud_request_count: int
    cloud_request_rate: float
    tokens_generated: int
    per_exit_tokens: dict[str, int]
    disagreement_rate: float
    histogram: ConfidenceHistogram | None = None
    wire_logit_deviation: float | None = None

    def to_row(self) -> dict:
        return {
            "strategy": self.strategy,
            "theta": self.theta,
            "total_s_mean": self.total_s_mean,
            "total_s_std": self.total_s_std,
            "cloud_s": self.cloud_s_mean,
            "edge_s": self.edge_s_mean,
            "comm_s": self.comm_s_mean,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "cloud_req_rate": self.cloud_request_rate,
            "disagreement_rate": self.disagreement_rate,
        }


def _std(values: list[float]) -> float:
    return statistics.pstdev(values) if len(values) > 1 else 0.0


def _disagreement(tokens: list[int], oracle: list[int]) -> float:
    if not oracle:
        return 0.0
    diff = sum(1 for a, b in zip_longest(tokens, oracle) if a != b)
    return min(diff / len(oracle), 1.0)


def _run_prompt(mdl, prompt, config, scenario, rep, index) -> RunResult:
    # each prompt runs against its own fresh simulated world
    sid = index + 1
    if config.mode == client_mod.MODE_STANDALONE:
        return client_mod.run_standalone(mdl, prompt, config, cost=scenario.cost)
    channel = client_mod.build_sim_channel(
        mdl,
        config,
        link_params=scenario.link,
        cost=scenario.cost,
        seed=scenario.seed * 1000 + rep,
    )
    return client_mod.run_mode(mdl, prompt, config, channel, session_id=sid)


def _measure_wire_deviation(mdl, prompt, scenario) -> float:
    """Max abs difference between cloud logits under f16 vs f32 wire."""
    captured: dict[str, dict[int, np.ndarray]] = {"f16": {}, "f32": {}}
    for wire in ("f16", "f32"):
        config = EdgeConfig(
            mode=client_mod.MODE_COLLABORATIVE,
            theta=scenario.theta,
            upload_policy=client_mod.POLICY_ALWAYS,
            wire_precision=wire,
            max_new_tokens=scenario.max_new_tokens,
        )
        channel = client_mod.build_sim_channel(mdl, config, link_params=scenario.link, cost=scenario.cost)
        store = captured[wire]
        channel.manager.logits_probe = lambda sid, pos, logits, store=store: store.__setitem__(
            pos, logits.copy()
        )
        client_mod.run_collaborative(mdl, prompt, config, channel, session_id=9)
    common = captured["f16"].keys() & captured["f32"].keys()
    if not common:
        return 0.0
    return max(
        float(np.max(np.abs(captured["f16"][p] - captured["f32"][p]))) for p in common
    )


def run_scenario(scenario: Scenario) -> MetricsReport:
    """Execute a scenario's repetitions and aggregate mean +/- std."""
    mdl = model_mod.load_model(scenario.model_file)
    prompt_list = prompts_mod.resolve_prompts(scenario.prompts)
    if scenario.prompt_count is not None:
        prompt_list = prompt_list[: scenario.prompt_count]
    if not prompt_list:
        raise ValueError("scenario has no prompts")
    config = scenario.edge_config()
    oracles = [
        model_mod.greedy_decode_monolithic(mdl, p, scenario.max_new_tokens) for p in prompt_list
    ]

    totals, clouds, edges, comms = [], [], [], []
    bytes_up = bytes_down = requests = tokens_generated = 0
    per_exit: dict[str, int] = {}
    disagreements: list[float] = []
    traces: list[TokenTrace] = []
    for rep in range(scenario.repetitions):
        t = c = e = m = 0.0
        for i, prompt in enumerate(prompt_list):
            result = _run_prompt(mdl, prompt, config, scenario, rep, i)
            t += result.total_s
            c += result.cloud_s
            e += result.edge_s
            m += result.comm_s
            if rep == 0:
                bytes_up += result.bytes_up
                bytes_down += result.bytes_down
                requests += result.cloud_requests
                tokens_generated += len(result.tokens)
                disagreements.append(_disagreement(result.tokens, oracles[i]))
                traces.extend(result.traces)
                for origin, count in result.exit_token_counts().items():
                    per_exit[origin] = per_exit.get(origin, 0) + count
        totals.append(t)
        clouds.append(c)
        edges.append(e)
        comms.append(m)

    deviation = None
    if scenario.record_wire_deviation and config.mode == client_mod.MODE_COLLABORATIVE:
        deviation = max(_measure_wire_deviation(mdl, p, scenario) for p in prompt_list)

    hist = None
    if any(tr.confs for tr in traces):
        hist = ConfidenceHistogram.from_traces([tr for tr in traces if tr.confs])
    return MetricsReport(
        strategy=scenario.mode,
        theta=scenario.theta,
        total_s_mean=statistics.mean(totals),
        total_s_std=_std(totals),
        cloud_s_mean=statistics.mean(clouds),
        cloud_s_std=_std(clouds),
        edge_s_mean=statistics.mean(edges),
        edge_s_std=_std(edges),
        comm_s_mean=statistics.mean(comms),
        comm_s_std=_std(comms),
        bytes_up=bytes_up,
        bytes_down=bytes_down,
        cloud_request_count=requests,
        cloud_request_rate=(requests / tokens_generated) if tokens_generated else 0.0,
        tokens_generated=tokens_generated,
        per_exit_tokens=per_exit,
        disagreement_rate=statistics.mean(disagreements) if disagreements else 0.0,
        histogram=hist,
        wire_logit_deviation=deviation,
    )


# --- report export --------------------------------------------------------


def report_schema() -> dict:
    text = resources.files("coedge").joinpath("report_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, report_schema())


def export_report(reports: list[MetricsReport], path: str, fmt: str) -> None:
    """CSV (fixed columns) or JSON ({"schema_version": 1, "rows": [...]})."""
    rows = [r.to_row() for r in reports]
    if fmt == "csv":
        write_rows_csv(rows, path)
    elif fmt == "json":
        doc = {"schema_version": 1, "rows": rows}
        validate_report(doc)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def write_rows_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(
                [row["strategy"]]
                + [repr(float(row[c])) for c in CSV_COLUMNS[1:7]]
                + [str(int(row["bytes_up"])), str(int(row["bytes_down"]))]
                + [repr(float(row["cloud_req_rate"])), repr(float(row["disagreement_rate"]))]
            )


def read_rows_csv(path: str) -> list[dict]:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for raw in reader:
            row = {"strategy": raw["strategy"]}
            for col in CSV_COLUMNS[1:]:
                value = float(raw[col])
                row[col] = int(value) if col in ("bytes_up", "bytes_down") else value
            rows.append(row)
    return rows


# --- scenario config files ------------------------------------------------


def load_scenario(path: str) -> Scenario:
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    link_doc = doc.pop("link", {})
    cost_doc = doc.pop("cost", {})
    link = transport.LinkParams.from_cli(
        bandwidth_mbps=link_doc.get("bandwidth_mbps", 100.0),
        rtt_ms=link_doc.get("rtt_ms", 20.0),
        jitter_ms=link_doc.get("jitter_ms", 0.0),
    )
    cost = SimCostModel(
        edge_layer_s=cost_doc.get("edge_layer_s", SimCostModel.edge_layer_s),
        cloud_layer_s=cost_doc.get("cloud_layer_s", SimCostModel.cloud_layer_s),
        head_eval_s=cost_doc.get("head_eval_s", SimCostModel.head_eval_s),
    )
    return Scenario(
        model_file=doc["model"],
        mode=doc["mode"],
        theta=doc.get("theta", 0.8),
        wire_precision=doc.get("wire_precision", client_mod.WIRE_F16),
        upload_policy=doc.get("upload_policy", client_mod.POLICY_ALWAYS),
        link=link,
        prompts=doc.get("prompts", "short"),
        prompt_count=doc.get("prompt_count"),
        max_new_tokens=doc.get("max_new_tokens", 100),
        repetitions=doc.get("repetitions", 5),
        seed=doc.get("seed", 0),
        cost=cost,
        record_wire_deviation=doc.get("record_wire_deviation", False),
    )


# --- CLI --------------------------------------------------------------------


def _cmd_run(args) -> int:
    scenario = load_scenario(args.config)
    report = run_scenario(scenario)
    print(
        f"{report.strategy}: total {report.total_s_mean:.4f}s +/- {report.total_s_std:.4f} "
        f"(edge {report.edge_s_mean:.4f}, cloud {report.cloud_s_mean:.4f}, "
        f"comm {report.comm_s_mean:.4f}); bytes up/down {report.bytes_up}/{report.bytes_down}; "
        f"request rate {report.cloud_request_rate:.4f}; "
        f"disagreement {report.disagreement_rate:.4f}"
    )
    if args.out:
        fmt = "json" if args.out.endswith(".json") else "csv"
        export_report([report], args.out, fmt)
        print(f"report written to {args.out}")
    if args.hist_out and report.histogram is not None:
        report.histogram.write_csv(args.hist_out)
        print(f"histogram written to {args.hist_out}")
    return 0


def _cmd_bytes(args) -> int:
    result = analytic_bytes(
        args.prompt_len, args.new_tokens, args.hidden_dim, args.precision, args.strategy
    )
    print(f"payload_bytes={result.payload}")
    print(f"framed_up={result.framed_up}")
    print(f"framed_down={result.framed_down}")
    return 0


def _cmd_hist(args) -> int:
    traces = []
    with open(args.trace, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            traces.append(
                TokenTrace(
                    position=doc["position"],
                    origin=doc["origin"],
                    confs={int(k): float(v) for k, v in doc.get("confs", {}).items()},
                    edge_s=doc.get("edge_s", 0.0),
                    cloud_rtt_s=doc.get("cloud_rtt_s"),
                )
            )
    hist = ConfidenceHistogram.from_traces([tr for tr in traces if tr.confs])
    hist.write_csv(args.out)
    print(f"histogram written to {args.out}")
    return 0


def _cmd_genmodel(args) -> int:
    config = model_mod.default_config()
    digest = model_mod.generate_model(config, args.seed, args.out)
    print(f"model written to {args.out} (sha256 {digest.hex()[:16]}...)")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="coedge-bench", description="benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario config")
    p_run.add_argument("config", help="scenario TOML file")
    p_run.add_argument("--out", default=None, help="report path (.csv or .json)")
    p_run.add_argument("--hist-out", default=None, help="confidence histogram CSV path")
    p_run.set_defaults(func=_cmd_run)

    p_bytes = sub.add_parser("bytes", help="analytic transmitted-bytes model")
    p_bytes.add_argument("--prompt-len", type=int, required=True)
    p_bytes.add_argument("--new-tokens", type=int, required=True)
    p_bytes.add_argument("--hidden-dim", type=int, required=True)
    p_bytes.add_argument("--precision", choices=["f16", "f32"], required=True)
    p_bytes.add_argument("--strategy", choices=[STRATEGY_NAIVE, STRATEGY_COLLAB], required=True)
    p_bytes.set_defaults(func=_cmd_bytes)

    p_hist = sub.add_parser("hist", help="confidence histogram from a trace file")
    p_hist.add_argument("trace", help="trace JSONL from coedge-client --trace-out")
    p_hist.add_argument("--out", required=True, help="output CSV path")
    p_hist.set_defaults(func=_cmd_hist)

    p_gen = sub.add_parser("genmodel", help="generate the default desk-scale model file")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=7)
    p_gen.set_defaults(func=_cmd_genmodel)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
