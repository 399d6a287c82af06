"""Edge-side inference: threshold-gated early exits, asynchronous context
upload, and the three baseline deployment modes.

Modes:
  standalone     edge-only; the final exit's argmax is emitted even when its
                 confidence misses the threshold (there is no cloud to ask)
  collaborative  exits locally when confident, offloads low-confidence tokens
                 to the stateful cloud partition; context uploads overlap
                 edge compute
  naive-split    stateless-cloud baseline: the whole prefix's split-layer
                 activations are retransmitted in float32 for every token
  cloud-only     the server runs the full model; prompt up, tokens down
"""

from __future__ import annotations

import argparse
import json
import math
import random
import time
from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from . import protocol, transport
from .channels import CloudUnavailableError, SimChannel, SimCostModel, SocketChannel
from .protocol import ErrorCode, ProtocolError
from .server import MODE_FULL, MODE_PARTITION, SessionManager

MODE_STANDALONE = "standalone"
MODE_COLLABORATIVE = "collaborative"
MODE_NAIVE_SPLIT = "naive-split"
MODE_CLOUD_ONLY = "cloud-only"
ALL_MODES = (MODE_STANDALONE, MODE_COLLABORATIVE, MODE_NAIVE_SPLIT, MODE_CLOUD_ONLY)

POLICY_ALWAYS = "always"
POLICY_ON_FIRST_OFFLOAD = "on-first-offload"
POLICY_NEVER = "never"
ALL_POLICIES = (POLICY_ALWAYS, POLICY_ON_FIRST_OFFLOAD, POLICY_NEVER)

WIRE_F16 = "f16"
WIRE_F32 = "f32"


class ClientRunError(RuntimeError):
    def __init__(self, message: str, availability_failure: bool = False):
        super().__init__(message)
        self.availability_failure = availability_failure


@dataclass(frozen=True)
class EdgeConfig:
    mode: str
    theta: float = 0.8
    upload_policy: str = POLICY_ALWAYS
    wire_precision: str = WIRE_F16
    max_new_tokens: int = 100
    upload_queue_capacity: int = 8

    def __post_init__(self):
        if self.mode not in ALL_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.upload_policy not in ALL_POLICIES:
            raise ValueError(f"unknown upload policy {self.upload_policy!r}")
        if self.wire_precision not in (WIRE_F16, WIRE_F32):
            raise ValueError(f"unknown wire precision {self.wire_precision!r}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.theta < 0:
            raise ValueError("theta must be >= 0")
        if self.upload_queue_capacity < 1:
            raise ValueError("upload_queue_capacity must be >= 1")
        if self.mode == MODE_STANDALONE and self.upload_policy != POLICY_NEVER:
            raise ValueError("standalone mode forbids cloud-requiring upload policies")

    @property
    def wire_encoding(self) -> int:
        # the naive baseline is defined as float32 retransmission
        if self.mode == MODE_NAIVE_SPLIT:
            return protocol.ENC_F32
        return protocol.ENC_F16 if self.wire_precision == WIRE_F16 else protocol.ENC_F32


@dataclass
class TokenTrace:
    position: int
    origin: str  # "exit:<boundary>" or "cloud"
    confs: dict[int, float]
    edge_s: float
    cloud_rtt_s: float | None = None
    forced: bool = False


@dataclass
class RunResult:
    mode: str
    theta: float
    prompt_len: int
    tokens: list[int]
    traces: list[TokenTrace]
    edge_s: float
    cloud_s: float
    comm_s: float
    total_s: float
    bytes_up: int
    bytes_down: int
    cloud_requests: int

    @property
    def cloud_request_rate(self) -> float:
        return self.cloud_requests / len(self.tokens) if self.tokens else 0.0

    def exit_token_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for tr in self.traces:
            counts[tr.origin] = counts.get(tr.origin, 0) + 1
        return counts


@dataclass
class StepOutcome:
    row: np.ndarray  # split-layer activation for this position
    decisions: list[tuple[int, float, int]]  # (exit boundary, conf, argmax token)
    exited: tuple[int, int] | None  # (exit boundary, token) when conf >= theta


class EdgeRuntime:
    """Edge partition execution: embedding, layers [0,k), exit heads."""

    def __init__(self, model: model_mod.Model):
        self.model = model
        self.cfg = model.config
        self.k = self.cfg.split_layer
        self.cache = model_mod.KVCache(self.cfg, 0, self.k)
        self.rows: list[np.ndarray] = []  # split-layer rows by position

    def process_context(self, tokens: list[int], first_position: int) -> np.ndarray:
        """Positions processed as pure context (no exit evaluation)."""
        block = model_mod.embed(self.model, tokens, first_position)
        out = model_mod.forward_layers(self.model, (0, self.k), block, self.cache)
        for i in range(out.num_positions):
            self.rows.append(out.activations[i])
        return out.activations

    def step(self, token: int, position: int, theta: float, evaluate_exits: bool) -> StepOutcome:
        """One position through the edge stack, pausing at exit boundaries.

        Exits are evaluated in ascending layer order and short-circuit at the
        first confident one; the KV cache is always extended through layer
        k-1 so later positions can attend to this one.
        """
        if position >= self.cfg.max_seq_len:
            raise model_mod.SequenceOverflowError(f"position {position} >= max_seq_len")
        if self.cache.cached_len != position:
            raise model_mod.ContiguityError(
                f"edge cache at {self.cache.cached_len}, stepping position {position}"
            )
        block = model_mod.embed(self.model, [token], position)
        x = block.activations[0]
        decisions: list[tuple[int, float, int]] = []
        exited: tuple[int, int] | None = None
        prev = 0
        for e in self.cfg.exit_layers:
            x = model_mod.step_position(self.model, prev, e, x, position, self.cache)
            prev = e
            if evaluate_exits and exited is None:
                logits = model_mod.exit_head(self.model, e, x)
                conf, tok = model_mod.confidence(logits)
                decisions.append((e, conf, tok))
                if conf >= theta:
                    exited = (e, tok)
        x = model_mod.step_position(self.model, prev, self.k, x, position, self.cache)
        self.cache.cached_len = position + 1
        self.rows.append(x)
        return StepOutcome(row=x, decisions=decisions, exited=exited)


def _check_lengths(cfg: model_mod.ModelConfig, prompt: list[int], max_new: int) -> None:
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if len(prompt) + max_new > cfg.max_seq_len:
        raise model_mod.SequenceOverflowError(
            f"prompt {len(prompt)} + max_new {max_new} exceeds max_seq_len {cfg.max_seq_len}"
        )


def _is_eos(cfg: model_mod.ModelConfig, token: int) -> bool:
    return cfg.eos_token_id is not None and token == cfg.eos_token_id


def _result(mode, theta, prompt, tokens, traces, channel, requests) -> RunResult:
    ledger = channel.ledger
    return RunResult(
        mode=mode,
        theta=theta,
        prompt_len=len(prompt),
        tokens=tokens,
        traces=traces,
        edge_s=channel.edge_busy,
        cloud_s=channel.cloud_busy,
        comm_s=channel.comm_wait,
        total_s=channel.edge_busy + channel.cloud_busy + channel.comm_wait,
        bytes_up=ledger.bytes_up,
        bytes_down=ledger.bytes_down,
        cloud_requests=requests,
    )


def run_standalone(
    model: model_mod.Model,
    prompt: list[int],
    config: EdgeConfig,
    cost: SimCostModel | None = None,
) -> RunResult:
    """Edge-only decoding; zero network activity by construction."""
    assert config.mode == MODE_STANDALONE
    cfg = model.config
    _check_lengths(cfg, prompt, config.max_new_tokens)
    cost = cost or SimCostModel()
    edge = EdgeRuntime(model)
    edge_busy = 0.0
    if len(prompt) >= 2:
        edge.process_context(prompt[:-1], 0)
        edge_busy += cost.edge_cost(len(prompt) - 1, edge.k, 0)
    out = edge.step(prompt[-1], len(prompt) - 1, config.theta, evaluate_exits=True)
    step_cost = cost.edge_cost(1, edge.k, len(out.decisions))
    edge_busy += step_cost
    tokens: list[int] = []
    traces: list[TokenTrace] = []
    while len(tokens) < config.max_new_tokens:
        position = len(prompt) + len(tokens)
        confs = {e: c for e, c, _ in out.decisions}
        if out.exited is not None:
            boundary, token = out.exited
            forced = False
        else:
            boundary, _, token = out.decisions[-1]
            forced = True
        tokens.append(token)
        traces.append(
            TokenTrace(
                position=position,
                origin=f"exit:{boundary}",
                confs=confs,
                edge_s=step_cost,
                forced=forced,
            )
        )
        out = edge.step(token, position, config.theta, evaluate_exits=True)
        step_cost = cost.edge_cost(1, edge.k, len(out.decisions))
        edge_busy += step_cost
        if _is_eos(cfg, token):
            break
    return RunResult(
        mode=config.mode,
        theta=config.theta,
        prompt_len=len(prompt),
        tokens=tokens,
        traces=traces,
        edge_s=edge_busy,
        cloud_s=0.0,
        comm_s=0.0,
        total_s=edge_busy,
        bytes_up=0,
        bytes_down=0,
        cloud_requests=0,
    )


def _infer_with_retry(channel, edge: EdgeRuntime, target: int, allow_retransmit: bool):
    """One retry on CONTEXT_TIMEOUT: flush the upload queue, retransmit the
    rows the request depends on (the server's first-write-wins store makes
    this safe), then abort with a diagnostic if the cloud still lacks context."""
    try:
        return channel.infer(target)
    except ProtocolError as exc:
        if exc.code != ErrorCode.CONTEXT_TIMEOUT:
            raise ClientRunError(f"cloud error at position {target + 1}: {exc}") from exc
        channel.flush_through(target)
        if allow_retransmit:
            channel.enqueue_upload(edge.k, 0, np.stack(edge.rows[: target + 1]), force=True)
            channel.flush_through(target)
        try:
            return channel.infer(target)
        except ProtocolError as exc2:
            raise ClientRunError(
                f"aborting run: context for position {target + 1} still incomplete after retry: {exc2}"
            ) from exc2


def run_collaborative(
    model: model_mod.Model,
    prompt: list[int],
    config: EdgeConfig,
    channel,
    session_id: int,
) -> RunResult:
    """Threshold-gated decoding with cloud support for low-confidence tokens."""
    assert config.mode == MODE_COLLABORATIVE
    cfg = model.config
    _check_lengths(cfg, prompt, config.max_new_tokens)
    k = cfg.split_layer
    edge = EdgeRuntime(model)
    opened = False

    def ensure_open():
        # opened lazily so a run that never needs the cloud sends zero bytes
        nonlocal opened
        if not opened:
            channel.open_session(session_id, model.file_hash, ())
            opened = True

    uploads_started = config.upload_policy == POLICY_ALWAYS
    if uploads_started:
        ensure_open()
    if len(prompt) >= 2:
        rows = edge.process_context(prompt[:-1], 0)
        channel.edge_compute(len(prompt) - 1, k, 0)
        if uploads_started:
            channel.enqueue_upload(k, 0, rows)
    out = edge.step(prompt[-1], len(prompt) - 1, config.theta, evaluate_exits=True)
    step_cost = channel.edge_compute(1, k, len(out.decisions))
    if uploads_started:
        channel.enqueue_upload(k, len(prompt) - 1, out.row[None, :])
    tokens: list[int] = []
    traces: list[TokenTrace] = []
    requests = 0
    try:
        while len(tokens) < config.max_new_tokens:
            target = len(prompt) + len(tokens) - 1  # last processed position
            confs = {e: c for e, c, _ in out.decisions}
            if out.exited is not None:
                boundary, token = out.exited
                origin = f"exit:{boundary}"
                rtt = None
            else:
                ensure_open()
                if not uploads_started and config.upload_policy == POLICY_ON_FIRST_OFFLOAD:
                    channel.enqueue_upload(k, 0, np.stack(edge.rows))
                    uploads_started = True
                channel.flush_through(target)
                outcome = _infer_with_retry(
                    channel, edge, target, allow_retransmit=config.upload_policy != POLICY_NEVER
                )
                requests += 1
                token = outcome.token
                origin = "cloud"
                rtt = outcome.rtt_s
            tokens.append(token)
            traces.append(
                TokenTrace(
                    position=target + 1,
                    origin=origin,
                    confs=confs,
                    edge_s=step_cost,
                    cloud_rtt_s=rtt,
                )
            )
            out = edge.step(token, target + 1, config.theta, evaluate_exits=True)
            step_cost = channel.edge_compute(1, k, len(out.decisions))
            if uploads_started:
                channel.enqueue_upload(k, target + 1, out.row[None, :])
            if _is_eos(cfg, token):
                break
    finally:
        if opened:
            channel.close()
    return _result(config.mode, config.theta, prompt, tokens, traces, channel, requests)


def run_naive_split(
    model: model_mod.Model,
    prompt: list[int],
    config: EdgeConfig,
    channel,
    session_id: int,
) -> RunResult:
    """Stateless-cloud baseline: fresh session, full-prefix float32 upload, and
    a synchronous request for every token; no early exits, no overlap."""
    assert config.mode == MODE_NAIVE_SPLIT
    cfg = model.config
    _check_lengths(cfg, prompt, config.max_new_tokens)
    if channel.wire_encoding != protocol.ENC_F32:
        raise ValueError("the naive split baseline transmits float32")
    k = cfg.split_layer
    edge = EdgeRuntime(model)
    edge.process_context(prompt, 0)
    channel.edge_compute(len(prompt), k, 0)
    tokens: list[int] = []
    traces: list[TokenTrace] = []
    requests = 0
    while len(tokens) < config.max_new_tokens:
        target = len(prompt) + len(tokens) - 1
        channel.open_session(session_id, model.file_hash, ())
        channel.enqueue_upload(k, 0, np.stack(edge.rows))
        channel.flush_through(target)
        try:
            outcome = channel.infer(target)
        except ProtocolError as exc:
            raise ClientRunError(f"cloud error at position {target + 1}: {exc}") from exc
        finally:
            channel.close()
        requests += 1
        tokens.append(outcome.token)
        traces.append(
            TokenTrace(
                position=target + 1,
                origin="cloud",
                confs={},
                edge_s=0.0,
                cloud_rtt_s=outcome.rtt_s,
            )
        )
        edge.step(outcome.token, target + 1, math.inf, evaluate_exits=False)
        channel.edge_compute(1, k, 0)
        if _is_eos(cfg, outcome.token):
            break
    return _result(config.mode, config.theta, prompt, tokens, traces, channel, requests)


def run_cloud_only(
    model: model_mod.Model,
    prompt: list[int],
    config: EdgeConfig,
    channel,
    session_id: int,
) -> RunResult:
    """Conventional cloud deployment: prompt up, tokens down, no edge compute."""
    assert config.mode == MODE_CLOUD_ONLY
    cfg = model.config
    _check_lengths(cfg, prompt, config.max_new_tokens)
    target = len(prompt) + config.max_new_tokens - 1
    try:
        channel.open_session(session_id, model.file_hash, tuple(prompt))
        tokens = channel.generate(
            target, expected_tokens=config.max_new_tokens, eos_token_id=cfg.eos_token_id
        )
        channel.close()
    except (CloudUnavailableError, transport.LinkClosedError, OSError) as exc:
        raise ClientRunError(f"cloud unavailable: {exc}", availability_failure=True) from exc
    traces = [
        TokenTrace(position=len(prompt) + i, origin="cloud", confs={}, edge_s=0.0)
        for i in range(len(tokens))
    ]
    return _result(config.mode, config.theta, prompt, tokens, traces, channel, 1)


def run_mode(model, prompt, config: EdgeConfig, channel=None, session_id: int = 1) -> RunResult:
    if config.mode == MODE_STANDALONE:
        cost = getattr(channel, "cost", None)
        return run_standalone(model, prompt, config, cost=cost)
    if channel is None:
        raise ValueError(f"mode {config.mode} needs a cloud channel")
    if config.mode == MODE_COLLABORATIVE:
        return run_collaborative(model, prompt, config, channel, session_id)
    if config.mode == MODE_NAIVE_SPLIT:
        return run_naive_split(model, prompt, config, channel, session_id)
    return run_cloud_only(model, prompt, config, channel, session_id)


# --- simulated world construction ------------------------------------------


def build_sim_channel(
    model: model_mod.Model,
    config: EdgeConfig,
    link_params: transport.LinkParams | None = None,
    cost: SimCostModel | None = None,
    seed: int = 0,
    ttl_s: float = 300.0,
    context_timeout_s: float = 10.0,
) -> SimChannel:
    """In-process cloud + simulated link matching the edge config."""
    mode = MODE_FULL if config.mode == MODE_CLOUD_ONLY else MODE_PARTITION
    manager = SessionManager(model, mode=mode, ttl_s=ttl_s)
    link = transport.SimulatedLink(link_params or transport.default_link_params(), seed=seed)
    return SimChannel(
        manager,
        link,
        cost=cost,
        wire_encoding=config.wire_encoding,
        upload_queue_capacity=config.upload_queue_capacity,
        context_timeout_s=context_timeout_s,
    )


# --- CLI ---------------------------------------------------------------------


def write_traces(path: str, runs: list[RunResult]) -> None:
    """Trace file: one JSON object per generated token, one run after another."""
    with open(path, "w", encoding="utf-8") as f:
        for run_index, run in enumerate(runs):
            for tr in run.traces:
                f.write(
                    json.dumps(
                        {
                            "run": run_index,
                            "position": tr.position,
                            "origin": tr.origin,
                            "confs": {str(k): v for k, v in tr.confs.items()},
                            "edge_s": tr.edge_s,
                            "cloud_rtt_s": tr.cloud_rtt_s,
                            "forced": tr.forced,
                        }
                    )
                    + "\n"
                )


def load_prompts(path: str) -> list[list[int]]:
    """One prompt per line: whitespace-separated token ids; '#' starts a comment."""
    prompts = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            prompts.append([int(tok) for tok in line.split()])
    return prompts


def _parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="coedge-client", description="edge-side inference client")
    parser.add_argument("--model", required=True)
    parser.add_argument("--mode", choices=list(ALL_MODES), default=MODE_COLLABORATIVE)
    parser.add_argument("--theta", type=float, default=0.8)
    parser.add_argument("--wire-precision", choices=[WIRE_F16, WIRE_F32], default=WIRE_F16)
    parser.add_argument("--upload-policy", choices=list(ALL_POLICIES), default=None)
    parser.add_argument("--max-new-tokens", type=int, default=100)
    parser.add_argument("--prompts", required=True, help="prompt file (token ids per line)")
    parser.add_argument("--connect", default=None, help="host:port of a running server")
    parser.add_argument("--sim", action="store_true", help="run against an in-process simulated cloud")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--trace-out", default=None)
    parser.add_argument("--bandwidth-mbps", type=float, default=100.0)
    parser.add_argument("--rtt-ms", type=float, default=20.0)
    parser.add_argument("--jitter-ms", type=float, default=0.0)
    args = parser.parse_args(argv)

    if not args.sim and not args.connect:
        parser.error("either --sim or --connect is required")
    policy = args.upload_policy
    if policy is None:
        policy = POLICY_NEVER if args.mode == MODE_STANDALONE else POLICY_ALWAYS
    config = EdgeConfig(
        mode=args.mode,
        theta=args.theta,
        upload_policy=policy,
        wire_precision=args.wire_precision,
        max_new_tokens=args.max_new_tokens,
    )
    mdl = model_mod.load_model(args.model)
    prompts = load_prompts(args.prompts)
    link = transport.LinkParams.from_cli(args.bandwidth_mbps, args.rtt_ms, args.jitter_ms)
    rng = random.Random(args.seed)

    runs: list[RunResult] = []
    for i, prompt in enumerate(prompts):
        sid = rng.getrandbits(63)
        t0 = time.perf_counter()
        if config.mode == MODE_STANDALONE:
            result = run_standalone(mdl, prompt, config)
        elif args.sim:
            channel = build_sim_channel(mdl, config, link_params=link, seed=args.seed + i)
            result = run_mode(mdl, prompt, config, channel, session_id=sid)
        else:
            channel = SocketChannel(_parse_addr(args.connect), wire_encoding=config.wire_encoding)
            result = run_mode(mdl, prompt, config, channel, session_id=sid)
        wall_s = time.perf_counter() - t0
        runs.append(result)
        if args.connect:
            timing = f"wall {wall_s:.4f}s (virtual breakdown applies to --sim only)"
        else:
            timing = (
                f"total {result.total_s:.4f}s "
                f"(edge {result.edge_s:.4f} cloud {result.cloud_s:.4f} comm {result.comm_s:.4f})"
            )
        print(
            f"prompt {i}: {len(result.tokens)} tokens, "
            f"cloud requests {result.cloud_requests}, "
            f"bytes up/down {result.bytes_up}/{result.bytes_down}, " + timing
        )
        print("tokens:", " ".join(str(t) for t in result.tokens))
    if args.trace_out:
        write_traces(args.trace_out, runs)
        print(f"traces written to {args.trace_out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
