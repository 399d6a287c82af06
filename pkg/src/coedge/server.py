"""Cloud-side service: session/context management and the two serving modes.

SessionManager is the synchronous, thread-safe core: it stores uploaded
split-layer activations per session, folds them into the cloud partition's
KV cache on demand, and answers each inference request with exactly one
token. SocketServer wraps it for real TCP clients; the simulated backend
(coedge.channels) drives the same core in virtual time.
"""

from __future__ import annotations

import argparse
import logging
import socket
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from . import protocol, transport
from .protocol import ErrorCode, ProtocolError

logger = logging.getLogger(__name__)

MODE_FULL = "full"
MODE_PARTITION = "partition"

DEFAULT_TTL_S = 300.0
DEFAULT_SWEEP_S = 30.0
DEFAULT_CONTEXT_TIMEOUT_S = 10.0


class NeedContext(Exception):
    """Inference cannot proceed until more positions arrive."""

    def __init__(self, missing: list[int]):
        super().__init__(f"missing positions {missing[:8]}{'...' if len(missing) > 8 else ''}")
        self.missing = missing


@dataclass
class SessionStats:
    processed_upto: int
    rows_processed_total: int
    pending_positions: int
    infer_count: int


class _Session:
    def __init__(self, session_id: int, mode: str, cfg: model_mod.ModelConfig, prompt: tuple[int, ...]):
        self.session_id = session_id
        self.mode = mode
        self.pending: dict[int, np.ndarray] = {}
        self.processed_upto = 0
        self.rows_processed_total = 0
        self.infer_count = 0
        self.last_activity = 0.0
        self.last_token: int | None = None
        self.closed = False
        self.cond = threading.Condition()
        self.infer_lock = threading.Lock()
        if mode == MODE_PARTITION:
            self.kv_cache = model_mod.KVCache(cfg, cfg.split_layer, cfg.num_layers)
        else:
            self.kv_cache = model_mod.KVCache(cfg, 0, cfg.num_layers)
            self.tokens = list(prompt)
            self.logits: np.ndarray | None = None


class SessionManager:
    """Per-session contextual-data store + KV caches over the cloud layers."""

    def __init__(self, model: model_mod.Model, mode: str = MODE_PARTITION, ttl_s: float = DEFAULT_TTL_S):
        if mode not in (MODE_FULL, MODE_PARTITION):
            raise ValueError(f"unknown server mode {mode!r}")
        if ttl_s <= 0:
            raise ValueError("ttl must be > 0")
        self.model = model
        self.mode = mode
        self.ttl_s = ttl_s
        self._sessions: dict[int, _Session] = {}
        self._table_lock = threading.Lock()
        # diagnostics hook: called as (session_id, position, logits) on each infer
        self.logits_probe = None

    @property
    def model_hash(self) -> bytes:
        return self.model.file_hash

    def _get(self, session_id: int) -> _Session:
        with self._table_lock:
            sess = self._sessions.get(session_id)
        if sess is None or sess.closed:
            raise ProtocolError(ErrorCode.UNKNOWN_SESSION, f"session {session_id}")
        return sess

    def has_session(self, session_id: int) -> bool:
        with self._table_lock:
            return session_id in self._sessions

    def open_session(self, session_id: int, model_hash: bytes, prompt: tuple[int, ...], now: float) -> None:
        if model_hash != self.model.file_hash:
            raise ProtocolError(ErrorCode.MODEL_MISMATCH, "client/server model files differ")
        cfg = self.model.config
        if self.mode == MODE_FULL:
            if not prompt:
                raise ProtocolError(ErrorCode.BAD_REQUEST, "full-model session needs a prompt")
            if len(prompt) > cfg.max_seq_len:
                raise ProtocolError(ErrorCode.SEQ_OVERFLOW, "prompt exceeds max_seq_len")
            for tok in prompt:
                if tok >= cfg.vocab_size:
                    raise ProtocolError(ErrorCode.BAD_REQUEST, f"token {tok} out of vocabulary")
        with self._table_lock:
            if session_id in self._sessions and not self._sessions[session_id].closed:
                raise ProtocolError(ErrorCode.DUPLICATE_SESSION, f"session {session_id} already open")
            sess = _Session(session_id, self.mode, cfg, prompt)
            sess.last_activity = now
            self._sessions[session_id] = sess

    def store_context(
        self, session_id: int, layer: int, first_position: int, rows: np.ndarray, now: float
    ) -> int:
        """Store activation rows under their positions; duplicate positions are
        ignored (first write wins). Returns the number of rows actually stored."""
        sess = self._get(session_id)
        cfg = self.model.config
        if sess.mode != MODE_PARTITION:
            raise ProtocolError(ErrorCode.BAD_REQUEST, "context upload on a full-model session")
        if layer != cfg.split_layer:
            raise ProtocolError(
                ErrorCode.WRONG_LAYER, f"expected layer {cfg.split_layer}, got {layer}"
            )
        n = rows.shape[0]
        if first_position + n > cfg.max_seq_len:
            raise ProtocolError(ErrorCode.BAD_POSITION, "upload beyond max_seq_len")
        stored = 0
        with sess.cond:
            sess.last_activity = now
            for i in range(n):
                pos = first_position + i
                if pos < sess.processed_upto or pos in sess.pending:
                    continue
                sess.pending[pos] = rows[i].astype(np.float32, copy=True)
                stored += 1
            if stored:
                sess.cond.notify_all()
        return stored

    def _infer_ready(self, sess: _Session, target: int) -> list[int]:
        """Missing positions in [processed_upto, target]; empty when ready."""
        return [p for p in range(sess.processed_upto, target + 1) if p not in sess.pending]

    def try_infer(self, session_id: int, target: int, now: float) -> tuple[int, int, int]:
        """One inference step; returns (token, new_rows_processed, compute_positions).

        Raises NeedContext when uploaded context does not yet cover
        [processed_upto, target].
        """
        sess = self._get(session_id)
        cfg = self.model.config
        if sess.mode != MODE_PARTITION:
            raise ProtocolError(ErrorCode.BAD_REQUEST, "partition infer on a full-model session")
        if target >= cfg.max_seq_len:
            raise ProtocolError(ErrorCode.SEQ_OVERFLOW, f"target {target} >= max_seq_len")
        with sess.cond:
            sess.last_activity = now
            if target < sess.processed_upto - 1:
                raise ProtocolError(
                    ErrorCode.BAD_POSITION,
                    f"target {target} regresses behind processed_upto {sess.processed_upto}",
                )
            if target == sess.processed_upto - 1:
                # idempotent re-request of the last served position (client retry)
                sess.infer_count += 1
                return sess.last_token, 0, 0
            missing = self._infer_ready(sess, target)
            if missing:
                raise NeedContext(missing)
            first = sess.processed_upto
            rows = np.stack([sess.pending[p] for p in range(first, target + 1)])
            block = model_mod.HiddenStateBlock(
                layer=cfg.split_layer, first_position=first, activations=rows
            )
            out = model_mod.forward_layers(
                self.model, (cfg.split_layer, cfg.num_layers), block, sess.kv_cache
            )
            logits = model_mod.final_head(self.model, out.activations[-1])
            if self.logits_probe is not None:
                self.logits_probe(session_id, target, logits)
            _, token = model_mod.confidence(logits)
            for p in range(first, target + 1):
                del sess.pending[p]
            n = target + 1 - first
            sess.processed_upto = target + 1
            sess.rows_processed_total += n
            sess.infer_count += 1
            sess.last_token = token
            return token, n, n

    def infer_blocking(
        self, session_id: int, target: int, timeout_s: float = DEFAULT_CONTEXT_TIMEOUT_S
    ) -> tuple[int, int]:
        """Wall-clock variant for the socket backend: waits for context to arrive."""
        sess = self._get(session_id)
        with sess.infer_lock:
            deadline = time.monotonic() + timeout_s
            while True:
                try:
                    token, n, _ = self.try_infer(session_id, target, now=time.monotonic())
                    return token, n
                except NeedContext:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise ProtocolError(
                            ErrorCode.CONTEXT_TIMEOUT,
                            f"context for positions <= {target} did not arrive in {timeout_s}s",
                        ) from None
                    with sess.cond:
                        if self._infer_ready(sess, target):
                            sess.cond.wait(remaining)

    def full_generate(self, session_id: int, target: int, now: float) -> list[int]:
        """Full-model greedy decoding for positions [current_end, target]; stops at EOS."""
        sess = self._get(session_id)
        cfg = self.model.config
        if sess.mode != MODE_FULL:
            raise ProtocolError(ErrorCode.BAD_REQUEST, "full-model infer on a partition session")
        if target >= cfg.max_seq_len:
            raise ProtocolError(ErrorCode.SEQ_OVERFLOW, f"target {target} >= max_seq_len")
        with sess.cond:
            sess.last_activity = now
            if target < len(sess.tokens):
                raise ProtocolError(ErrorCode.BAD_POSITION, "target precedes existing tokens")
            generated: list[int] = []
            while len(sess.tokens) <= target:
                done = sess.kv_cache.cached_len
                if done < len(sess.tokens):
                    block = model_mod.embed(self.model, sess.tokens[done:], done)
                    block = model_mod.forward_layers(
                        self.model, (0, cfg.num_layers), block, sess.kv_cache
                    )
                    sess.logits = model_mod.final_head(self.model, block.activations[-1])
                _, token = model_mod.confidence(sess.logits)
                sess.tokens.append(token)
                generated.append(token)
                sess.rows_processed_total = sess.kv_cache.cached_len
                sess.infer_count += 1
                if cfg.eos_token_id is not None and token == cfg.eos_token_id:
                    break
            return generated

    def close_session(self, session_id: int, now: float) -> None:
        with self._table_lock:
            sess = self._sessions.pop(session_id, None)
        if sess is not None:
            with sess.cond:
                sess.closed = True
                sess.pending.clear()
                sess.cond.notify_all()

    def evict(self, now: float) -> int:
        """Remove sessions idle for longer than the TTL; returns the count."""
        evicted = 0
        with self._table_lock:
            stale = [
                sid
                for sid, sess in self._sessions.items()
                if now - sess.last_activity > self.ttl_s
            ]
            for sid in stale:
                sess = self._sessions.pop(sid)
                with sess.cond:
                    sess.closed = True
                    sess.pending.clear()
                    sess.cond.notify_all()
                evicted += 1
        return evicted

    def session_stats(self, session_id: int) -> SessionStats:
        sess = self._get(session_id)
        with sess.cond:
            return SessionStats(
                processed_upto=sess.processed_upto,
                rows_processed_total=sess.rows_processed_total,
                pending_positions=len(sess.pending),
                infer_count=sess.infer_count,
            )


# --- threaded TCP server --------------------------------------------------


class SocketServer:
    """TCP front end over a SessionManager.

    Each connection gets a reader thread; inference requests are dispatched
    to worker threads so uploads keep flowing while an inference waits for
    context (the two logical streams of the dual-API design).
    """

    def __init__(
        self,
        model: model_mod.Model,
        mode: str = MODE_PARTITION,
        host: str = "127.0.0.1",
        port: int = 0,
        ttl_s: float = DEFAULT_TTL_S,
        sweep_s: float = DEFAULT_SWEEP_S,
        context_timeout_s: float = DEFAULT_CONTEXT_TIMEOUT_S,
    ):
        self.manager = SessionManager(model, mode=mode, ttl_s=ttl_s)
        self.context_timeout_s = context_timeout_s
        self.sweep_s = sweep_s
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def start(self) -> None:
        t = threading.Thread(target=self._accept_loop, name="coedge-accept", daemon=True)
        t.start()
        self._threads.append(t)
        s = threading.Thread(target=self._sweep_loop, name="coedge-sweep", daemon=True)
        s.start()
        self._threads.append(s)

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.sweep_s):
            self.manager.evict(now=time.monotonic())

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            t = threading.Thread(target=self._serve, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve(self, conn: socket.socket) -> None:
        framed = transport.FramedSocket(conn, send_direction=transport.DIR_DOWN)
        try:
            while True:
                try:
                    raw = framed.recv_frame()
                except ProtocolError as exc:
                    framed.send_frame(
                        protocol.encode_message(protocol.Error(exc.code, exc.detail), 0)
                    )
                    return
                if raw is None:
                    return
                try:
                    msg, sid = protocol.decode_message(raw)
                except ProtocolError as exc:
                    framed.send_frame(
                        protocol.encode_message(protocol.Error(exc.code, exc.detail), 0)
                    )
                    continue
                self._dispatch(framed, msg, sid)
        except OSError:
            pass
        finally:
            framed.close()

    def _dispatch(self, framed: transport.FramedSocket, msg: protocol.Message, sid: int) -> None:
        now = time.monotonic()
        try:
            if isinstance(msg, protocol.OpenSession):
                self.manager.open_session(sid, msg.model_hash, msg.prompt, now)
            elif isinstance(msg, protocol.ContextUpload):
                rows = msg.decode_activations(self.manager.model.config.hidden_dim)
                self.manager.store_context(sid, msg.layer, msg.first_position, rows, now)
            elif isinstance(msg, protocol.InferRequest):
                worker = threading.Thread(
                    target=self._run_infer, args=(framed, sid, msg.target_position), daemon=True
                )
                worker.start()
                self._threads.append(worker)
            elif isinstance(msg, protocol.CloseSession):
                self.manager.close_session(sid, now)
            else:
                raise ProtocolError(ErrorCode.BAD_REQUEST, f"unexpected {type(msg).__name__}")
        except ProtocolError as exc:
            framed.send_frame(protocol.encode_message(protocol.Error(exc.code, exc.detail), sid))

    def _run_infer(self, framed: transport.FramedSocket, sid: int, target: int) -> None:
        try:
            t0 = time.perf_counter_ns()
            if self.manager.mode == MODE_FULL:
                tokens = self.manager.full_generate(sid, target, now=time.monotonic())
                ns = (time.perf_counter_ns() - t0) // max(len(tokens), 1)
                for token in tokens:
                    framed.send_frame(
                        protocol.encode_message(protocol.InferResponse(token, ns), sid)
                    )
            else:
                token, _ = self.manager.infer_blocking(sid, target, self.context_timeout_s)
                ns = time.perf_counter_ns() - t0
                framed.send_frame(protocol.encode_message(protocol.InferResponse(token, ns), sid))
        except ProtocolError as exc:
            try:
                framed.send_frame(protocol.encode_message(protocol.Error(exc.code, exc.detail), sid))
            except OSError:
                pass
        except OSError:
            pass


# --- CLI -----------------------------------------------------------------


def _parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def _sim_selfcheck(mdl: model_mod.Model, mode: str, ttl_s: float) -> int:
    """No-socket smoke: run one synthetic session against the engine."""
    mgr = SessionManager(mdl, mode=mode, ttl_s=ttl_s)
    cfg = mdl.config
    prompt = [i % cfg.vocab_size for i in range(1, 9)]
    if mode == MODE_FULL:
        mgr.open_session(1, mdl.file_hash, tuple(prompt), now=0.0)
        tokens = mgr.full_generate(1, target=len(prompt) + 3, now=0.0)
        print(f"selfcheck full-model: generated {len(tokens)} tokens: {tokens}")
    else:
        cache = model_mod.KVCache(cfg, 0, cfg.split_layer)
        block = model_mod.embed(mdl, prompt, 0)
        block = model_mod.forward_layers(mdl, (0, cfg.split_layer), block, cache)
        mgr.open_session(1, mdl.file_hash, (), now=0.0)
        mgr.store_context(1, cfg.split_layer, 0, block.activations, now=0.0)
        token, n, _ = mgr.try_infer(1, len(prompt) - 1, now=0.0)
        print(f"selfcheck partition: consumed {n} rows, token {token}")
    mgr.close_session(1, now=0.0)
    print("selfcheck OK")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="coedge-server", description="cloud-side inference server")
    parser.add_argument("--model", required=True, help="model file path")
    parser.add_argument("--mode", choices=[MODE_FULL, MODE_PARTITION], default=MODE_PARTITION)
    parser.add_argument("--split-layer", type=int, default=None, help="override the config split layer")
    parser.add_argument("--listen", default=None, help="host:port to listen on")
    parser.add_argument("--sim", action="store_true", help="run an in-process engine selfcheck instead of listening")
    parser.add_argument("--ttl-s", type=float, default=DEFAULT_TTL_S)
    parser.add_argument("--sweep-s", type=float, default=DEFAULT_SWEEP_S)
    args = parser.parse_args(argv)

    mdl = model_mod.load_model(args.model)
    if args.split_layer is not None:
        import dataclasses

        mdl.config = dataclasses.replace(mdl.config, split_layer=args.split_layer)
    if args.sim:
        return _sim_selfcheck(mdl, args.mode, args.ttl_s)
    if not args.listen:
        parser.error("either --listen or --sim is required")
    host, port = _parse_addr(args.listen)
    server = SocketServer(
        mdl, mode=args.mode, host=host, port=port, ttl_s=args.ttl_s, sweep_s=args.sweep_s
    )
    server.start()
    print(f"listening on {server.address[0]}:{server.address[1]} ({args.mode} mode)")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
