"""Client-side channels to the cloud: a deterministic virtual-time simulation
and a real socket client.

The simulated channel owns the edge's virtual clock. Edge compute advances it
via a configurable cost model; transfers are scheduled on a SimulatedLink, and
the server engine (SessionManager) is driven synchronously with virtual
timestamps. Because uploads and requests share the serialized uplink in FIFO
order, an inference request physically arrives after every upload enqueued
before it; the flush barrier falls out of link serialization.

Every run decomposes exactly into edge compute, critical-path cloud compute,
and critical-path communication (async upload time overlapped with edge
compute never enters the critical path).
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import protocol, transport
from .protocol import ErrorCode, ProtocolError
from .server import SessionManager

DEFAULT_CONTEXT_TIMEOUT_S = 10.0


class CloudUnavailableError(ConnectionError):
    """The cloud endpoint cannot be reached (or the link is down)."""


@dataclass(frozen=True)
class SimCostModel:
    """Virtual compute costs; defaults keep per-token edge compute well above
    per-position upload time on the default link."""

    edge_layer_s: float = 5e-4  # per (position, layer) on the edge
    cloud_layer_s: float = 2.5e-4  # per (position, layer) in the cloud
    head_eval_s: float = 5e-5  # one exit or final head application

    def edge_cost(self, positions: int, layers: int, head_evals: int) -> float:
        return positions * layers * self.edge_layer_s + head_evals * self.head_eval_s

    def cloud_cost(self, positions: int, layers: int, head_evals: int) -> float:
        return positions * layers * self.cloud_layer_s + head_evals * self.head_eval_s


@dataclass
class InferOutcome:
    token: int
    cloud_compute_ns: int
    rtt_s: float  # request enqueue -> response delivery (0 for real sockets)


class SimChannel:
    """In-process cloud over a simulated link, in virtual time."""

    def __init__(
        self,
        manager: SessionManager | None,
        link: transport.SimulatedLink,
        cost: SimCostModel | None = None,
        wire_encoding: int = protocol.ENC_F16,
        upload_queue_capacity: int = 8,
        context_timeout_s: float = DEFAULT_CONTEXT_TIMEOUT_S,
    ):
        self.manager = manager
        self.link = link
        self.cost = cost or SimCostModel()
        self.wire_encoding = wire_encoding
        self.capacity = upload_queue_capacity
        self.context_timeout_s = context_timeout_s
        self.now = 0.0
        self.edge_busy = 0.0
        self.cloud_busy = 0.0
        self.comm_wait = 0.0
        self.session_id: int | None = None
        self._delivery_by_pos: dict[int, float] = {}
        self._upload_tx_starts: deque[float] = deque()

    @property
    def ledger(self) -> transport.TransferLedger:
        return self.link.ledger

    # -- time -------------------------------------------------------------

    def edge_compute(self, positions: int, layers: int, head_evals: int = 0) -> float:
        dt = self.cost.edge_cost(positions, layers, head_evals)
        self.now += dt
        self.edge_busy += dt
        return dt

    # -- session lifecycle --------------------------------------------------

    def _send_up(self, msg: protocol.Message) -> transport.TransferTiming:
        frame = protocol.encode_message(msg, self.session_id)
        return self.link.transmit(transport.DIR_UP, len(frame), self.now)

    def open_session(self, session_id: int, model_hash: bytes, prompt: tuple[int, ...] = ()) -> None:
        self.session_id = session_id
        self._delivery_by_pos.clear()
        self._upload_tx_starts.clear()
        timing = self._send_up(protocol.OpenSession(model_hash=model_hash, prompt=prompt))
        self.manager.open_session(session_id, model_hash, prompt, now=timing.delivery)

    def close(self) -> None:
        if self.session_id is None:
            return
        timing = self._send_up(protocol.CloseSession())
        if self.manager is not None and self.manager.has_session(self.session_id):
            self.manager.close_session(self.session_id, now=timing.delivery)
        self.session_id = None

    # -- uploads -----------------------------------------------------------

    def enqueue_upload(
        self, layer: int, first_position: int, rows: np.ndarray, force: bool = False
    ) -> None:
        """Queue one contextual-data block for asynchronous transmission.

        Positions already sent this session are skipped unless force is set
        (explicit retransmission after a timeout); the producer blocks (in
        virtual time) when upload_queue_capacity blocks are waiting for the
        uplink. Queued blocks are never dropped.
        """
        positions = range(first_position, first_position + rows.shape[0])
        if not force and all(p in self._delivery_by_pos for p in positions):
            return
        while self._upload_tx_starts and self._upload_tx_starts[0] <= self.now:
            self._upload_tx_starts.popleft()
        if len(self._upload_tx_starts) >= self.capacity:
            release = self._upload_tx_starts[len(self._upload_tx_starts) - self.capacity]
            self.comm_wait += release - self.now
            self.now = release
        msg = protocol.make_context_upload(layer, first_position, rows, self.wire_encoding)
        timing = self._send_up(msg)
        if timing.tx_start > self.now:
            self._upload_tx_starts.append(timing.tx_start)
        # the server sees exactly what crossed the wire
        wire_rows = msg.decode_activations(rows.shape[1])
        self.manager.store_context(self.session_id, layer, first_position, wire_rows, now=timing.delivery)
        for i in range(rows.shape[0]):
            self._delivery_by_pos[first_position + i] = timing.delivery

    def flush_through(self, position: int) -> None:
        """Barrier before an inference request; FIFO link order already
        guarantees queued uploads arrive first, so this is a no-op here."""

    # -- inference ----------------------------------------------------------

    def infer(self, target_position: int) -> InferOutcome:
        req_enqueue = self.now
        timing = self._send_up(protocol.InferRequest(target_position=target_position))
        arrival = timing.delivery
        stats = self.manager.session_stats(self.session_id)
        needed = range(stats.processed_upto, target_position + 1)
        missing = [p for p in needed if p not in self._delivery_by_pos]
        if missing:
            # context never completes: the server times out and reports it
            err_send = arrival + self.context_timeout_s
            err = protocol.Error(ErrorCode.CONTEXT_TIMEOUT, f"missing positions {missing[:4]}")
            frame = protocol.encode_message(err, self.session_id)
            err_timing = self.link.transmit(transport.DIR_DOWN, len(frame), err_send)
            self.comm_wait += err_timing.delivery - req_enqueue
            self.now = err_timing.delivery
            raise ProtocolError(ErrorCode.CONTEXT_TIMEOUT, err.detail)
        ready = max([arrival] + [self._delivery_by_pos[p] for p in needed])
        try:
            token, new_rows, _ = self.manager.try_infer(self.session_id, target_position, now=ready)
        except ProtocolError as exc:
            frame = protocol.encode_message(protocol.Error(exc.code, exc.detail), self.session_id)
            err_timing = self.link.transmit(transport.DIR_DOWN, len(frame), arrival)
            self.comm_wait += err_timing.delivery - req_enqueue
            self.now = err_timing.delivery
            raise
        cfg = self.manager.model.config
        cloud_layers = cfg.num_layers - cfg.split_layer
        compute_s = self.cost.cloud_cost(new_rows, cloud_layers, 1) if new_rows else 0.0
        resp = protocol.InferResponse(token=token, cloud_compute_ns=int(compute_s * 1e9))
        frame = protocol.encode_message(resp, self.session_id)
        resp_timing = self.link.transmit(transport.DIR_DOWN, len(frame), ready + compute_s)
        elapsed = resp_timing.delivery - req_enqueue
        self.cloud_busy += compute_s
        self.comm_wait += elapsed - compute_s
        self.now = resp_timing.delivery
        return InferOutcome(token=token, cloud_compute_ns=resp.cloud_compute_ns, rtt_s=elapsed)

    def generate(self, target_position: int, expected_tokens: int | None = None,
                 eos_token_id: int | None = None) -> list[int]:
        """Full-model mode: one request, a stream of single-token responses."""
        req_enqueue = self.now
        timing = self._send_up(protocol.InferRequest(target_position=target_position))
        arrival = timing.delivery
        before = self.manager.session_stats(self.session_id)
        tokens = self.manager.full_generate(self.session_id, target_position, now=arrival)
        after = self.manager.session_stats(self.session_id)
        cfg = self.manager.model.config
        total_rows = after.rows_processed_total - before.rows_processed_total
        # first token pays the prefill; each later token processes one row
        send_at = arrival
        total_compute = 0.0
        last_delivery = arrival
        for i, token in enumerate(tokens):
            rows = (total_rows - (len(tokens) - 1)) if i == 0 else 1
            rows = max(rows, 0)
            compute_s = self.cost.cloud_cost(rows, cfg.num_layers, 1)
            total_compute += compute_s
            send_at += compute_s
            frame = protocol.encode_message(
                protocol.InferResponse(token, int(compute_s * 1e9)), self.session_id
            )
            last_delivery = self.link.transmit(transport.DIR_DOWN, len(frame), send_at).delivery
        elapsed = last_delivery - req_enqueue
        self.cloud_busy += total_compute
        self.comm_wait += elapsed - total_compute
        self.now = last_delivery
        return tokens


class SocketChannel:
    """Real TCP client: a background uploader drains a bounded queue while the
    caller's thread computes; responses are routed by a reader thread."""

    def __init__(
        self,
        address: tuple[str, int],
        wire_encoding: int = protocol.ENC_F16,
        upload_queue_capacity: int = 8,
        connect_timeout_s: float = 5.0,
        response_timeout_s: float = 30.0,
    ):
        self.wire_encoding = wire_encoding
        self.response_timeout_s = response_timeout_s
        try:
            sock = socket.create_connection(address, timeout=connect_timeout_s)
        except OSError as exc:
            raise CloudUnavailableError(f"cannot reach cloud at {address}: {exc}") from exc
        sock.settimeout(None)
        self.framed = transport.FramedSocket(sock, send_direction=transport.DIR_UP)
        self.session_id: int | None = None
        self._uploads: queue.Queue = queue.Queue(maxsize=upload_queue_capacity)
        self._responses: queue.Queue = queue.Queue()
        self._sent_positions: set[int] = set()
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._uploader = threading.Thread(target=self._upload_loop, daemon=True)
        self._reader.start()
        self._uploader.start()
        # virtual accounting is not meaningful on the real backend
        self.now = 0.0
        self.edge_busy = 0.0
        self.cloud_busy = 0.0
        self.comm_wait = 0.0

    @property
    def ledger(self) -> transport.TransferLedger:
        return self.framed.ledger

    def edge_compute(self, positions: int, layers: int, head_evals: int = 0) -> float:
        return 0.0

    def _read_loop(self) -> None:
        try:
            while True:
                raw = self.framed.recv_frame()
                if raw is None:
                    break
                msg, _ = protocol.decode_message(raw)
                self._responses.put(msg)
        except (OSError, ProtocolError) as exc:
            if not self._closed:
                self._responses.put(exc)

    def _upload_loop(self) -> None:
        while True:
            item = self._uploads.get()
            if item is None:
                self._uploads.task_done()
                return
            try:
                self.framed.send_frame(item)
            except OSError:
                pass
            finally:
                self._uploads.task_done()

    def open_session(self, session_id: int, model_hash: bytes, prompt: tuple[int, ...] = ()) -> None:
        self.session_id = session_id
        self._sent_positions.clear()
        frame = protocol.encode_message(
            protocol.OpenSession(model_hash=model_hash, prompt=prompt), session_id
        )
        self.framed.send_frame(frame)

    def enqueue_upload(
        self, layer: int, first_position: int, rows: np.ndarray, force: bool = False
    ) -> None:
        positions = range(first_position, first_position + rows.shape[0])
        if not force and all(p in self._sent_positions for p in positions):
            return
        self._sent_positions.update(positions)
        msg = protocol.make_context_upload(layer, first_position, rows, self.wire_encoding)
        self._uploads.put(protocol.encode_message(msg, self.session_id))

    def flush_through(self, position: int) -> None:
        self._uploads.join()

    def _await_response(self) -> protocol.Message:
        try:
            msg = self._responses.get(timeout=self.response_timeout_s)
        except queue.Empty:
            raise CloudUnavailableError("no response from cloud") from None
        if isinstance(msg, Exception):
            raise CloudUnavailableError(str(msg)) from msg
        if isinstance(msg, protocol.Error):
            raise ProtocolError(ErrorCode(msg.code), msg.detail)
        return msg

    def infer(self, target_position: int) -> InferOutcome:
        t0 = time.monotonic()
        self.framed.send_frame(
            protocol.encode_message(protocol.InferRequest(target_position), self.session_id)
        )
        msg = self._await_response()
        if not isinstance(msg, protocol.InferResponse):
            raise ProtocolError(ErrorCode.BAD_REQUEST, f"unexpected {type(msg).__name__}")
        return InferOutcome(
            token=msg.token, cloud_compute_ns=msg.cloud_compute_ns, rtt_s=time.monotonic() - t0
        )

    def generate(self, target_position: int, expected_tokens: int | None = None,
                 eos_token_id: int | None = None) -> list[int]:
        """Read single-token responses until the count is reached or EOS arrives."""
        self.framed.send_frame(
            protocol.encode_message(protocol.InferRequest(target_position), self.session_id)
        )
        tokens: list[int] = []
        while True:
            msg = self._await_response()
            if not isinstance(msg, protocol.InferResponse):
                raise ProtocolError(ErrorCode.BAD_REQUEST, f"unexpected {type(msg).__name__}")
            tokens.append(msg.token)
            if expected_tokens is not None and len(tokens) >= expected_tokens:
                return tokens
            if eos_token_id is not None and msg.token == eos_token_id:
                return tokens

    def close(self) -> None:
        self._closed = True
        try:
            if self.session_id is not None:
                self.framed.send_frame(
                    protocol.encode_message(protocol.CloseSession(), self.session_id)
                )
        except OSError:
            pass
        self._uploads.put(None)
        self._uploader.join(timeout=2.0)
        self.framed.close()
        self._reader.join(timeout=2.0)
