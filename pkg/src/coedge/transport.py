"""Byte-stream transport: a virtual-time simulated link and a real socket backend.

The simulated link is the benchmarking backend: transfers are scheduled in
continuous virtual time with per-direction serialization, so delivery times
follow the analytic law

    delivery = max(enqueue, link_free) + nbytes / bandwidth + rtt / 2 (+ jitter)

exactly and runs are deterministic. The socket backend exists for smoke
testing against a real server; its byte accounting is identical, its wall
clock timings are advisory.
"""

from __future__ import annotations

import random
import socket
import threading
import time
from dataclasses import dataclass, field

from . import protocol

DIR_UP = "up"
DIR_DOWN = "down"


class LinkClosedError(ConnectionError):
    """The simulated link has been shut down."""


@dataclass(frozen=True)
class LinkParams:
    bandwidth: float  # bytes per second
    rtt: float  # seconds
    jitter: float = 0.0  # seconds, uniform in [0, jitter)

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.rtt < 0 or self.jitter < 0:
            raise ValueError("rtt and jitter must be >= 0")

    @classmethod
    def from_cli(cls, bandwidth_mbps: float, rtt_ms: float, jitter_ms: float = 0.0) -> "LinkParams":
        return cls(
            bandwidth=bandwidth_mbps * 1e6 / 8.0,
            rtt=rtt_ms / 1e3,
            jitter=jitter_ms / 1e3,
        )


def default_link_params() -> LinkParams:
    """100 Mbit/s, 20 ms RTT: a typical edge-to-cloud WAN."""
    return LinkParams.from_cli(bandwidth_mbps=100.0, rtt_ms=20.0)


@dataclass(frozen=True)
class TransferEvent:
    direction: str
    nbytes: int
    enqueue_time: float
    delivery_time: float


@dataclass
class TransferLedger:
    bytes_up: int = 0
    bytes_down: int = 0
    events: list[TransferEvent] = field(default_factory=list)

    def record(self, direction: str, nbytes: int, enqueue_time: float, delivery_time: float) -> None:
        if direction == DIR_UP:
            self.bytes_up += nbytes
        elif direction == DIR_DOWN:
            self.bytes_down += nbytes
        else:
            raise ValueError(f"unknown direction {direction!r}")
        self.events.append(TransferEvent(direction, nbytes, enqueue_time, delivery_time))

    def total(self, direction: str) -> int:
        return self.bytes_up if direction == DIR_UP else self.bytes_down


@dataclass(frozen=True)
class TransferTiming:
    tx_start: float
    tx_end: float
    delivery: float


class SimulatedLink:
    """Full-duplex link; each direction serializes frames in enqueue order."""

    def __init__(self, params: LinkParams, seed: int = 0):
        self.params = params
        self.ledger = TransferLedger()
        self._busy_until = {DIR_UP: 0.0, DIR_DOWN: 0.0}
        self._last_delivery = {DIR_UP: 0.0, DIR_DOWN: 0.0}
        self._jitter_rng = random.Random(seed)
        self._closed = False

    def close(self) -> None:
        self._closed = True

    def transmit(self, direction: str, nbytes: int, enqueue_time: float) -> TransferTiming:
        """Schedule one frame; returns its transmission window and delivery time."""
        if self._closed:
            raise LinkClosedError("simulated link is shut down")
        if nbytes <= 0:
            raise ValueError("frames are never empty")
        p = self.params
        start = max(enqueue_time, self._busy_until[direction])
        end = start + nbytes / p.bandwidth
        self._busy_until[direction] = end
        delivery = end + p.rtt / 2.0
        if p.jitter > 0:
            delivery += self._jitter_rng.uniform(0.0, p.jitter)
        # reliable in-order delivery per direction
        delivery = max(delivery, self._last_delivery[direction])
        self._last_delivery[direction] = delivery
        self.ledger.record(direction, nbytes, enqueue_time, delivery)
        return TransferTiming(tx_start=start, tx_end=end, delivery=delivery)

    def busy_until(self, direction: str) -> float:
        return self._busy_until[direction]


# --- socket backend -----------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    """Read exactly n bytes; None on clean EOF at a frame boundary."""
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if not buf:
                return None
            raise protocol.ProtocolError(
                protocol.ErrorCode.TRUNCATED, f"stream closed after {len(buf)} of {n} bytes"
            )
        buf += chunk
    return buf


class FramedSocket:
    """Frame-granular send/recv over a stream socket, with byte accounting.

    send_direction names the direction of outgoing frames in the ledger
    ("up" at the edge, "down" at the cloud).
    """

    def __init__(self, sock: socket.socket, send_direction: str, ledger: TransferLedger | None = None):
        self.sock = sock
        self.send_direction = send_direction
        self.recv_direction = DIR_DOWN if send_direction == DIR_UP else DIR_UP
        self.ledger = ledger if ledger is not None else TransferLedger()
        self._send_lock = threading.Lock()

    def send_frame(self, frame: bytes) -> None:
        t0 = time.monotonic()
        with self._send_lock:
            self.sock.sendall(frame)
        self.ledger.record(self.send_direction, len(frame), t0, time.monotonic())

    def recv_frame(self) -> bytes | None:
        """Returns one full frame (header + payload), or None on clean EOF."""
        t0 = time.monotonic()
        header = _recv_exact(self.sock, protocol.FRAME_HEADER_LEN)
        if header is None:
            return None
        _, _, payload_len = protocol.parse_header(header)
        payload = b""
        if payload_len:
            payload = _recv_exact(self.sock, payload_len)
            if payload is None:
                raise protocol.ProtocolError(protocol.ErrorCode.TRUNCATED, "stream closed before payload")
        frame = header + payload
        self.ledger.record(self.recv_direction, len(frame), t0, time.monotonic())
        return frame

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


__all__ = [
    "DIR_UP",
    "DIR_DOWN",
    "LinkParams",
    "LinkClosedError",
    "TransferEvent",
    "TransferLedger",
    "TransferTiming",
    "SimulatedLink",
    "FramedSocket",
    "default_link_params",
]
