"""Wire message definitions and bit-exact framing for edge<->cloud traffic.

Frame layout (all integers little-endian, no padding):

    offset  size  field
    0       4     magic "CECO"
    4       1     version (1)
    5       1     msg_type
    6       8     session_id (u64)
    14      4     payload_len (u32)
    18      ...   payload

See PROTOCOL.md for the per-message payload tables and error codes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import halffloat

MAGIC = b"CECO"
VERSION = 1
FRAME_HEADER_LEN = 18
OPEN_SESSION_FIXED_LEN = 36  # model hash (32) + token count (4)
CONTEXT_UPLOAD_FIXED_LEN = 11  # layer (2) + first_position (4) + num_positions (4) + encoding (1)
INFER_REQUEST_LEN = 4
INFER_RESPONSE_LEN = 12
ERROR_FIXED_LEN = 2
MAX_PAYLOAD_LEN = 0xFFFFFFFF

ENC_F32 = 0
ENC_F16 = 1

_HEADER = struct.Struct("<4sBBQI")


class MsgType(IntEnum):
    OPEN_SESSION = 1
    CONTEXT_UPLOAD = 2
    INFER_REQUEST = 3
    INFER_RESPONSE = 4
    CLOSE_SESSION = 5
    ERROR = 6


class ErrorCode(IntEnum):
    # frame decode errors
    BAD_MAGIC = 1
    BAD_VERSION = 2
    TRUNCATED = 3
    LENGTH_MISMATCH = 4
    UNKNOWN_TYPE = 5
    MALFORMED = 6
    # service errors
    MODEL_MISMATCH = 10
    DUPLICATE_SESSION = 11
    UNKNOWN_SESSION = 12
    WRONG_LAYER = 13
    BAD_POSITION = 14
    CONTEXT_TIMEOUT = 15
    SEQ_OVERFLOW = 16
    BAD_REQUEST = 17
    UNAVAILABLE = 18


class ProtocolError(Exception):
    def __init__(self, code: ErrorCode, detail: str = ""):
        super().__init__(f"{code.name}: {detail}" if detail else code.name)
        self.code = code
        self.detail = detail


@dataclass(frozen=True)
class OpenSession:
    model_hash: bytes
    prompt: tuple[int, ...] = ()


@dataclass(frozen=True)
class ContextUpload:
    layer: int
    first_position: int
    num_positions: int
    encoding: int
    activations: bytes

    def decode_activations(self, hidden_dim: int) -> np.ndarray:
        """Raw payload -> (num_positions, hidden_dim) float32 rows."""
        expected = payload_bytes(self.num_positions, hidden_dim, self.encoding)
        if len(self.activations) != expected:
            raise ProtocolError(
                ErrorCode.MALFORMED,
                f"activation payload {len(self.activations)}B, expected {expected}B",
            )
        if self.encoding == ENC_F16:
            flat = halffloat.unpack_f16(self.activations)
        else:
            flat = halffloat.unpack_f32(self.activations)
        return flat.reshape(self.num_positions, hidden_dim)


@dataclass(frozen=True)
class InferRequest:
    target_position: int


@dataclass(frozen=True)
class InferResponse:
    token: int
    cloud_compute_ns: int


@dataclass(frozen=True)
class CloseSession:
    pass


@dataclass(frozen=True)
class Error:
    code: int
    detail: str


Message = OpenSession | ContextUpload | InferRequest | InferResponse | CloseSession | Error


def make_context_upload(layer: int, first_position: int, rows: np.ndarray, encoding: int) -> ContextUpload:
    """Encode activation rows per the wire precision."""
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError("rows must be a (num_positions >= 1, hidden_dim) array")
    payload = halffloat.pack_f16(rows) if encoding == ENC_F16 else halffloat.pack_f32(rows)
    return ContextUpload(
        layer=layer,
        first_position=first_position,
        num_positions=rows.shape[0],
        encoding=encoding,
        activations=payload,
    )


def payload_bytes(num_positions: int, hidden_dim: int, encoding: int) -> int:
    """Activation payload size; used for real transmission and dry-run accounting."""
    if num_positions < 1:
        raise ValueError("num_positions must be >= 1")
    if hidden_dim < 1:
        raise ValueError("hidden_dim must be >= 1")
    if encoding not in (ENC_F32, ENC_F16):
        raise ValueError(f"unknown encoding {encoding}")
    width = 2 if encoding == ENC_F16 else 4
    count = num_positions * hidden_dim * width
    if count + CONTEXT_UPLOAD_FIXED_LEN > MAX_PAYLOAD_LEN:
        raise OverflowError("activation payload exceeds the u32 frame length")
    return count


def _encode_payload(msg: Message) -> tuple[int, bytes]:
    if isinstance(msg, OpenSession):
        if len(msg.model_hash) != 32:
            raise ValueError("model_hash must be 32 bytes")
        body = msg.model_hash + struct.pack("<I", len(msg.prompt))
        body += struct.pack(f"<{len(msg.prompt)}I", *msg.prompt) if msg.prompt else b""
        return MsgType.OPEN_SESSION, body
    if isinstance(msg, ContextUpload):
        if msg.num_positions < 1:
            raise ValueError("num_positions must be >= 1")
        if msg.encoding not in (ENC_F32, ENC_F16):
            raise ValueError(f"unknown encoding {msg.encoding}")
        head = struct.pack("<HIIB", msg.layer, msg.first_position, msg.num_positions, msg.encoding)
        return MsgType.CONTEXT_UPLOAD, head + msg.activations
    if isinstance(msg, InferRequest):
        return MsgType.INFER_REQUEST, struct.pack("<I", msg.target_position)
    if isinstance(msg, InferResponse):
        return MsgType.INFER_RESPONSE, struct.pack("<IQ", msg.token, msg.cloud_compute_ns)
    if isinstance(msg, CloseSession):
        return MsgType.CLOSE_SESSION, b""
    if isinstance(msg, Error):
        return MsgType.ERROR, struct.pack("<H", msg.code) + msg.detail.encode("utf-8")
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def encode_message(msg: Message, session_id: int) -> bytes:
    """Message -> one complete frame. Byte-deterministic."""
    msg_type, payload = _encode_payload(msg)
    if len(payload) > MAX_PAYLOAD_LEN:
        raise OverflowError("payload exceeds u32 length field")
    return _HEADER.pack(MAGIC, VERSION, msg_type, session_id, len(payload)) + payload


def parse_header(header: bytes) -> tuple[MsgType, int, int]:
    """Validate an 18-byte header; returns (msg_type, session_id, payload_len)."""
    if len(header) < FRAME_HEADER_LEN:
        raise ProtocolError(ErrorCode.TRUNCATED, f"header is {len(header)} of {FRAME_HEADER_LEN} bytes")
    magic, version, msg_type, session_id, payload_len = _HEADER.unpack(header[:FRAME_HEADER_LEN])
    if magic != MAGIC:
        raise ProtocolError(ErrorCode.BAD_MAGIC, magic.hex())
    if version != VERSION:
        raise ProtocolError(ErrorCode.BAD_VERSION, str(version))
    try:
        mt = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(ErrorCode.UNKNOWN_TYPE, str(msg_type)) from None
    return mt, session_id, payload_len


def _decode_payload(msg_type: MsgType, payload: bytes) -> Message:
    try:
        if msg_type == MsgType.OPEN_SESSION:
            if len(payload) < OPEN_SESSION_FIXED_LEN:
                raise ProtocolError(ErrorCode.MALFORMED, "OpenSession payload too short")
            model_hash = payload[:32]
            (count,) = struct.unpack_from("<I", payload, 32)
            if len(payload) != OPEN_SESSION_FIXED_LEN + 4 * count:
                raise ProtocolError(ErrorCode.MALFORMED, "OpenSession token count mismatch")
            prompt = struct.unpack_from(f"<{count}I", payload, 36) if count else ()
            return OpenSession(model_hash=model_hash, prompt=tuple(prompt))
        if msg_type == MsgType.CONTEXT_UPLOAD:
            if len(payload) < CONTEXT_UPLOAD_FIXED_LEN:
                raise ProtocolError(ErrorCode.MALFORMED, "ContextUpload payload too short")
            layer, first_position, num_positions, encoding = struct.unpack_from("<HIIB", payload, 0)
            if num_positions < 1:
                raise ProtocolError(ErrorCode.MALFORMED, "num_positions must be >= 1")
            if encoding not in (ENC_F32, ENC_F16):
                raise ProtocolError(ErrorCode.MALFORMED, f"unknown encoding {encoding}")
            acts = payload[CONTEXT_UPLOAD_FIXED_LEN:]
            width = 2 if encoding == ENC_F16 else 4
            if len(acts) % (num_positions * width) != 0 or not acts:
                raise ProtocolError(ErrorCode.MALFORMED, "activation bytes not divisible by row size")
            return ContextUpload(
                layer=layer,
                first_position=first_position,
                num_positions=num_positions,
                encoding=encoding,
                activations=acts,
            )
        if msg_type == MsgType.INFER_REQUEST:
            if len(payload) != INFER_REQUEST_LEN:
                raise ProtocolError(ErrorCode.MALFORMED, "InferRequest must be 4 bytes")
            (target,) = struct.unpack("<I", payload)
            return InferRequest(target_position=target)
        if msg_type == MsgType.INFER_RESPONSE:
            if len(payload) != INFER_RESPONSE_LEN:
                raise ProtocolError(ErrorCode.MALFORMED, "InferResponse must be 12 bytes")
            token, ns = struct.unpack("<IQ", payload)
            return InferResponse(token=token, cloud_compute_ns=ns)
        if msg_type == MsgType.CLOSE_SESSION:
            if payload:
                raise ProtocolError(ErrorCode.MALFORMED, "CloseSession carries no payload")
            return CloseSession()
        if msg_type == MsgType.ERROR:
            if len(payload) < ERROR_FIXED_LEN:
                raise ProtocolError(ErrorCode.MALFORMED, "Error payload too short")
            (code,) = struct.unpack_from("<H", payload, 0)
            return Error(code=code, detail=payload[2:].decode("utf-8", errors="replace"))
    except struct.error as exc:
        raise ProtocolError(ErrorCode.MALFORMED, str(exc)) from None
    raise ProtocolError(ErrorCode.UNKNOWN_TYPE, str(int(msg_type)))


def decode_message(frame: bytes) -> tuple[Message, int]:
    """One complete frame -> (message, session_id). Inverse of encode_message."""
    msg_type, session_id, payload_len = parse_header(frame)
    body = frame[FRAME_HEADER_LEN:]
    if len(body) < payload_len:
        raise ProtocolError(
            ErrorCode.TRUNCATED, f"payload has {len(body)} of {payload_len} bytes"
        )
    if len(body) > payload_len:
        raise ProtocolError(
            ErrorCode.LENGTH_MISMATCH, f"{len(body)} bytes present, payload_len={payload_len}"
        )
    return _decode_payload(msg_type, body), session_id


def frame_len(msg: Message) -> int:
    """Exact on-the-wire size of a message."""
    _, payload = _encode_payload(msg)
    return FRAME_HEADER_LEN + len(payload)
