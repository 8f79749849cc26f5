"""Wire format shared by the controller, hubs and unit agents.

Binary frame (all integers big-endian)::

    u32   frame length L (bytes that follow)
    u8    version (1)
    u8    message type
    u32   step k
    u16   unit id
    u16   payload count n
    n*f64 payload
    u32   CRC-32 of the bytes from version through payload

The JSON-lines debug transport carries the same fields as one object per
line; its ``crc`` is computed over the binary body so both transports share
one checksum definition.
"""
from __future__ import annotations

import asyncio
import enum
import json
import struct
import zlib
from dataclasses import dataclass

VERSION = 1
CONTROLLER_ID = 0xFFFF
HUB_BASE = 1000

_HEAD = struct.Struct(">BBIHH")
_LEN = struct.Struct(">I")
_CRC = struct.Struct(">I")
MAX_PAYLOAD = 4096


class MsgType(enum.IntEnum):
    SETPOINT_PLAN = 1
    MEASUREMENT = 2
    AVAILABILITY = 3
    TICK = 4
    ACK = 5
    HELLO = 6


class Phase(enum.IntEnum):
    SAMPLE = 0
    APPLY = 1
    STOP = 2


class WireError(ValueError):
    pass


@dataclass(frozen=True)
class WireMessage:
    type: MsgType
    k: int
    unit_id: int
    payload: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "type", MsgType(self.type))
        object.__setattr__(self, "payload", tuple(float(v) for v in self.payload))
        if not 0 <= self.k < 2**32 or not 0 <= self.unit_id < 2**16:
            raise WireError("k or unit_id out of range")
        if len(self.payload) > MAX_PAYLOAD:
            raise WireError("payload too long")
        if self.type in (MsgType.MEASUREMENT, MsgType.AVAILABILITY) and len(self.payload) != 1:
            raise WireError(f"{self.type.name} carries exactly one value")

    @property
    def phase(self) -> Phase:
        return Phase(int(self.payload[0]))

    def body(self) -> bytes:
        n = len(self.payload)
        return _HEAD.pack(VERSION, int(self.type), self.k, self.unit_id, n) + struct.pack(f">{n}d", *self.payload)

    @property
    def checksum(self) -> int:
        return zlib.crc32(self.body())


def tick(k: int, phase: Phase, sender: int = CONTROLLER_ID) -> WireMessage:
    return WireMessage(MsgType.TICK, k, sender, (float(phase),))


def ack(k: int, phase: Phase, sender: int) -> WireMessage:
    return WireMessage(MsgType.ACK, k, sender, (float(phase),))


def encode(msg: WireMessage) -> bytes:
    body = msg.body()
    return _LEN.pack(len(body) + _CRC.size) + body + _CRC.pack(zlib.crc32(body))


def decode_body(frame: bytes) -> WireMessage:
    """Parse the bytes after the length prefix (body plus CRC)."""
    if len(frame) < _HEAD.size + _CRC.size:
        raise WireError("short frame")
    body, crc = frame[:-_CRC.size], _CRC.unpack(frame[-_CRC.size:])[0]
    if zlib.crc32(body) != crc:
        raise WireError("checksum mismatch")
    version, mtype, k, unit_id, n = _HEAD.unpack_from(body)
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    if len(body) != _HEAD.size + 8 * n:
        raise WireError("payload length mismatch")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise WireError(f"unknown message type {mtype}") from None
    return WireMessage(mtype, k, unit_id, struct.unpack_from(f">{n}d", body, _HEAD.size))


def decode(data: bytes) -> WireMessage:
    """Parse one complete length-prefixed frame."""
    if len(data) < _LEN.size:
        raise WireError("short frame")
    (length,) = _LEN.unpack_from(data)
    if len(data) != _LEN.size + length:
        raise WireError("frame length mismatch")
    return decode_body(data[_LEN.size:])


def encode_json(msg: WireMessage) -> bytes:
    doc = {"v": VERSION, "type": msg.type.name, "k": msg.k, "unit": msg.unit_id,
           "payload": list(msg.payload), "crc": msg.checksum}
    return (json.dumps(doc) + "\n").encode()


def decode_json(line: bytes) -> WireMessage:
    try:
        doc = json.loads(line)
        msg = WireMessage(MsgType[doc["type"]], doc["k"], doc["unit"], doc["payload"])
    except (ValueError, KeyError, TypeError) as exc:
        raise WireError(f"bad JSON frame: {exc}") from None
    if doc.get("v") != VERSION:
        raise WireError(f"unsupported version {doc.get('v')}")
    if msg.checksum != doc.get("crc"):
        raise WireError("checksum mismatch")
    return msg


class Codec:
    """Stream reader/writer for one transport (``binary`` or ``jsonl``)."""

    def __init__(self, transport: str = "binary"):
        if transport not in ("binary", "jsonl"):
            raise ValueError(f"unknown transport {transport!r}")
        self.transport = transport

    def pack(self, msg: WireMessage) -> bytes:
        return encode(msg) if self.transport == "binary" else encode_json(msg)

    async def read(self, reader) -> WireMessage | None:
        """Next message, or None at a clean end of stream."""
        try:
            if self.transport == "jsonl":
                line = await reader.readline()
                return decode_json(line) if line else None
            head = await reader.readexactly(_LEN.size)
            (length,) = _LEN.unpack(head)
            if length > _HEAD.size + 8 * MAX_PAYLOAD + _CRC.size:
                raise WireError("frame too long")
            return decode_body(await reader.readexactly(length))
        except asyncio.IncompleteReadError as exc:
            if exc.partial:
                raise WireError("truncated frame") from None
            return None
