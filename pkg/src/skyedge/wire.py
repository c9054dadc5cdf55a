"""Binary telemetry and command-and-control framing.

Frame layout (all multi-byte fields little-endian)::

    0      1     2     3       4       5      6 .. 6+len   +2
    +------+-----+-----+-------+-------+------+----------+-----+
    | 0xAF | len | seq | sysid | msgid | flags| payload  | crc |
    +------+-----+-----+-------+-------+------+----------+-----+

The CRC-16/CCITT-FALSE covers ``len`` through the end of the payload; the
start byte is excluded so a receiver can resynchronise on it.
"""
from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass
from typing import ClassVar, Union

STX = 0xAF
HEADER_LEN = 6
CRC_LEN = 2
OVERHEAD = HEADER_LEN + CRC_LEN


class ProtocolError(ValueError):
    """Base class for frame decoding failures."""


class BadMagic(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class BadCrc(ProtocolError):
    pass


class UnknownMsgId(ProtocolError):
    pass


class BadLength(ProtocolError):
    """Declared length disagrees with the body size of the message type."""


def _crc16_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else (crc << 1)
        table.append(crc & 0xFFFF)
    return table


_CRC_TABLE = _crc16_table()


def crc16(data: bytes, crc: int = 0xFFFF) -> int:
    """CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection, no xorout)."""
    for byte in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[((crc >> 8) ^ byte) & 0xFF]
    return crc


class MsgId(enum.IntEnum):
    HEARTBEAT = 0
    TELEMETRY = 1
    COMMAND = 2
    COMMAND_ACK = 3
    REASSIGN = 4


class Cmd(enum.IntEnum):
    ARM = 1
    TAKEOFF = 2
    GOTO = 3
    LAND = 4
    SET_MODE = 5


class AckResult(enum.IntEnum):
    OK = 0
    REJECTED = 1


@dataclass(frozen=True)
class Heartbeat:
    mode: int = 0
    status: int = 0

    MSG_ID: ClassVar[int] = MsgId.HEARTBEAT
    FORMAT: ClassVar[struct.Struct] = struct.Struct("<BB")

    def pack(self) -> bytes:
        return self.FORMAT.pack(self.mode, self.status)


@dataclass(frozen=True)
class Telemetry:
    pos_x_cm: int = 0
    pos_y_cm: int = 0
    alt_mm: int = 0
    vx_cms: int = 0
    vy_cms: int = 0
    vz_cms: int = 0
    heading_cdeg: int = 0
    battery_cpct: int = 0

    MSG_ID: ClassVar[int] = MsgId.TELEMETRY
    FORMAT: ClassVar[struct.Struct] = struct.Struct("<iiihhhHH")

    def pack(self) -> bytes:
        if not 0 <= self.battery_cpct <= 10000:
            raise ValueError(f"battery_cpct out of range: {self.battery_cpct}")
        return self.FORMAT.pack(
            self.pos_x_cm, self.pos_y_cm, self.alt_mm,
            self.vx_cms, self.vy_cms, self.vz_cms,
            self.heading_cdeg, self.battery_cpct,
        )


@dataclass(frozen=True)
class Command:
    cmd: int
    cseq: int = 0
    p1: int = 0
    p2: int = 0
    p3: int = 0
    p4: int = 0

    MSG_ID: ClassVar[int] = MsgId.COMMAND
    FORMAT: ClassVar[struct.Struct] = struct.Struct("<BHiiii")

    def pack(self) -> bytes:
        if self.cmd not in Cmd._value2member_map_:
            raise ValueError(f"unknown command code {self.cmd}")
        return self.FORMAT.pack(self.cmd, self.cseq, self.p1, self.p2, self.p3, self.p4)


@dataclass(frozen=True)
class CommandAck:
    cmd: int
    cseq: int
    result: int = AckResult.OK

    MSG_ID: ClassVar[int] = MsgId.COMMAND_ACK
    FORMAT: ClassVar[struct.Struct] = struct.Struct("<BHB")

    def pack(self) -> bytes:
        if self.result not in AckResult._value2member_map_:
            raise ValueError(f"unknown ack result {self.result}")
        return self.FORMAT.pack(self.cmd, self.cseq, self.result)


@dataclass(frozen=True)
class Reassign:
    addr: bytes
    port: int

    MSG_ID: ClassVar[int] = MsgId.REASSIGN
    FORMAT: ClassVar[struct.Struct] = struct.Struct("<4sH")

    def pack(self) -> bytes:
        if len(self.addr) != 4:
            raise ValueError("Reassign address must be 4 bytes")
        return self.FORMAT.pack(bytes(self.addr), self.port)


MessageBody = Union[Heartbeat, Telemetry, Command, CommandAck, Reassign]

BODY_TYPES: dict[int, type] = {
    cls.MSG_ID: cls for cls in (Heartbeat, Telemetry, Command, CommandAck, Reassign)
}
BODY_SIZES = {msg_id: cls.FORMAT.size for msg_id, cls in BODY_TYPES.items()}


def unpack_body(msg_id: int, payload: bytes) -> MessageBody:
    try:
        cls = BODY_TYPES[msg_id]
    except KeyError:
        raise UnknownMsgId(f"unknown msg_id {msg_id}") from None
    if len(payload) != cls.FORMAT.size:
        raise BadLength(f"msg_id {msg_id} expects {cls.FORMAT.size} bytes, got {len(payload)}")
    fields = cls.FORMAT.unpack(payload)
    if cls is Telemetry and fields[-1] > 10000:
        raise ProtocolError(f"battery_cpct out of range: {fields[-1]}")
    if cls is Command and fields[0] not in Cmd._value2member_map_:
        raise ProtocolError(f"unknown command code {fields[0]}")
    if cls is CommandAck and fields[2] not in AckResult._value2member_map_:
        raise ProtocolError(f"unknown ack result {fields[2]}")
    return cls(*fields)


@dataclass(frozen=True)
class Frame:
    seq: int
    sys_id: int
    body: MessageBody
    flags: int = 0

    @property
    def msg_id(self) -> int:
        return self.body.MSG_ID

    @property
    def payload(self) -> bytes:
        return self.body.pack()

    @property
    def len(self) -> int:
        return len(self.payload)

    @property
    def crc(self) -> int:
        return crc16(self.encode()[1:-CRC_LEN])

    def encode(self) -> bytes:
        payload = self.body.pack()
        head = struct.pack("<BBBBBB", STX, len(payload), self.seq & 0xFF,
                           self.sys_id, self.msg_id, self.flags)
        return head + payload + struct.pack("<H", crc16(head[1:] + payload))


def encode_frame(seq: int, sys_id: int, body: MessageBody) -> bytes:
    """Serialise one frame; ``seq`` wraps modulo 256."""
    return Frame(seq & 0xFF, sys_id, body).encode()


def decode_frame(data: bytes) -> Frame:
    """Parse exactly one frame, raising a ``ProtocolError`` subclass on failure."""
    if len(data) < 1:
        raise Truncated("empty input")
    if data[0] != STX:
        raise BadMagic(f"bad start byte 0x{data[0]:02X}")
    if len(data) < OVERHEAD:
        raise Truncated(f"{len(data)} bytes is shorter than the frame overhead")
    length = data[1]
    total = OVERHEAD + length
    if len(data) < total:
        raise Truncated(f"need {total} bytes, have {len(data)}")
    if len(data) > total:
        raise BadLength(f"{len(data) - total} trailing bytes after frame")
    (crc,) = struct.unpack_from("<H", data, total - CRC_LEN)
    if crc16(data[1:total - CRC_LEN]) != crc:
        raise BadCrc("checksum mismatch")
    _, _, seq, sys_id, msg_id, flags = struct.unpack_from("<BBBBBB", data)
    body = unpack_body(msg_id, bytes(data[HEADER_LEN:HEADER_LEN + length]))
    return Frame(seq, sys_id, body, flags)


def frame_size(msg_id: int) -> int:
    return OVERHEAD + BODY_SIZES[msg_id]


def pack_ipv4(addr: str) -> bytes:
    return ipaddress.IPv4Address(addr).packed


def unpack_ipv4(raw: bytes) -> str:
    return str(ipaddress.IPv4Address(bytes(raw)))
