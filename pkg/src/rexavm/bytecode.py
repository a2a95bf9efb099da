"""Bytecode word format.

The first byte of a bytecode word decides its length:

  0x00..0x7F  operation code; most ops are 1 byte, the address-carrying
              internals (branch, call, ...) are followed by a 16-bit LE
              operand, prstr by a length-prefixed payload, and the data
              prefixes var/array by embedded cells
  0x80..0xBF  short literal: 14-bit signed payload, 2 bytes total
  0xC0..0xFF  double literal: 30-bit signed payload, 4 bytes total
"""

TAG_SHORT = 0x80
TAG_DOUBLE = 0xC0

SHORT_MIN = -(1 << 13)
SHORT_MAX = (1 << 13) - 1
DOUBLE_MIN = -(1 << 29)
DOUBLE_MAX = (1 << 29) - 1


class LiteralRangeError(ValueError):
    """Literal outside the encodable 30-bit signed range."""


def encode_literal(v):
    """Encode to the short form when the value fits 14 bits, else double."""
    if SHORT_MIN <= v <= SHORT_MAX:
        u = v & 0x3FFF
        return bytes((TAG_SHORT | (u >> 8), u & 0xFF))
    if DOUBLE_MIN <= v <= DOUBLE_MAX:
        u = v & 0x3FFFFFFF
        return bytes((TAG_DOUBLE | (u >> 24), (u >> 16) & 0xFF,
                      (u >> 8) & 0xFF, u & 0xFF))
    raise LiteralRangeError("literal %d outside 30-bit signed range" % v)


def decode_literal(buf, pos=0):
    """Decode one literal word at ``pos``; returns (value, length)."""
    b0 = buf[pos]
    if b0 < TAG_SHORT:
        raise ValueError("not a literal word at %d" % pos)
    if b0 < TAG_DOUBLE:
        u = ((b0 & 0x3F) << 8) | buf[pos + 1]
        if u & 0x2000:
            u -= 0x4000
        return u, 2
    u = ((b0 & 0x3F) << 24) | (buf[pos + 1] << 16) | \
        (buf[pos + 2] << 8) | buf[pos + 3]
    if u & 0x20000000:
        u -= 0x40000000
    return u, 4


def is_literal(b0):
    return b0 >= TAG_SHORT


def read_u16(buf, pos):
    return buf[pos] | (buf[pos + 1] << 8)


def write_u16(buf, pos, v):
    buf[pos] = v & 0xFF
    buf[pos + 1] = (v >> 8) & 0xFF
