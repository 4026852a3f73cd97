"""EBML primitives: variable-width integers, element headers, element trees.

A VINT stores its own octet width in the leading bits of the first octet:
`length` leading zero bits, a marker one bit, then 7*width data bits spread
over the remaining bits of the octet and any continuation octets.  Element
IDs keep the marker bit as part of their identity (they are matched against
their full encoded pattern); element sizes clear it.  The all-ones data
pattern in a size VINT is the reserved "unknown size" marker, used here only
while a file is still being written.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

MAX_VINT_WIDTH = 8
MAX_ID_WIDTH = 4

# Distinguished size value for in-progress elements ("unknown size").
UNKNOWN = None


class EbmlError(Exception):
    pass


class Truncated(EbmlError):
    pass


class InvalidMarker(EbmlError):
    pass


class ValueTooLarge(EbmlError):
    pass


class MalformedNesting(EbmlError):
    pass


def vint_width(value: int, size_context: bool = False) -> int:
    """Minimal octet count able to hold `value`, widened in size context
    when the minimal encoding would be the reserved all-ones pattern."""
    if value < 0:
        raise ValueTooLarge(f"negative value {value}")
    width = max(1, (value.bit_length() + 6) // 7)
    if size_context and value == (1 << (7 * width)) - 1:
        width += 1
    if width > MAX_VINT_WIDTH:
        raise ValueTooLarge(f"{value} does not fit an 8-octet VINT")
    return width


def encode_vint(value: int, size_context: bool = False, width: int | None = None) -> bytes:
    """Encode an unsigned integer as a VINT.

    `width` forces a wider-than-minimal encoding (used to reserve patchable
    size fields); it must still be able to hold the value.
    """
    minimal = vint_width(value, size_context)
    if width is None:
        width = minimal
    elif width < minimal or width > MAX_VINT_WIDTH:
        raise ValueTooLarge(f"{value} does not fit a forced {width}-octet VINT")
    marked = value | (1 << (7 * width))
    return marked.to_bytes(width, "big")


def encode_unknown_size(width: int = MAX_VINT_WIDTH) -> bytes:
    """The reserved all-ones size pattern at the given width."""
    return ((1 << (7 * width + 1)) - 1).to_bytes(width, "big")


def decode_vint(data, offset: int = 0, size_context: bool = False):
    """Decode a VINT at `offset`; returns (value, width).

    In size context the all-ones pattern decodes to UNKNOWN.  Raises
    InvalidMarker when the first octet is 0x00 (width > 8) and Truncated
    when fewer octets remain than the width demands.
    """
    if offset >= len(data):
        raise Truncated("no octets at offset")
    first = data[offset]
    if first == 0:
        raise InvalidMarker("first VINT octet is 0x00")
    width = 1
    mask = 0x80
    while not first & mask:
        width += 1
        mask >>= 1
    if offset + width > len(data):
        raise Truncated(f"VINT of width {width} overruns input")
    value = first & (mask - 1)
    for i in range(1, width):
        value = (value << 8) | data[offset + i]
    if size_context and value == (1 << (7 * width)) - 1:
        return UNKNOWN, width
    return value, width


def encode_id(element_id: int) -> bytes:
    """Emit an element ID as its full stored octet pattern (1-4 octets)."""
    if element_id <= 0:
        raise InvalidMarker(f"bad element ID {element_id:#x}")
    width = (element_id.bit_length() + 7) // 8
    if width > MAX_ID_WIDTH:
        raise ValueTooLarge(f"element ID {element_id:#x} exceeds 4 octets")
    # The marker bit must sit exactly at the top of the first octet.
    marker_pos = 8 * width - width
    if element_id >> marker_pos != 1:
        raise InvalidMarker(f"{element_id:#x} is not a valid {width}-octet ID pattern")
    return element_id.to_bytes(width, "big")


def decode_id(data, offset: int = 0):
    """Read an element ID pattern; returns (id, width)."""
    if offset >= len(data):
        raise Truncated("no octets at offset")
    first = data[offset]
    if first == 0:
        raise InvalidMarker("first ID octet is 0x00")
    width = 1
    mask = 0x80
    while not first & mask:
        width += 1
        mask >>= 1
    if width > MAX_ID_WIDTH:
        raise InvalidMarker(f"element ID wider than {MAX_ID_WIDTH} octets")
    if offset + width > len(data):
        raise Truncated(f"ID of width {width} overruns input")
    return int.from_bytes(data[offset:offset + width], "big"), width


@dataclass(frozen=True)
class ElementHeader:
    id: int
    size: int | None          # payload octets, or UNKNOWN
    offset: int                # where the ID starts
    payload_offset: int        # offset + id octets + size-VINT octets

    @property
    def end(self) -> int | None:
        return None if self.size is UNKNOWN else self.payload_offset + self.size


@dataclass
class ElementTree:
    header: ElementHeader
    children: list[ElementTree] = field(default_factory=list)
    payload: bytes = b""
    _master: bool = False

    @property
    def is_master(self) -> bool:
        return self._master or bool(self.children)


def write_element(element_id: int, body) -> bytes:
    """Serialize one element.

    `body` is either the payload bytes of a leaf, or a list describing a
    master element whose items are (id, body) pairs (encoded recursively)
    or already-encoded byte strings (spliced verbatim).
    """
    if isinstance(body, (bytes, bytearray, memoryview)):
        payload = bytes(body)
    else:
        chunks = []
        for part in body:
            if isinstance(part, tuple):
                chunks.append(write_element(*part))
            else:
                chunks.append(bytes(part))
        payload = b"".join(chunks)
    return encode_id(element_id) + encode_vint(len(payload), size_context=True) + payload


def read_element(source, offset: int = 0) -> ElementHeader:
    """Parse one element header; the payload is not read.

    For UNKNOWN size the payload extends to the first sibling-or-higher
    element or the end of the source; resolving that is the caller's job.
    """
    if offset >= len(source):
        raise Truncated("offset beyond end of source")
    element_id, id_width = decode_id(source, offset)
    size, size_width = decode_vint(source, offset + id_width, size_context=True)
    return ElementHeader(
        id=element_id,
        size=size,
        offset=offset,
        payload_offset=offset + id_width + size_width,
    )


def iter_children(source, start: int, end: int):
    """Yield ElementHeaders of consecutive siblings in source[start:end)."""
    offset = start
    while offset < end:
        header = read_element(source, offset)
        if header.size is UNKNOWN:
            yield header
            return
        if header.end > end:
            raise MalformedNesting(
                f"element {header.id:#x} at {header.offset} overruns region end {end}"
            )
        yield header
        offset = header.end


def parse_tree(source, masters, offset: int = 0, end: int | None = None) -> ElementTree:
    """Parse the element at `offset` into a tree.

    IDs in `masters` are recursed into; everything else, including unknown
    IDs, is kept as an opaque leaf.  An element of UNKNOWN size extends to
    the end of the enclosing region (finalized files contain none).
    """
    if end is None:
        end = len(source)
    header = read_element(source, offset)
    payload_end = end if header.size is UNKNOWN else header.end
    if payload_end > end:
        raise MalformedNesting(
            f"element {header.id:#x} at {header.offset} overruns region end {end}"
        )
    if len(source) < payload_end:
        raise Truncated(f"payload of element {header.id:#x} overruns end of source")
    node = ElementTree(header=header)
    if header.id in masters:
        node._master = True
        child_offset = header.payload_offset
        while child_offset < payload_end:
            child = parse_tree(source, masters, child_offset, payload_end)
            node.children.append(child)
            if child.header.size is UNKNOWN:
                break
            child_offset = child.header.end
    else:
        node.payload = bytes(source[header.payload_offset:payload_end])
    return node


def serialize_tree(node: ElementTree) -> bytes:
    if node.children:
        return write_element(node.header.id, [serialize_tree(c) for c in node.children])
    if node._master:
        return write_element(node.header.id, [])
    return write_element(node.header.id, node.payload)


# Leaf value codecs shared by the container schema: EBML unsigned integers
# and floats are big-endian with minimal (integers) or fixed (floats) width.

def encode_uint(value: int, width: int | None = None) -> bytes:
    if value < 0:
        raise ValueTooLarge(f"negative integer {value}")
    if width is None:
        width = max(1, (value.bit_length() + 7) // 8)
    return value.to_bytes(width, "big")


def decode_uint(payload) -> int:
    return int.from_bytes(payload, "big")


def encode_float(value: float) -> bytes:
    return struct.pack(">d", value)


def decode_float(payload) -> float:
    if len(payload) == 4:
        return struct.unpack(">f", payload)[0]
    if len(payload) == 8:
        return struct.unpack(">d", payload)[0]
    raise EbmlError(f"float element of width {len(payload)}")
