import pytest
from hypothesis import given, settings, strategies as st

from rdm import ebml
from rdm.ebml import (
    UNKNOWN,
    ElementTree,
    InvalidMarker,
    MalformedNesting,
    Truncated,
    ValueTooLarge,
    decode_vint,
    encode_unknown_size,
    encode_vint,
    iter_children,
    parse_tree,
    read_element,
    serialize_tree,
    write_element,
)

WIDTH_BOUNDARIES = [(1 << (7 * w)) - 2 for w in range(1, 9)] + [
    (1 << (7 * w)) - 1 for w in range(1, 8)
] + [1 << (7 * w) for w in range(1, 8)]


def test_encode_vint_examples():
    assert encode_vint(0) == b"\x80"
    assert encode_vint(2) == b"\x82"
    assert encode_vint(500) == b"\x41\xf4"
    # 1-octet 0x7F data is the reserved all-ones size pattern: widen.
    assert encode_vint(127, size_context=True) == b"\x40\x7f"
    assert encode_vint(127) == b"\xff"


def test_decode_vint_examples():
    assert decode_vint(b"\x82") == (2, 1)
    assert decode_vint(b"\x41\xf4") == (500, 2)
    assert decode_vint(b"\xff", size_context=True) == (UNKNOWN, 1)
    assert decode_vint(b"\xff") == (127, 1)


def test_vint_limits():
    assert len(encode_vint(2**56 - 1)) == 8
    with pytest.raises(ValueTooLarge):
        encode_vint(2**56)
    with pytest.raises(ValueTooLarge):
        encode_vint(2**56 - 1, size_context=True)  # would need 9 octets
    with pytest.raises(InvalidMarker):
        decode_vint(b"\x00\x80")
    with pytest.raises(Truncated):
        decode_vint(b"\x41")
    with pytest.raises(Truncated):
        decode_vint(b"")


@pytest.mark.parametrize("value", WIDTH_BOUNDARIES)
def test_width_boundaries_round_trip(value):
    for size_context in (False, True):
        encoded = encode_vint(value, size_context=size_context)
        decoded, width = decode_vint(encoded, size_context=size_context)
        assert decoded == value
        assert width == len(encoded)


@pytest.mark.parametrize("value", WIDTH_BOUNDARIES)
def test_minimal_widths(value):
    # width(v) = ceil(bitlen(v)/7) generally; the size context folds the
    # all-ones widening in, which is ceil(bitlen(v+1)/7).
    plain = max(1, -(-value.bit_length() // 7))
    widened = max(1, -(-(value + 1).bit_length() // 7))
    assert len(encode_vint(value)) == plain
    assert len(encode_vint(value, size_context=True)) == widened


@given(st.integers(min_value=0, max_value=2**56 - 2), st.booleans())
@settings(max_examples=300)
def test_vint_round_trip_property(value, size_context):
    encoded = encode_vint(value, size_context=size_context)
    assert decode_vint(encoded, size_context=size_context) == (value, len(encoded))


def test_forced_width():
    assert encode_vint(3, width=8) == b"\x01\x00\x00\x00\x00\x00\x00\x03"
    assert decode_vint(encode_vint(3, width=8)) == (3, 8)
    assert encode_unknown_size(8) == b"\x01" + b"\xff" * 7
    with pytest.raises(ValueTooLarge):
        encode_vint(500, width=1)


def test_write_element_examples():
    assert write_element(0xA3, b"abc") == b"\xa3\x83abc"
    assert write_element(0xE7, b"") == b"\xe7\x80"
    # Master holding one leaf whose encoded length is 5.
    leaf = write_element(0xA3, b"abc")
    assert len(leaf) == 5
    master = write_element(0x1F43B675, [(0xA3, b"abc")])
    assert master == b"\x1f\x43\xb6\x75\x85" + leaf


def test_read_element_examples():
    data = write_element(0xA3, b"abc")
    header = read_element(data)
    assert (header.id, header.size, header.payload_offset) == (0xA3, 3, 2)
    header = read_element(write_element(0xE7, b""))
    assert (header.id, header.size, header.payload_offset) == (0xE7, 0, 2)
    with pytest.raises(Truncated):
        read_element(b"\xa3\x41")  # size VINT cut short


def test_read_element_unknown_size():
    data = b"\x18\x53\x80\x67" + encode_unknown_size(8) + b"xyz"
    header = read_element(data)
    assert header.size is UNKNOWN
    assert header.payload_offset == 12
    assert header.end is None


def test_parse_tree_round_trip():
    masters = {0x90, 0x91}
    tree = write_element(
        0x90,
        [
            (0xA3, b"abc"),
            (0x91, [(0xA4, b"x"), (0xA5, b"")]),
            (0xA6, b"\x00" * 17),
        ],
    )
    parsed = parse_tree(tree, masters)
    assert parsed.header.id == 0x90
    assert [c.header.id for c in parsed.children] == [0xA3, 0x91, 0xA6]
    assert parsed.children[0].payload == b"abc"
    inner = parsed.children[1]
    assert [c.header.id for c in inner.children] == [0xA4, 0xA5]
    assert serialize_tree(parsed) == tree


def test_parse_tree_unknown_leaf_id_is_preserved():
    tree = write_element(0x90, [(0xA3, b"abc"), (0x7ABF, b"future")])
    parsed = parse_tree(tree, {0x90})
    assert parsed.children[1].header.id == 0x7ABF
    assert parsed.children[1].payload == b"future"


def test_parse_tree_overrun_child():
    # Child declares size 9 but the master only holds 4 payload octets.
    bad = b"\x90\x84" + b"\xa3\x89ab"
    with pytest.raises(MalformedNesting):
        parse_tree(bad, {0x90})


def test_offset_arithmetic():
    blob = b"".join(write_element(0xA3, bytes([i]) * i) for i in range(6))
    offsets = [h.offset for h in iter_children(blob, 0, len(blob))]
    headers = [read_element(blob, o) for o in offsets]
    for here, there in zip(headers, headers[1:]):
        assert here.payload_offset + here.size == there.offset
    assert headers[-1].payload_offset + headers[-1].size == len(blob)


@st.composite
def element_trees(draw, depth=0):
    pool = [0xA3, 0xA4, 0x7ABF] if depth >= 5 else [0x90, 0x91, 0x92, 0xA3, 0xA4, 0x7ABF]
    element_id = draw(st.sampled_from(pool))
    if element_id in MASTERS:
        fanout = draw(st.integers(min_value=0, max_value=4 if depth < 2 else 2))
        children = [draw(element_trees(depth=depth + 1)) for _ in range(fanout)]
        return (element_id, children)
    payload = draw(st.binary(max_size=64 if depth else 1024))
    return (element_id, payload)


MASTERS = {0x90, 0x91, 0x92}


def _as_tuples(node: ElementTree):
    if node.is_master:
        return (node.header.id, [_as_tuples(c) for c in node.children])
    return (node.header.id, node.payload)


@given(element_trees())
@settings(max_examples=150, deadline=None)
def test_tree_round_trip_property(spec_tuple):
    data = write_element(*spec_tuple)
    parsed = parse_tree(data, MASTERS)
    assert _as_tuples(parsed) == spec_tuple
    assert serialize_tree(parsed) == data
