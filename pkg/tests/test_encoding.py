import itertools

import pytest
from hypothesis import given, strategies as st

from sematype.encoding import Layout, SemaTypeTag, decode, encode

NID_MAX, RID_MAX, SIZE_MAX = 2**16 - 1, 2**14 - 1, 2**32 - 1


def test_zero_tag_is_identity():
    for s in (1, 16, 613, 2**31, SIZE_MAX):
        assert encode(SemaTypeTag(), s) == s


def test_hand_packed_word():
    assert encode(SemaTypeTag(True, 1, 2), 16) == 0x4000400200000010


def test_huge_word():
    assert encode(SemaTypeTag(True, 5, 5), 2**33) == 0x8000000200000000
    assert decode(0x8000000200000000) == ("huge", SemaTypeTag(), 2**33)


def test_legacy_size_decodes_to_zero_tag():
    assert decode(613) == ("regular", SemaTypeTag(), 613)


@pytest.mark.parametrize("size", [0, -1, 2**63, 2**64])
def test_bad_sizes(size):
    with pytest.raises(ValueError):
        encode(SemaTypeTag(), size)


@pytest.mark.parametrize("tag", [SemaTypeTag(nid=2**16), SemaTypeTag(rid=2**14),
                                 SemaTypeTag(nid=-1)])
def test_out_of_range_fields(tag):
    with pytest.raises(ValueError):
        encode(tag, 8)


def test_boundary_product_roundtrip():
    for loop, nid, rid, size in itertools.product(
            (False, True), (0, 1, NID_MAX), (0, 1, RID_MAX), (1, 2, SIZE_MAX)):
        t = SemaTypeTag(loop, nid, rid)
        assert decode(encode(t, size)) == ("regular", t, size)


@given(st.booleans(), st.integers(0, NID_MAX), st.integers(0, RID_MAX), st.integers(1, SIZE_MAX))
def test_roundtrip(loop, nid, rid, size):
    t = SemaTypeTag(loop, nid, rid)
    assert decode(encode(t, size)) == ("regular", t, size)


@given(st.integers(2**32, 2**63 - 1))
def test_huge_roundtrip(size):
    kind, _, got = decode(encode(SemaTypeTag(True, 3, 4), size))
    assert (kind, got) == ("huge", size)


@given(st.integers(0, 2**32 - 1))
def test_legacy_safety(s):
    kind, tag, size = decode(s)
    assert kind == "regular" and size == s and tag == SemaTypeTag()


@given(st.tuples(st.booleans(), st.integers(0, NID_MAX), st.integers(0, RID_MAX), st.integers(1, SIZE_MAX)),
       st.tuples(st.booleans(), st.integers(0, NID_MAX), st.integers(0, RID_MAX), st.integers(1, SIZE_MAX)))
def test_injective(a, b):
    wa = encode(SemaTypeTag(*a[:3]), a[3])
    wb = encode(SemaTypeTag(*b[:3]), b[3])
    assert (wa == wb) == (a == b)


def test_layout_must_fill_word():
    with pytest.raises(ValueError):
        Layout(16, 14, 31)
    lay = Layout(20, 12, 30)
    t = SemaTypeTag(True, 2**20 - 1, 2**12 - 1)
    assert decode(encode(t, 2**30 - 1, lay), lay) == ("regular", t, 2**30 - 1)
    assert decode(encode(t, 2**30, lay), lay)[0] == "huge"
