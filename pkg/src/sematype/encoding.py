"""Packing of SemaType tags and sizes into the 64-bit allocation size word.

Default layout, most significant bit first::

    H(1) | L(1) | nID(16) | rID(14) | size(32)

A word with H set carries a raw size in its low 63 bits and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass

WORD_BITS = 64
H_BIT = 1 << 63


@dataclass(frozen=True)
class SemaTypeTag:
    loop: bool = False
    nid: int = 0
    rid: int = 0
    # never encoded; the backend learns the thread from the caller
    thread_id: int = 0

    def key(self) -> tuple[int, int]:
        return (self.nid, self.rid)


@dataclass(frozen=True)
class Layout:
    nid_bits: int = 16
    rid_bits: int = 14
    size_bits: int = 32

    def __post_init__(self):
        if min(self.nid_bits, self.rid_bits, self.size_bits) < 1:
            raise ValueError("field widths must be positive")
        if self.nid_bits + self.rid_bits + self.size_bits + 2 != WORD_BITS:
            raise ValueError(
                f"nid_bits + rid_bits + size_bits must be {WORD_BITS - 2}, got "
                f"{self.nid_bits} + {self.rid_bits} + {self.size_bits}")

    @property
    def huge_threshold(self) -> int:
        return 1 << self.size_bits

    @property
    def nid_mask(self) -> int:
        return (1 << self.nid_bits) - 1

    @property
    def rid_mask(self) -> int:
        return (1 << self.rid_bits) - 1

    @property
    def size_mask(self) -> int:
        return (1 << self.size_bits) - 1

    @property
    def rid_shift(self) -> int:
        return self.size_bits

    @property
    def nid_shift(self) -> int:
        return self.size_bits + self.rid_bits

    @property
    def loop_shift(self) -> int:
        return WORD_BITS - 2


DEFAULT_LAYOUT = Layout()


def encode(tag: SemaTypeTag, size: int, layout: Layout = DEFAULT_LAYOUT) -> int:
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    if size >= H_BIT:
        raise ValueError(f"size {size} does not fit in 63 bits")
    if size >= layout.huge_threshold:
        return H_BIT | size
    if not 0 <= tag.nid <= layout.nid_mask:
        raise ValueError(f"nid {tag.nid} exceeds {layout.nid_bits} bits")
    if not 0 <= tag.rid <= layout.rid_mask:
        raise ValueError(f"rid {tag.rid} exceeds {layout.rid_bits} bits")
    return ((int(tag.loop) << layout.loop_shift)
            | (tag.nid << layout.nid_shift)
            | (tag.rid << layout.rid_shift)
            | size)


def decode(word: int, layout: Layout = DEFAULT_LAYOUT) -> tuple[str, SemaTypeTag, int]:
    """Return ``(kind, tag, size)`` with kind ``"huge"`` or ``"regular"``.

    Total on 64-bit inputs.  A plain legacy size below the huge threshold
    decodes to the all-zero tag.
    """
    word &= (1 << WORD_BITS) - 1
    if word & H_BIT:
        return "huge", SemaTypeTag(), word & (H_BIT - 1)
    tag = SemaTypeTag(
        loop=bool((word >> layout.loop_shift) & 1),
        nid=(word >> layout.nid_shift) & layout.nid_mask,
        rid=(word >> layout.rid_shift) & layout.rid_mask,
    )
    return "regular", tag, word & layout.size_mask
