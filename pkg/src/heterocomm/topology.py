"""Partitioning a world of ranks into homogeneous device groups."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

from .errors import DataError, InputError


@dataclass(frozen=True)
class Member:
    rank: int
    kind: str
    address: str = ""


@dataclass(frozen=True)
class Topology:
    world_size: int
    members: tuple  # Member per rank, ascending
    groups: tuple  # tuple of ascending rank tuples, ordered by leader
    leaders: tuple

    def kind_of(self, rank: int) -> str:
        return self.members[rank].kind

    def address_of(self, rank: int) -> str:
        return self.members[rank].address

    def group_of(self, rank: int) -> tuple:
        for g in self.groups:
            if rank in g:
                return g
        raise InputError(f"rank {rank} is not part of this world")

    def leader_of(self, rank: int) -> int:
        return self.group_of(rank)[0]

    def is_leader(self, rank: int) -> bool:
        return rank in self.leaders

    @property
    def ranks(self) -> tuple:
        return tuple(range(self.world_size))

    def to_bytes(self) -> bytes:
        """Canonical serialization: world_size u32, then per ascending rank
        rank u32 | kind len u8 | kind | address len u16 | address."""
        parts = [struct.pack("<I", self.world_size)]
        for m in self.members:
            kind = m.kind.encode()
            addr = m.address.encode()
            parts.append(struct.pack("<IB", m.rank, len(kind)) + kind)
            parts.append(struct.pack("<H", len(addr)) + addr)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, b: bytes) -> "Topology":
        try:
            (n,) = struct.unpack_from("<I", b, 0)
            off = 4
            members = []
            for _ in range(n):
                rank, klen = struct.unpack_from("<IB", b, off)
                off += 5
                kind = b[off:off + klen].decode()
                off += klen
                (alen,) = struct.unpack_from("<H", b, off)
                off += 2
                addr = b[off:off + alen].decode()
                off += alen
                members.append(Member(rank, kind, addr))
        except (struct.error, UnicodeDecodeError) as exc:
            raise DataError(f"malformed topology payload: {exc}") from None
        if off != len(b):
            raise DataError("trailing bytes after topology payload")
        return build_topology(members)


def build_topology(descriptors: Iterable) -> Topology:
    """Group ranks by device kind.

    ``descriptors`` holds ``(rank, kind, address)`` tuples, :class:`Member`
    objects or anything with ``rank`` and ``kind`` attributes. The result does
    not depend on input order.
    """
    members = {}
    for item in descriptors:
        if isinstance(item, tuple):
            rank, kind, *rest = item
            address = rest[0] if rest else ""
        else:
            rank, kind = item.rank, item.kind
            address = getattr(item, "address", "")
        if rank in members:
            raise InputError(f"duplicate rank {rank}")
        members[rank] = Member(int(rank), str(kind), str(address))
    n = len(members)
    if n == 0:
        raise InputError("a topology needs at least one rank")
    missing = sorted(set(range(n)) - set(members))
    if missing:
        raise InputError(f"ranks must be 0..{n - 1}; missing {missing}")

    by_kind: dict = {}
    for rank in range(n):
        by_kind.setdefault(members[rank].kind, []).append(rank)
    # dict preserves first-seen order, which is ascending leader order
    groups = tuple(tuple(rs) for rs in by_kind.values())
    return Topology(
        world_size=n,
        members=tuple(members[r] for r in range(n)),
        groups=groups,
        leaders=tuple(g[0] for g in groups),
    )
