"""Binary SHA-256 Merkle trees with batched (deduplicated) openings.

Leaves and internal nodes are domain-separated.  Trees are padded to a power
of two with a fixed empty-leaf sentinel; the empty tree's root is the
sentinel itself, so a digest over zero items is still well defined.
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Iterator, Sequence

_LEAF_PREFIX = b"\x00"
_NODE_PREFIX = b"\x01"

EMPTY_LEAF = hashlib.sha256(b"\x02zkeval-empty-leaf").digest()
DIGEST_SIZE = 32


def leaf_hash(payload: bytes) -> bytes:
    return hashlib.sha256(_LEAF_PREFIX + payload).digest()


def node_hash(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(_NODE_PREFIX + left + right).digest()


def _padded_size(n: int) -> int:
    if n <= 1:
        return 1
    return 1 << (n - 1).bit_length()


class MerkleTree:
    """Full tree kept in memory, one concatenated byte level per height."""

    __slots__ = ("levels", "n_real")

    def __init__(self, levels: list[bytes], n_real: int):
        self.levels = levels
        self.n_real = n_real

    @classmethod
    def from_leaf_hashes(cls, hashes: Sequence[bytes], n_real: int | None = None) -> "MerkleTree":
        n_real = len(hashes) if n_real is None else n_real
        size = _padded_size(len(hashes))
        base = bytearray()
        for h in hashes:
            base += h
        base += EMPTY_LEAF * (size - len(hashes))
        levels = [bytes(base)]
        cur = levels[0]
        sha = hashlib.sha256
        while len(cur) > DIGEST_SIZE:
            nxt = bytearray(len(cur) // 2)
            for i in range(len(nxt) // DIGEST_SIZE):
                nxt[i * 32 : i * 32 + 32] = sha(
                    _NODE_PREFIX + cur[i * 64 : i * 64 + 64]
                ).digest()
            cur = bytes(nxt)
            levels.append(cur)
        return cls(levels, n_real)

    @classmethod
    def from_payloads(cls, payloads: Iterable[bytes]) -> "MerkleTree":
        sha = hashlib.sha256
        hashes = [sha(_LEAF_PREFIX + p).digest() for p in payloads]
        return cls.from_leaf_hashes(hashes)

    @property
    def n_leaves(self) -> int:
        return len(self.levels[0]) // DIGEST_SIZE

    @property
    def height(self) -> int:
        return len(self.levels) - 1

    @property
    def root(self) -> bytes:
        return self.levels[-1]

    def node(self, level: int, idx: int) -> bytes:
        return self.levels[level][idx * 32 : idx * 32 + 32]

    def path_from_level(self, level: int, idx: int) -> list[bytes]:
        """Sibling chain from a node at ``level`` up to the root."""
        out = []
        for lvl in range(level, self.height):
            out.append(self.node(lvl, idx ^ 1))
            idx >>= 1
        return out

    def path(self, idx: int) -> list[bytes]:
        return self.path_from_level(0, idx)

    def multiproof(self, indices: Sequence[int]) -> list[bytes]:
        """Aux nodes for a batch opening of sorted distinct leaf indices.

        Shared ancestors are sent once; the verifier replays the same walk.
        """
        aux: list[bytes] = []
        idxs = sorted(set(indices))
        for lvl in range(self.height):
            nxt: list[int] = []
            i = 0
            while i < len(idxs):
                x = idxs[i]
                if i + 1 < len(idxs) and idxs[i + 1] == x ^ 1:
                    i += 2
                else:
                    aux.append(self.node(lvl, x ^ 1))
                    i += 1
                nxt.append(x >> 1)
            idxs = nxt
        return aux

    def serialize(self) -> bytes:
        return b"".join(self.levels)

    @classmethod
    def deserialize(cls, blob: bytes, n_real: int) -> "MerkleTree":
        size = _padded_size(max(n_real, 1))
        levels = []
        off = 0
        width = size * DIGEST_SIZE
        while True:
            levels.append(blob[off : off + width])
            off += width
            if width == DIGEST_SIZE:
                break
            width //= 2
        if off != len(blob):
            raise ValueError("merkle blob length mismatch")
        return cls(levels, n_real)


def verify_path_from_level(
    root: bytes, n_leaves: int, level: int, idx: int, node: bytes, path: Sequence[bytes]
) -> bool:
    height = (n_leaves - 1).bit_length() if n_leaves > 1 else 0
    if level + len(path) != height:
        return False
    h = node
    for sib in path:
        h = node_hash(sib, h) if idx & 1 else node_hash(h, sib)
        idx >>= 1
    return h == root


def verify_path(root: bytes, n_leaves: int, idx: int, leaf: bytes, path: Sequence[bytes]) -> bool:
    return verify_path_from_level(root, n_leaves, 0, idx, leaf, path)


def root_from_multiproof(
    n_leaves: int,
    indices: Sequence[int],
    leaf_hashes: Sequence[bytes],
    aux: Iterator[bytes],
) -> bytes | None:
    """Recompute the root from a batch opening; None on malformed input.

    ``indices`` must be sorted and distinct, ``aux`` an iterator over the
    prover-supplied nodes in the canonical walk order.
    """
    if len(indices) != len(leaf_hashes) or not indices:
        return None
    pos = list(indices)
    if any(b <= a for a, b in zip(pos, pos[1:])) or pos[0] < 0 or pos[-1] >= n_leaves:
        return None
    hashes = list(leaf_hashes)
    height = (n_leaves - 1).bit_length() if n_leaves > 1 else 0
    for _ in range(height):
        npos: list[int] = []
        nhash: list[bytes] = []
        i = 0
        while i < len(pos):
            x = pos[i]
            try:
                if i + 1 < len(pos) and pos[i + 1] == x ^ 1:
                    left, right = hashes[i], hashes[i + 1]
                    i += 2
                else:
                    sib = next(aux)
                    left, right = (hashes[i], sib) if x & 1 == 0 else (sib, hashes[i])
                    i += 1
            except StopIteration:
                return None
            npos.append(x >> 1)
            nhash.append(node_hash(left, right))
        pos, hashes = npos, nhash
    return hashes[0]


def merkle_root(payloads: Iterable[bytes]) -> bytes:
    """Root over a payload sequence; the empty sequence hashes to the sentinel."""
    hashes = [leaf_hash(p) for p in payloads]
    if not hashes:
        return EMPTY_LEAF
    return MerkleTree.from_leaf_hashes(hashes).root
