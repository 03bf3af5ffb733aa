"""Merkle tree and batched-opening tests."""

import random

from zkeval import merkle
from zkeval.merkle import MerkleTree, leaf_hash, root_from_multiproof


def _payloads(n, seed=0):
    rng = random.Random(seed)
    return [rng.randbytes(rng.randrange(1, 40)) for _ in range(n)]


def test_empty_tree_root_is_sentinel():
    assert merkle.merkle_root([]) == merkle.EMPTY_LEAF


def test_single_leaf():
    t = MerkleTree.from_payloads([b"abc"])
    assert t.root == leaf_hash(b"abc")
    assert merkle.verify_path(t.root, 1, 0, leaf_hash(b"abc"), t.path(0))


def test_single_openings_authenticate():
    payloads = _payloads(37)
    t = MerkleTree.from_payloads(payloads)
    for i in (0, 1, 17, 36):
        assert merkle.verify_path(t.root, t.n_leaves, i, leaf_hash(payloads[i]), t.path(i))
    bad = leaf_hash(b"not it")
    assert not merkle.verify_path(t.root, t.n_leaves, 3, bad, t.path(3))


def test_multiproof_round_trip_random():
    rng = random.Random(99)
    for trial in range(50):
        n = rng.randrange(1, 200)
        payloads = _payloads(n, seed=trial)
        t = MerkleTree.from_payloads(payloads)
        k = rng.randrange(1, n + 1)
        idxs = sorted(rng.sample(range(n), k))
        aux = t.multiproof(idxs)
        got = root_from_multiproof(
            t.n_leaves, idxs, [leaf_hash(payloads[i]) for i in idxs], iter(aux)
        )
        assert got == t.root


def test_multiproof_detects_wrong_leaf():
    payloads = _payloads(64)
    t = MerkleTree.from_payloads(payloads)
    idxs = [3, 9, 10, 40]
    aux = t.multiproof(idxs)
    leaves = [leaf_hash(payloads[i]) for i in idxs]
    leaves[2] = leaf_hash(b"tampered")
    assert root_from_multiproof(t.n_leaves, idxs, leaves, iter(aux)) != t.root


def test_multiproof_rejects_malformed_indices():
    payloads = _payloads(8)
    t = MerkleTree.from_payloads(payloads)
    leaves = [leaf_hash(payloads[0])]
    assert root_from_multiproof(t.n_leaves, [99], leaves, iter([])) is None
    assert root_from_multiproof(t.n_leaves, [], [], iter([])) is None
    aux = t.multiproof([1, 2])
    two = [leaf_hash(payloads[1]), leaf_hash(payloads[2])]
    assert root_from_multiproof(t.n_leaves, [1, 2], two, iter(aux[:-1])) is None
    assert root_from_multiproof(t.n_leaves, [2, 1], two, iter(aux)) is None


def test_subtree_path():
    payloads = _payloads(128)
    t = MerkleTree.from_payloads(payloads)
    # Authenticate the level-3 node covering leaves [40, 48).
    node = t.node(3, 5)
    path = t.path_from_level(3, 5)
    assert merkle.verify_path_from_level(t.root, t.n_leaves, 3, 5, node, path)
    assert not merkle.verify_path_from_level(t.root, t.n_leaves, 3, 4, node, path)


def test_serialize_round_trip():
    payloads = _payloads(19)
    t = MerkleTree.from_payloads(payloads)
    t2 = MerkleTree.deserialize(t.serialize(), 19)
    assert t2.root == t.root
    assert t2.levels == t.levels
