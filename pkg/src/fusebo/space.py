"""Search space of tree-structured multimodal fusion architectures.

A net is a fusion tree over a fixed, ordered set of modalities together with
a depth map giving the number of fully-connected layers stacked after every
node.  Because each modality occurs exactly once as a leaf, every node of a
tree is identified by the set of modalities below it.  Internally a net is
stored as a sorted tuple of ``(mask, fc)`` pairs where bit ``i`` of ``mask``
stands for modality ``i``; the tree shape is recovered from set inclusion.

Children are always listed by their smallest modality index.  This order is
used for the canonical string, for the JSON encoding, and for display.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
import threading
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

__all__ = [
    "SpaceConfig",
    "Leaf",
    "Fusion",
    "Net",
    "Move",
    "MoveKind",
    "Violation",
    "InvalidNetError",
    "InapplicableMoveError",
    "SpaceTooLargeError",
    "validate",
    "canonicalize",
    "decode_canonical",
    "neighbors",
    "apply_move",
    "inverse_move",
    "random_net",
    "enumerate_space",
    "space_size",
    "count_trees",
]

DEFAULT_MAX_FC = 3
ENUMERATION_LIMIT = 200_000


class InvalidNetError(ValueError):
    """Raised when a tree or net breaks one of the structural invariants."""

    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        msg = "; ".join(str(v) for v in self.violations)
        super().__init__(f"invalid net: {msg}")


class InapplicableMoveError(ValueError):
    pass


class SpaceTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class SpaceConfig:
    """Modalities and the per-node FC-layer bound that define a search space."""

    modalities: tuple[str, ...]
    max_fc: int = DEFAULT_MAX_FC

    def __post_init__(self):
        mods = tuple(self.modalities)
        object.__setattr__(self, "modalities", mods)
        if len(mods) < 2:
            raise ValueError("a search space needs at least two modalities")
        if any(not isinstance(m, str) or not m for m in mods):
            raise ValueError("modality names must be non-empty strings")
        if len(set(mods)) != len(mods):
            raise ValueError("modality names must be unique")
        if int(self.max_fc) != self.max_fc or self.max_fc < 0:
            raise ValueError("max_fc must be a non-negative integer")
        object.__setattr__(self, "max_fc", int(self.max_fc))

    @property
    def n(self) -> int:
        return len(self.modalities)

    @classmethod
    def of_size(cls, n: int, max_fc: int = DEFAULT_MAX_FC) -> "SpaceConfig":
        """Space over ``n`` modalities named ``m0 .. m{n-1}``."""
        return cls(tuple(f"m{i}" for i in range(n)), max_fc)


# ---------------------------------------------------------------------------
# Nested-tree construction types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    index: int
    fc: int = 0


@dataclass(frozen=True)
class Fusion:
    children: tuple["Tree", ...]
    fc: int = 0

    def __init__(self, *children: "Tree", fc: int = 0):
        # Allow both Fusion(a, b, c) and Fusion([a, b, c]).
        if len(children) == 1 and isinstance(children[0], (list, tuple)):
            children = tuple(children[0])
        object.__setattr__(self, "children", tuple(children))
        object.__setattr__(self, "fc", fc)


Tree = Union[Leaf, Fusion]


@dataclass(frozen=True)
class Violation:
    path: str
    rule: str
    detail: str = ""

    def __str__(self):
        s = f"{self.rule} at {self.path}"
        return f"{s} ({self.detail})" if self.detail else s


def _check_tree(tree: Tree, n: int, max_fc: int | None) -> list[Violation]:
    out: list[Violation] = []
    seen: dict[int, str] = {}

    def walk(node, path):
        fc = node.fc
        if not isinstance(fc, (int, np.integer)) or isinstance(fc, bool):
            out.append(Violation(path, "fc type", f"fc={fc!r} is not an integer"))
        elif fc < 0:
            out.append(Violation(path, "fc bound", f"fc={fc} < 0"))
        elif max_fc is not None and fc > max_fc:
            out.append(Violation(path, "fc bound", f"fc={fc} > max_fc={max_fc}"))
        if isinstance(node, Leaf):
            i = node.index
            if not isinstance(i, (int, np.integer)) or not 0 <= i < n:
                out.append(Violation(path, "unknown modality", f"index {i!r}"))
            elif i in seen:
                out.append(
                    Violation(path, "duplicate modality", f"index {i} also at {seen[i]}")
                )
            else:
                seen[int(i)] = path
        elif isinstance(node, Fusion):
            if len(node.children) < 2:
                rule = "unary fusion" if len(node.children) == 1 else "empty fusion"
                out.append(Violation(path, rule, f"arity {len(node.children)}"))
            for k, child in enumerate(node.children):
                walk(child, f"{path}/{k}")
        else:
            out.append(Violation(path, "bad node", f"{type(node).__name__}"))

    walk(tree, "root")
    if isinstance(tree, Leaf):
        out.append(Violation("root", "leaf root", "the root must be a fusion"))
    for i in range(n):
        if i not in seen and not any(v.rule == "unknown modality" for v in out):
            out.append(Violation("root", "missing modality", f"index {i}"))
    return out


def validate(net: Union["Net", Tree], space: SpaceConfig) -> list[Violation]:
    """Check a net (or a raw nested tree) against ``space``.

    Returns an empty list when every invariant holds, otherwise one
    :class:`Violation` per broken invariant with the offending node path
    (``root/1/0`` is the first child of the second child of the root).
    """
    if isinstance(net, Net):
        out = []
        if net.modalities != space.modalities:
            out.append(
                Violation(
                    "root",
                    "modality set",
                    f"net uses {list(net.modalities)}, space has {list(space.modalities)}",
                )
            )
        return out + _check_tree(net.tree, space.n, space.max_fc)
    return _check_tree(net, space.n, space.max_fc)


# ---------------------------------------------------------------------------
# Net
# ---------------------------------------------------------------------------

Key = tuple[tuple[int, int], ...]

# Every key ever seen gets a small integer id so graph searches can work on
# ints.  Ids depend on the order keys are met and must never leak into output.
_UIDS: dict[Key, int] = {}
_KEYS: list[Key] = []
_FLYWEIGHTS: dict[tuple[tuple[str, ...], int], "Net"] = {}
_intern_lock = threading.Lock()


def _intern(key: Key) -> int:
    uid = _UIDS.get(key)
    if uid is None:
        with _intern_lock:
            uid = _UIDS.get(key)
            if uid is None:
                uid = _UIDS[key] = len(_KEYS)
                _KEYS.append(key)
    return uid


def interned_count() -> int:
    return len(_KEYS)


def _tree_to_nodes(tree: Tree) -> tuple[int, dict[int, int]]:
    if isinstance(tree, Leaf):
        m = 1 << int(tree.index)
        return m, {m: int(tree.fc)}
    nodes: dict[int, int] = {}
    mask = 0
    for c in tree.children:
        cm, cn = _tree_to_nodes(c)
        mask |= cm
        nodes.update(cn)
    nodes[mask] = int(tree.fc)
    return mask, nodes


def _parents(masks: Iterable[int]) -> dict[int, int]:
    """Map every mask to the smallest mask strictly containing it (root -> 0)."""
    ms = sorted(masks, key=int.bit_count)
    parent = {}
    for i, m in enumerate(ms):
        parent[m] = 0
        for s in ms[i + 1 :]:
            if s & m == m and s != m:
                parent[m] = s
                break
    return parent


def _children(parent: dict[int, int]) -> dict[int, list[int]]:
    kids: dict[int, list[int]] = {m: [] for m in parent}
    for m, p in parent.items():
        if p:
            kids[p].append(m)
    for v in kids.values():
        v.sort(key=_low_bit)
    return kids


def _low_bit(m: int) -> int:
    return (m & -m).bit_length()


def _canon(mask: int, nodes: dict[int, int], kids: dict[int, list[int]]) -> str:
    if mask.bit_count() == 1:
        return f"{mask.bit_length() - 1}:{nodes[mask]}"
    inner = ",".join(_canon(c, nodes, kids) for c in kids[mask])
    return f"({inner}):{nodes[mask]}"


class Net:
    """One point of the search space: a fusion tree plus its depth map.

    Equality and hashing use the canonical form only, so nets that differ
    only in the order in which children were listed compare equal.
    """

    __slots__ = ("modalities", "key", "uid", "_hash", "__dict__")

    def __init__(self, modalities: Sequence[str], nodes: dict[int, int] | Key):
        self.modalities = tuple(modalities)
        items = nodes.items() if isinstance(nodes, dict) else nodes
        self.key: Key = tuple(sorted((int(m), int(f)) for m, f in items))
        self._hash = hash(self.key)
        self._check()
        self.uid = _intern(self.key)

    @classmethod
    def _of(cls, modalities: tuple[str, ...], uid: int) -> "Net":
        """Shared instance for an already-validated interned key."""
        net = _FLYWEIGHTS.get((modalities, uid))
        if net is None:
            net = cls.__new__(cls)
            net.modalities = modalities
            net.key = _KEYS[uid]
            net.uid = uid
            net._hash = hash(net.key)
            net = _FLYWEIGHTS.setdefault((modalities, uid), net)
        return net

    def _check(self):
        n = len(self.modalities)
        full = (1 << n) - 1
        masks = [m for m, _ in self.key]
        bad = []
        if len(set(masks)) != len(masks):
            bad.append(Violation("root", "duplicate node"))
        if any(m <= 0 or m & ~full for m, _ in self.key):
            bad.append(Violation("root", "unknown modality"))
        if any(f < 0 for _, f in self.key):
            bad.append(Violation("root", "fc bound", "negative fc"))
        if full not in masks:
            bad.append(Violation("root", "missing root"))
        for i in range(n):
            if (1 << i) not in masks:
                bad.append(Violation("root", "missing modality", f"index {i}"))
        if not bad:
            for a, b in itertools.combinations(masks, 2):
                if a & b and a & b not in (a, b):
                    bad.append(Violation("root", "overlapping nodes", f"{a:b} / {b:b}"))
        if bad:
            raise InvalidNetError(bad)
        # Laminar family containing all singletons: every fusion has >= 2 children.

    @classmethod
    def from_tree(cls, modalities: Sequence[str], tree: Tree) -> "Net":
        problems = _check_tree(tree, len(modalities), None)
        if problems:
            raise InvalidNetError(problems)
        _, nodes = _tree_to_nodes(tree)
        return cls(modalities, nodes)

    @classmethod
    def flat(cls, modalities: Sequence[str], fc: int = 0) -> "Net":
        """Single fusion of every modality, all depths equal to ``fc``."""
        n = len(modalities)
        nodes = {1 << i: fc for i in range(n)}
        nodes[(1 << n) - 1] = fc
        return cls(modalities, nodes)

    # -- identity -----------------------------------------------------------
    def __eq__(self, other):
        if not isinstance(other, Net):
            return NotImplemented
        return self.key == other.key and self.modalities == other.modalities

    def __hash__(self):
        return self._hash

    def __lt__(self, other: "Net"):
        return self.canonical < other.canonical

    def __repr__(self):
        return f"Net({self.canonical})"

    def __reduce__(self):
        return (Net, (self.modalities, self.key))

    # -- derived structure ---------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.modalities)

    @property
    def root(self) -> int:
        return (1 << self.n) - 1

    @cached_property
    def depths(self) -> dict[frozenset[int], int]:
        """Depth map keyed by the set of modality indices below each node."""
        return {_mask_set(m): f for m, f in self.key}

    @cached_property
    def _nodes(self) -> dict[int, int]:
        return dict(self.key)

    @cached_property
    def _parent(self) -> dict[int, int]:
        return _parents(self._nodes)

    @cached_property
    def _kids(self) -> dict[int, list[int]]:
        return _children(self._parent)

    @cached_property
    def canonical(self) -> str:
        return _canon(self.root, self._nodes, self._kids)

    @cached_property
    def tree(self) -> Fusion:
        def build(m):
            if m.bit_count() == 1:
                return Leaf(m.bit_length() - 1, self._nodes[m])
            return Fusion(*(build(c) for c in self._kids[m]), fc=self._nodes[m])

        return build(self.root)

    @property
    def fusion_count(self) -> int:
        return sum(1 for m, _ in self.key if m.bit_count() > 1)

    @property
    def total_fc(self) -> int:
        return sum(f for _, f in self.key)

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        def enc(m):
            if m.bit_count() == 1:
                return {"leaf": m.bit_length() - 1, "fc": self._nodes[m]}
            return {"fuse": [enc(c) for c in self._kids[m]], "fc": self._nodes[m]}

        return {"modalities": list(self.modalities), "tree": enc(self.root)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "Net":
        def dec(obj):
            if not isinstance(obj, dict) or "fc" not in obj:
                raise ValueError(f"malformed node: {obj!r}")
            if "leaf" in obj:
                return Leaf(obj["leaf"], obj["fc"])
            if "fuse" in obj:
                return Fusion(*(dec(c) for c in obj["fuse"]), fc=obj["fc"])
            raise ValueError(f"malformed node: {obj!r}")

        return cls.from_tree(data["modalities"], dec(data["tree"]))

    @classmethod
    def from_json(cls, text: str) -> "Net":
        return cls.from_dict(json.loads(text))


def _mask_set(m: int) -> frozenset[int]:
    return frozenset(i for i in range(m.bit_length()) if m >> i & 1)


def canonicalize(net: Net) -> str:
    """Canonical string of ``net``.

    Leaves print as ``index:fc``, fusions as ``(child,child,...):fc`` with
    children ordered by their smallest modality index.
    """
    return net.canonical


def decode_canonical(text: str, modalities: Sequence[str]) -> Net:
    """Parse a canonical string (any child order is accepted)."""
    pos = 0

    def number():
        nonlocal pos
        start = pos
        while pos < len(text) and text[pos].isdigit():
            pos += 1
        if start == pos:
            raise ValueError(f"expected integer at offset {start} in {text!r}")
        return int(text[start:pos])

    def expect(ch):
        nonlocal pos
        if pos >= len(text) or text[pos] != ch:
            raise ValueError(f"expected {ch!r} at offset {pos} in {text!r}")
        pos += 1

    def node():
        nonlocal pos
        if pos < len(text) and text[pos] == "(":
            pos += 1
            kids = [node()]
            while pos < len(text) and text[pos] == ",":
                pos += 1
                kids.append(node())
            expect(")")
            expect(":")
            return Fusion(*kids, fc=number())
        idx = number()
        expect(":")
        return Leaf(idx, number())

    tree = node()
    if pos != len(text):
        raise ValueError(f"trailing characters at offset {pos} in {text!r}")
    return Net.from_tree(modalities, tree)


# ---------------------------------------------------------------------------
# Moves
# ---------------------------------------------------------------------------


class MoveKind(str, enum.Enum):
    ADD_FUSION = "AddFusion"
    REMOVE_FUSION = "RemoveFusion"
    SHIFT_LATER = "ShiftMergeLater"
    SHIFT_EARLIER = "ShiftMergeEarlier"
    DEPTH_INC = "DepthInc"
    DEPTH_DEC = "DepthDec"

    @property
    def is_depth(self) -> bool:
        return self in (MoveKind.DEPTH_INC, MoveKind.DEPTH_DEC)


_KIND_ORDER = {k: i for i, k in enumerate(MoveKind)}


@dataclass(frozen=True)
class Move:
    """One typed edit of a net.

    ``locus`` is the modality bitmask of the affected node: the parent whose
    children are grouped (AddFusion), the fusion being spliced out
    (RemoveFusion), the leaf being shifted (ShiftMerge*), or the node whose
    depth changes.  ``payload`` holds the grouped child masks for AddFusion
    and the receiving sibling for ShiftMergeEarlier.
    """

    kind: MoveKind
    locus: int
    payload: tuple[int, ...] = field(default=())

    def sort_key(self):
        return (_KIND_ORDER[self.kind], self.locus, self.payload)

    def __str__(self):
        def fmt(m):
            return "{" + ",".join(map(str, sorted(_mask_set(m)))) + "}"

        extra = " -> " + " ".join(fmt(p) for p in self.payload) if self.payload else ""
        return f"{self.kind.value}@{fmt(self.locus)}{extra}"


def _apply(
    nodes: dict[int, int], move: Move, max_fc: int | None
) -> dict[int, int]:
    """Apply ``move`` to a mask->fc dict, returning a new dict or raising."""
    kind, loc = move.kind, move.locus
    if loc not in nodes:
        raise InapplicableMoveError(f"{move}: locus is not a node")
    parent = _parents(nodes)
    full = max(nodes)

    def splice(m):
        # Deleting a node is only allowed at zero depth so that the
        # re-creating move (which starts at fc=0) is an exact inverse.
        if nodes[m] != 0:
            raise InapplicableMoveError(f"{move}: spliced node has fc={nodes[m]} != 0")
        out = dict(nodes)
        del out[m]
        return out

    if kind is MoveKind.DEPTH_INC or kind is MoveKind.DEPTH_DEC:
        fc = nodes[loc] + (1 if kind is MoveKind.DEPTH_INC else -1)
        if fc < 0 or (max_fc is not None and fc > max_fc):
            raise InapplicableMoveError(f"{move}: fc {fc} out of bounds")
        out = dict(nodes)
        out[loc] = fc
        return out

    kids = _children(parent)
    if kind is MoveKind.ADD_FUSION:
        group = move.payload
        siblings = kids[loc]
        if (
            len(group) < 2
            or len(set(group)) != len(group)
            or not set(group) <= set(siblings)
            or len(group) >= len(siblings)
        ):
            raise InapplicableMoveError(
                f"{move}: group must be a proper subset (>= 2) of the node's children"
            )
        new = 0
        for g in group:
            new |= g
        out = dict(nodes)
        out[new] = 0
        return out

    if kind is MoveKind.REMOVE_FUSION:
        if loc == full or loc.bit_count() < 2:
            raise InapplicableMoveError(f"{move}: only non-root fusions can be removed")
        return splice(loc)

    if loc.bit_count() != 1:
        raise InapplicableMoveError(f"{move}: only single modalities can be shifted")
    p = parent[loc]
    if kind is MoveKind.SHIFT_LATER:
        if p == full:
            raise InapplicableMoveError(f"{move}: leaf already merges at the root")
        if len(kids[p]) == 2:
            return splice(p)
        out = dict(nodes)
        out[p & ~loc] = out.pop(p)
        return out

    if kind is MoveKind.SHIFT_EARLIER:
        if len(move.payload) != 1:
            raise InapplicableMoveError(f"{move}: needs exactly one target sibling")
        (s,) = move.payload
        if s not in kids[p] or s == loc or s.bit_count() < 2:
            raise InapplicableMoveError(f"{move}: target is not a sibling fusion")
        if len(kids[p]) == 2:
            return splice(s)
        out = dict(nodes)
        out[s | loc] = out.pop(s)
        return out

    raise InapplicableMoveError(f"unknown move kind {kind!r}")


def _candidate_moves(nodes: dict[int, int], max_fc: int) -> Iterator[Move]:
    parent = _parents(nodes)
    kids = _children(parent)
    full = max(nodes)
    for p, ch in kids.items():
        if len(ch) >= 3:
            for r in range(2, len(ch)):
                for group in itertools.combinations(ch, r):
                    yield Move(MoveKind.ADD_FUSION, p, group)
    for m, f in nodes.items():
        if m != full and m.bit_count() > 1 and f == 0:
            yield Move(MoveKind.REMOVE_FUSION, m)
    for m in nodes:
        if m.bit_count() != 1:
            continue
        p = parent[m]
        if p != full and (len(kids[p]) > 2 or nodes[p] == 0):
            yield Move(MoveKind.SHIFT_LATER, m)
        for s in kids[p]:
            if s != m and s.bit_count() > 1 and (len(kids[p]) > 2 or nodes[s] == 0):
                yield Move(MoveKind.SHIFT_EARLIER, m, (s,))
    for m, f in nodes.items():
        if f < max_fc:
            yield Move(MoveKind.DEPTH_INC, m)
        if f > 0:
            yield Move(MoveKind.DEPTH_DEC, m)


_ADJ: dict[tuple[int, int], tuple[tuple[int, Move], ...]] = {}


def _adjacent(uid: int, max_fc: int) -> tuple[tuple[int, Move], ...]:
    """Deduplicated neighbor ids with the first move (in kind order) reaching each."""
    adj = _ADJ.get((uid, max_fc))
    if adj is not None:
        return adj
    key = _KEYS[uid]
    nodes = dict(key)
    seen: dict[Key, Move] = {}
    for mv in _candidate_moves(nodes, max_fc):
        k = tuple(sorted(_apply(nodes, mv, max_fc).items()))
        if k != key and k not in seen:
            seen[k] = mv
    adj = tuple((_intern(k), mv) for k, mv in seen.items())
    _ADJ[(uid, max_fc)] = adj
    return adj


def neighbors(net: Net, space: SpaceConfig) -> dict[Net, Move]:
    """All nets one edge away from ``net`` in the neighbor graph.

    Returns a mapping neighbor -> move.  Where two edits lead to the same
    neighbor (a shift that empties a two-child fusion is the same edit as
    removing that fusion) the move listed first in :class:`MoveKind` wins.
    """
    mods = net.modalities
    return {Net._of(mods, u): mv for u, mv in _adjacent(net.uid, space.max_fc)}


def apply_move(net: Net, move: Move, space: SpaceConfig | None = None) -> Net:
    """Apply one move.  ``space`` supplies the FC upper bound when given."""
    max_fc = None if space is None else space.max_fc
    return Net(net.modalities, _apply(net._nodes, move, max_fc))


def inverse_move(net: Net, move: Move) -> Move:
    """The move that takes ``apply_move(net, move)`` back to ``net``."""
    nodes = net._nodes
    parent, kids = net._parent, net._kids
    kind, loc = move.kind, move.locus
    _apply(nodes, move, None)  # raises if inapplicable

    if kind is MoveKind.DEPTH_INC:
        return Move(MoveKind.DEPTH_DEC, loc)
    if kind is MoveKind.DEPTH_DEC:
        return Move(MoveKind.DEPTH_INC, loc)
    if kind is MoveKind.ADD_FUSION:
        new = 0
        for g in move.payload:
            new |= g
        return Move(MoveKind.REMOVE_FUSION, new)
    if kind is MoveKind.REMOVE_FUSION:
        return Move(MoveKind.ADD_FUSION, parent[loc], tuple(kids[loc]))
    p = parent[loc]
    if kind is MoveKind.SHIFT_LATER:
        if len(kids[p]) == 2:
            return Move(MoveKind.ADD_FUSION, parent[p], tuple(kids[p]))
        return Move(MoveKind.SHIFT_EARLIER, loc, (p & ~loc,))
    # SHIFT_EARLIER
    (s,) = move.payload
    if len(kids[p]) == 2:
        return Move(MoveKind.ADD_FUSION, p, tuple(kids[s]))
    return Move(MoveKind.SHIFT_LATER, loc)


# ---------------------------------------------------------------------------
# Sampling and enumeration
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _stirling2(m: int, k: int) -> int:
    if m == k:
        return 1
    if k == 0 or k > m:
        return 0
    return k * _stirling2(m - 1, k) + _stirling2(m - 1, k - 1)


def _randint(rng: np.random.Generator, high: int) -> int:
    """Uniform integer in [0, high) for arbitrarily large ``high``."""
    if high < 2**62:
        return int(rng.integers(high))
    nbytes = (high.bit_length() + 7) // 8 + 8
    return int.from_bytes(rng.bytes(nbytes), "little") % high


def _sample_partition(elems: list[int], rng: np.random.Generator) -> list[list[int]]:
    """Uniform draw from the set partitions of ``elems`` with at least two blocks."""
    m = len(elems)
    r = _randint(rng, sum(_stirling2(m, k) for k in range(2, m + 1)))
    k = 2
    while r >= _stirling2(m, k):
        r -= _stirling2(m, k)
        k += 1
    # Peel elements off the end: the last of j elements is a singleton block
    # in S(j-1, b-1) of the S(j, b) partitions, otherwise joins one of b blocks.
    pending = []
    b = k
    for j in range(m, 0, -1):
        alone = _stirling2(j - 1, b - 1)
        if _randint(rng, _stirling2(j, b)) < alone:
            pending.append((elems[j - 1], None))
            b -= 1
        else:
            pending.append((elems[j - 1], _randint(rng, b)))
    blocks: list[list[int]] = []
    for e, slot in reversed(pending):
        if slot is None:
            blocks.append([e])
        else:
            blocks[slot].append(e)
    return blocks


def _sample_tree(elems: list[int], rng, out: dict[int, int]) -> int:
    mask = 0
    for block in _sample_partition(elems, rng):
        if len(block) == 1:
            mask |= 1 << block[0]
        else:
            mask |= _sample_tree(block, rng, out)
    out[mask] = 0
    return mask


def random_net(space: SpaceConfig, rng: np.random.Generator | int | None = None) -> Net:
    """Draw a net with the two-stage baseline sampler.

    The tree is grown by splitting the modality set into a uniformly chosen
    set partition with at least two blocks and recursing into every block of
    size two or more.  Each node's FC count is then drawn uniformly from
    ``0..max_fc``.  The result is not uniform over the space.
    """
    rng = np.random.default_rng(rng)
    nodes: dict[int, int] = {1 << i: 0 for i in range(space.n)}
    _sample_tree(list(range(space.n)), rng, nodes)
    for m in sorted(nodes):
        nodes[m] = int(rng.integers(space.max_fc + 1))
    return Net(space.modalities, nodes)


def _set_partitions(elems: list[int]) -> Iterator[list[list[int]]]:
    if not elems:
        yield []
        return
    first, rest = elems[0], elems[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1 :]


def _trees(elems: tuple[int, ...]) -> list[frozenset[int]]:
    """All fusion trees over ``elems`` as sets of fusion-node masks."""
    full = sum(1 << e for e in elems)
    out = []
    for part in _set_partitions(list(elems)):
        if len(part) < 2:
            continue
        options = [_trees(tuple(b)) if len(b) > 1 else [frozenset()] for b in part]
        for combo in itertools.product(*options):
            out.append(frozenset().union(*combo) | {full})
    return out


@lru_cache(maxsize=None)
def count_trees(n: int) -> int:
    """Number of fusion trees over ``n`` labelled modalities (total partitions)."""
    if n == 1:
        return 1
    total = 0
    for k in range(2, n + 1):
        total += _count_forests(n, k)
    return total


@lru_cache(maxsize=None)
def _count_forests(n: int, k: int) -> int:
    # Ways to split n labelled items into k unordered blocks, each block a tree.
    if k == 0:
        return 1 if n == 0 else 0
    if n < k:
        return 0
    # The block containing the first item has size s.
    return sum(
        math.comb(n - 1, s - 1) * count_trees(s) * _count_forests(n - s, k - 1)
        for s in range(1, n - k + 2)
    )


@lru_cache(maxsize=None)
def _fusion_count_hist(n: int) -> dict[int, int]:
    hist: dict[int, int] = {}
    for t in _trees(tuple(range(n))):
        hist[len(t)] = hist.get(len(t), 0) + 1
    return hist


def space_size(space: SpaceConfig) -> int:
    """Number of nets in ``space`` (requires enumerating tree shapes)."""
    if space.n > 8:
        raise SpaceTooLargeError(f"cannot size a space over {space.n} modalities")
    b = space.max_fc + 1
    return sum(c * b ** (f + space.n) for f, c in _fusion_count_hist(space.n).items())


def enumerate_space(space: SpaceConfig, limit: int = ENUMERATION_LIMIT) -> list[Net]:
    """Every net of ``space``, sorted by canonical string.

    Raises :class:`SpaceTooLargeError` when the space holds more than
    ``limit`` nets.
    """
    size = space_size(space)
    if size > limit:
        raise SpaceTooLargeError(f"space has {size} nets, limit is {limit}")
    leaves = [1 << i for i in range(space.n)]
    levels = range(space.max_fc + 1)
    out = []
    for fusions in _trees(tuple(range(space.n))):
        masks = sorted(leaves + list(fusions))
        for fcs in itertools.product(levels, repeat=len(masks)):
            out.append(Net(space.modalities, tuple(zip(masks, fcs))))
    out.sort(key=lambda x: x.canonical)
    return out
