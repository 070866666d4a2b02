"""Mixed graphs over named nodes, encoded as an endpoint-mark matrix.

marks[i][j] holds the mark at node j's end of the edge between i and j:
NONE means no edge, and CIRCLE/ARROW/TAIL are the usual partial-ancestral
endpoint symbols.  A DAG is the special case where every edge carries a
TAIL at the parent and an ARROW at the child and no directed cycle exists.
"""

from __future__ import annotations

import json

import numpy as np

NONE = 0
CIRCLE = 1
ARROW = 2
TAIL = 3

_MARK_NAMES = {NONE: "none", CIRCLE: "circle", ARROW: "arrow", TAIL: "tail"}
_DOT_GLYPH = {ARROW: "normal", TAIL: "none", CIRCLE: "odot"}


class MixedGraph:
    """Graph over named nodes whose edges carry endpoint marks.

    Adjacency is symmetric as a relation: either both marks[i][j] and
    marks[j][i] are NONE, or neither is.
    """

    def __init__(self, nodes, marks=None):
        self.nodes = list(nodes)
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("duplicate node names")
        n = len(self.nodes)
        if marks is None:
            self.marks = np.zeros((n, n), dtype=int)
        else:
            self.marks = np.asarray(marks, dtype=int)
            if self.marks.shape != (n, n):
                raise ValueError(f"marks must be {n}x{n}")
        self._index = {name: i for i, name in enumerate(self.nodes)}
        self.validate()

    # -- construction -----------------------------------------------------

    @classmethod
    def complete(cls, nodes) -> "MixedGraph":
        """Complete graph with CIRCLE marks everywhere (skeleton-search start)."""
        g = cls(nodes)
        n = len(g.nodes)
        g.marks = np.full((n, n), CIRCLE, dtype=int)
        np.fill_diagonal(g.marks, NONE)
        return g

    @classmethod
    def from_dag_edges(cls, nodes, edges) -> "MixedGraph":
        """Build a DAG from (parent, child) name pairs: TAIL at parent, ARROW at child."""
        g = cls(nodes)
        for parent, child in edges:
            g.add_edge(parent, child, TAIL, ARROW)
        g.validate_dag()
        return g

    def copy(self) -> "MixedGraph":
        return MixedGraph(self.nodes, self.marks.copy())

    # -- low-level access --------------------------------------------------

    def index(self, node: str) -> int:
        return self._index[node]

    def __contains__(self, node: str) -> bool:
        return node in self._index

    def mark_at(self, origin: str, end: str) -> int:
        """Mark at `end`'s endpoint of the edge between origin and end."""
        return int(self.marks[self._index[origin], self._index[end]])

    def set_mark(self, origin: str, end: str, mark: int) -> None:
        i, j = self._index[origin], self._index[end]
        if self.marks[i, j] == NONE or self.marks[j, i] == NONE:
            raise ValueError(f"no edge between {origin!r} and {end!r}")
        if mark not in (CIRCLE, ARROW, TAIL):
            raise ValueError(f"invalid endpoint mark {mark}")
        self.marks[i, j] = mark

    def add_edge(self, a: str, b: str, mark_at_a: int, mark_at_b: int) -> None:
        i, j = self._index[a], self._index[b]
        if i == j:
            raise ValueError("self loops are not allowed")
        if self.marks[i, j] != NONE or self.marks[j, i] != NONE:
            raise ValueError(f"edge {a!r}-{b!r} already present")
        for m in (mark_at_a, mark_at_b):
            if m not in (CIRCLE, ARROW, TAIL):
                raise ValueError(f"invalid endpoint mark {m}")
        self.marks[i, j] = mark_at_b
        self.marks[j, i] = mark_at_a

    def remove_edge(self, a: str, b: str) -> None:
        i, j = self._index[a], self._index[b]
        if self.marks[i, j] == NONE:
            raise ValueError(f"no edge between {a!r} and {b!r}")
        self.marks[i, j] = NONE
        self.marks[j, i] = NONE

    # -- structural queries -------------------------------------------------

    def is_adjacent(self, a: str, b: str) -> bool:
        return self.marks[self._index[a], self._index[b]] != NONE

    def adjacent_to(self, node: str) -> list[str]:
        i = self._index[node]
        return [self.nodes[j] for j in np.flatnonzero(self.marks[i]) ]

    def edges(self) -> list[tuple[str, str]]:
        """Unordered adjacencies as (a, b) with a before b in node order."""
        out = []
        n = len(self.nodes)
        for i in range(n):
            for j in range(i + 1, n):
                if self.marks[i, j] != NONE:
                    out.append((self.nodes[i], self.nodes[j]))
        return out

    def edge_count(self) -> int:
        return len(self.edges())

    def ambiguous_edges(self) -> list[tuple[str, str]]:
        """Edges with a CIRCLE at either end, sorted by node order."""
        out = []
        for a, b in self.edges():
            i, j = self._index[a], self._index[b]
            if self.marks[i, j] == CIRCLE or self.marks[j, i] == CIRCLE:
                out.append((a, b))
        return out

    def circle_count(self) -> int:
        return int(np.count_nonzero(self.marks == CIRCLE))

    def validate(self) -> None:
        if np.any(np.diag(self.marks) != NONE):
            raise ValueError("diagonal must be NONE")
        if not np.all((self.marks == NONE) == (self.marks.T == NONE)):
            raise ValueError("adjacency not symmetric")
        if not np.isin(self.marks, (NONE, CIRCLE, ARROW, TAIL)).all():
            raise ValueError("invalid mark codes present")

    def is_dag(self) -> bool:
        try:
            self.validate_dag()
        except ValueError:
            return False
        return True

    def validate_dag(self) -> None:
        """Check every edge is TAIL->ARROW and the directed relation is acyclic."""
        for a, b in self.edges():
            pair = {self.mark_at(a, b), self.mark_at(b, a)}
            if pair != {TAIL, ARROW}:
                raise ValueError(f"edge {a!r}-{b!r} is not tail/arrow oriented")
        self.topological_order()

    def parents(self, node: str) -> list[str]:
        """Nodes u with u -> node (TAIL at u, ARROW at node)."""
        j = self._index[node]
        out = []
        for i in range(len(self.nodes)):
            if self.marks[i, j] == ARROW and self.marks[j, i] == TAIL:
                out.append(self.nodes[i])
        return out

    def children(self, node: str) -> list[str]:
        i = self._index[node]
        out = []
        for j in range(len(self.nodes)):
            if self.marks[i, j] == ARROW and self.marks[j, i] == TAIL:
                out.append(self.nodes[j])
        return out

    def topological_order(self) -> list[str]:
        """Kahn's algorithm on -> edges. Raises on directed cycles."""
        indeg = {v: len(self.parents(v)) for v in self.nodes}
        frontier = [v for v in self.nodes if indeg[v] == 0]
        order = []
        while frontier:
            v = frontier.pop(0)
            order.append(v)
            for c in self.children(v):
                indeg[c] -= 1
                if indeg[c] == 0:
                    frontier.append(c)
        if len(order) != len(self.nodes):
            raise ValueError("directed cycle detected")
        return order

    # -- serialization -------------------------------------------------------

    def to_json(self) -> str:
        payload = {"nodes": self.nodes, "marks": self.marks.tolist()}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MixedGraph":
        payload = json.loads(text)
        return cls(payload["nodes"], payload["marks"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "MixedGraph":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def to_dot(self, name: str = "g") -> str:
        """Graphviz digraph with explicit endpoint glyphs, one line per adjacency."""
        lines = [f"digraph {name} {{", "  edge [dir=both];"]
        for node in self.nodes:
            lines.append(f'  "{node}";')
        for a, b in self.edges():
            tail = _DOT_GLYPH[self.mark_at(b, a)]
            head = _DOT_GLYPH[self.mark_at(a, b)]
            lines.append(f'  "{a}" -> "{b}" [arrowtail={tail}, arrowhead={head}];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MixedGraph)
            and self.nodes == other.nodes
            and np.array_equal(self.marks, other.marks)
        )

    def __repr__(self) -> str:
        return f"MixedGraph(nodes={self.nodes!r}, edges={self.edge_count()})"


def possible_descendants(g: MixedGraph, v: str) -> set[str]:
    """Nodes reachable from v along potentially directed paths.

    A step u -> w is traversable when the mark at u's own end of the edge
    (u, w) is not ARROW, i.e. nothing on the path points back toward v.
    Includes v itself.
    """
    iv = g.index(v)
    n = len(g.nodes)
    seen = {iv}
    stack = [iv]
    while stack:
        u = stack.pop()
        for w in range(n):
            if w in seen or g.marks[u, w] == NONE:
                continue
            if g.marks[w, u] != ARROW:  # mark at u's end
                seen.add(w)
                stack.append(w)
    return {g.nodes[i] for i in seen}


def non_descendants(g: MixedGraph, v: str, exclude=()) -> list[str]:
    """Complement of possible_descendants, minus `exclude`, in node order."""
    desc = possible_descendants(g, v)
    drop = set(exclude)
    return [u for u in g.nodes if u not in desc and u not in drop]
