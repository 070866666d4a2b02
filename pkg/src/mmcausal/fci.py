"""Constraint-based structure discovery: G² test, FCI, and a PC fallback.

The search produces a MixedGraph in PAG convention: CIRCLE marks are
undecided endpoints, ARROW/TAIL are invariant.  The PC backend emits CPDAG
convention instead (TAIL/ARROW for directed edges, CIRCLE-CIRCLE for
undirected ones) so downstream code can treat both uniformly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .graph import ARROW, CIRCLE, TAIL, MixedGraph
from .types import PipelineConfig, StructuredDataset

MIN_STRATUM = 5  # strata below this size carry no statistic and no dof


@dataclass(frozen=True)
class CIResult:
    statistic: float
    p_value: float
    dof: int
    independent: bool


class SepsetMap:
    """Separating sets found during the search, keyed by unordered pair."""

    def __init__(self):
        self._sets: dict[frozenset, set] = {}

    def record(self, x: str, y: str, sepset) -> None:
        sepset = set(sepset)
        if x in sepset or y in sepset:
            raise ValueError("separating set must not contain its endpoints")
        self._sets[frozenset((x, y))] = sepset

    def get(self, x: str, y: str):
        return self._sets.get(frozenset((x, y)))

    def __contains__(self, pair) -> bool:
        return frozenset(pair) in self._sets

    def __len__(self) -> int:
        return len(self._sets)


# -- conditional independence ---------------------------------------------------


def _column(data: StructuredDataset, name: str) -> np.ndarray:
    ids = data.ids
    if name == data.factor_set.target_name:
        return np.array([data.targets[sid] for sid in ids], dtype=float)
    idx = data.factor_set.index_of(name)
    return np.array([float(data.rows[sid][idx]) for sid in ids])


def gsquared_from_arrays(xcol: np.ndarray, ycol: np.ndarray, scols, alpha: float) -> CIResult:
    """Likelihood-ratio G² of x ⊥ y within strata defined by the S columns.

    Categories are the values observed per stratum; strata smaller than
    MIN_STRATUM contribute neither statistic nor degrees of freedom.
    """
    n = len(xcol)
    if scols:
        keys = np.stack(scols, axis=1)
        _, strata = np.unique(keys, axis=0, return_inverse=True)
    else:
        strata = np.zeros(n, dtype=int)
    g2 = 0.0
    dof = 0
    for stratum in np.unique(strata):
        mask = strata == stratum
        if int(mask.sum()) < MIN_STRATUM:
            continue
        xcats, xcodes = np.unique(xcol[mask], return_inverse=True)
        ycats, ycodes = np.unique(ycol[mask], return_inverse=True)
        table = np.zeros((len(xcats), len(ycats)))
        np.add.at(table, (xcodes, ycodes), 1.0)
        total = table.sum()
        expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / total
        observed = table > 0
        g2 += 2.0 * float(np.sum(table[observed] * np.log(table[observed] / expected[observed])))
        dof += (len(xcats) - 1) * (len(ycats) - 1)
    p_value = 1.0 if dof == 0 else float(chi2.sf(g2, dof))
    return CIResult(float(g2), p_value, int(dof), p_value > alpha)


def ci_gsquared(data: StructuredDataset, x: str, y: str, S=(), alpha: float = 0.05) -> CIResult:
    if len(data) == 0:
        raise ValueError("empty dataset")
    S = list(S)
    if x == y or x in S or y in S:
        raise ValueError("x, y must be distinct and disjoint from S")
    xcol = _column(data, x)
    ycol = _column(data, y)
    scols = [_column(data, s) for s in S]
    return gsquared_from_arrays(xcol, ycol, scols, alpha)


def make_gsquared_oracle(data: StructuredDataset, alpha: float):
    """Boolean independence oracle over a dataset, with cached columns."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    names = list(data.factor_set.names) + [data.factor_set.target_name]
    columns = {name: _column(data, name) for name in names}

    def independent(x: str, y: str, S) -> bool:
        scols = [columns[s] for s in S]
        return gsquared_from_arrays(columns[x], columns[y], scols, alpha).independent

    return independent


# -- skeleton ----------------------------------------------------------------------


def skeleton_search(ci, nodes, max_cond: int = 3) -> tuple[MixedGraph, SepsetMap]:
    """PC-style adjacency search over conditioning sets of growing size.

    `ci(x, y, S)` returns True when x ⊥ y | S.  All tests of one depth use
    the adjacency snapshot taken at its start and removals are committed
    after the sweep, so the result does not depend on test order.
    """
    g = MixedGraph.complete(nodes)
    sepsets = SepsetMap()
    depth = 0
    while depth <= max_cond:
        adj = {v: g.adjacent_to(v) for v in g.nodes}
        if all(len(adj[v]) - 1 < depth for v in g.nodes):
            break
        removals = []
        for x, y in g.edges():
            found = None
            for side, other in ((x, y), (y, x)):
                candidates = [v for v in adj[side] if v != other]
                if len(candidates) < depth:
                    continue
                for S in itertools.combinations(candidates, depth):
                    if ci(x, y, set(S)):
                        found = set(S)
                        break
                if found is not None:
                    break
            if found is not None:
                removals.append((x, y, found))
        for x, y, S in removals:
            g.remove_edge(x, y)
            sepsets.record(x, y, S)
        depth += 1
    return g, sepsets


# -- Possible-D-SEP pruning ----------------------------------------------------------


def _possible_dsep_set(g: MixedGraph, x: str) -> set:
    """Nodes reachable from x along paths whose interiors are colliders or triangles."""
    out = set()
    seen = set()
    frontier = [(x, nbr) for nbr in g.adjacent_to(x)]
    while frontier:
        prev, cur = frontier.pop()
        if (prev, cur) in seen:
            continue
        seen.add((prev, cur))
        out.add(cur)
        for nxt in g.adjacent_to(cur):
            if nxt == prev or nxt == x:
                continue
            collider = g.mark_at(prev, cur) == ARROW and g.mark_at(nxt, cur) == ARROW
            triangle = g.is_adjacent(prev, nxt)
            if collider or triangle:
                frontier.append((cur, nxt))
    out.discard(x)
    return out


def possible_dsep_prune(g: MixedGraph, sepsets: SepsetMap, ci,
                        max_cond: int = 3) -> tuple[MixedGraph, SepsetMap]:
    """FCI's extra removal phase for latent confounding.

    Colliders are oriented on a scratch copy to compute Possible-D-SEP sets,
    every surviving edge is retested against subsets drawn from them, and
    all marks are reset to CIRCLE afterwards.
    """
    work = g.copy()
    _orient_colliders(work, sepsets)
    pds = {x: _possible_dsep_set(work, x) for x in work.nodes}
    for x, y in work.edges():
        removed = False
        for side, other in ((x, y), (y, x)):
            candidates = sorted(pds[side] - {other}, key=work.nodes.index)
            # empty set was already tested during skeleton search
            for size in range(1, min(len(candidates), max_cond) + 1):
                for S in itertools.combinations(candidates, size):
                    if ci(x, y, set(S)):
                        work.remove_edge(x, y)
                        sepsets.record(x, y, set(S))
                        removed = True
                        break
                if removed:
                    break
            if removed:
                break
    out = MixedGraph(work.nodes)
    for a, b in work.edges():
        out.add_edge(a, b, CIRCLE, CIRCLE)
    return out, sepsets


# -- orientation -------------------------------------------------------------------


def _orient_endpoint(g: MixedGraph, origin: str, end: str, mark: int) -> bool:
    """Set the mark at `end`'s side of edge (origin, end), but never overwrite
    an already-invariant ARROW/TAIL; returns True when something changed."""
    if g.mark_at(origin, end) == CIRCLE and mark != CIRCLE:
        g.set_mark(origin, end, mark)
        return True
    return False


def _unshielded_triples(g: MixedGraph):
    for z in g.nodes:
        neighbors = g.adjacent_to(z)
        for x, y in itertools.combinations(neighbors, 2):
            if not g.is_adjacent(x, y):
                yield x, z, y


def _orient_colliders(g: MixedGraph, sepsets: SepsetMap, tails: bool = False) -> bool:
    changed = False
    for x, z, y in _unshielded_triples(g):
        sepset = sepsets.get(x, y)
        if sepset is None or z in sepset:
            continue
        changed |= _orient_endpoint(g, x, z, ARROW)
        changed |= _orient_endpoint(g, y, z, ARROW)
        if tails:  # PC convention: full x -> z <- y
            changed |= _orient_endpoint(g, z, x, TAIL)
            changed |= _orient_endpoint(g, z, y, TAIL)
    return changed


def _directed(g: MixedGraph, a: str, b: str) -> bool:
    """a -> b with both endpoint marks invariant."""
    return (
        g.is_adjacent(a, b)
        and g.mark_at(a, b) == ARROW
        and g.mark_at(b, a) == TAIL
    )


def _pd_step(g: MixedGraph, u: str, v: str) -> bool:
    """Edge u-v traversable u to v on a potentially directed path."""
    return g.is_adjacent(u, v) and g.mark_at(v, u) != ARROW and g.mark_at(u, v) != TAIL


def _rule_r1(g: MixedGraph) -> bool:
    changed = False
    for a, b in itertools.permutations(g.nodes, 2):
        if not g.is_adjacent(a, b) or g.mark_at(a, b) != ARROW:
            continue
        for c in g.adjacent_to(b):
            if c == a or g.is_adjacent(a, c):
                continue
            if g.mark_at(c, b) == CIRCLE:  # a *-> b o-* c
                changed |= _orient_endpoint(g, c, b, TAIL)
                changed |= _orient_endpoint(g, b, c, ARROW)
    return changed


def _rule_r2(g: MixedGraph) -> bool:
    changed = False
    for a, c in itertools.permutations(g.nodes, 2):
        if not g.is_adjacent(a, c) or g.mark_at(a, c) != CIRCLE:
            continue
        for b in g.nodes:
            if b in (a, c) or not (g.is_adjacent(a, b) and g.is_adjacent(b, c)):
                continue
            chain1 = _directed(g, a, b) and g.mark_at(b, c) == ARROW
            chain2 = g.mark_at(a, b) == ARROW and _directed(g, b, c)
            if chain1 or chain2:
                changed |= _orient_endpoint(g, a, c, ARROW)
                break
    return changed


def _rule_r3(g: MixedGraph) -> bool:
    changed = False
    for b in g.nodes:
        for d in g.adjacent_to(b):
            if g.mark_at(d, b) != CIRCLE:
                continue
            hit = False
            for a, c in itertools.permutations(g.adjacent_to(b), 2):
                if a in (d,) or c in (d,) or g.is_adjacent(a, c):
                    continue
                if g.mark_at(a, b) != ARROW or g.mark_at(c, b) != ARROW:
                    continue
                if not (g.is_adjacent(a, d) and g.is_adjacent(c, d)):
                    continue
                if g.mark_at(a, d) == CIRCLE and g.mark_at(c, d) == CIRCLE:
                    hit = True
                    break
            if hit:
                changed |= _orient_endpoint(g, d, b, ARROW)
    return changed


def _discriminating_paths(g: MixedGraph, b: str, c: str):
    """Yield (d, a) for discriminating paths <d, ..., a, b, c> for b."""

    def is_parent_of_c(v):
        return _directed(g, v, c)

    def extend(path):
        head = path[-1]
        prev = path[-2]
        for u in g.adjacent_to(head):
            if u in path or u == c:
                continue
            if g.mark_at(u, head) != ARROW:  # head must be a collider on the path
                continue
            if not g.is_adjacent(u, c):
                yield u, path[1]
            elif is_parent_of_c(u) and g.mark_at(head, u) == ARROW:
                yield from extend(path + [u])

    for a in g.adjacent_to(b):
        if a == c or not g.is_adjacent(a, c):
            continue
        if not is_parent_of_c(a):
            continue
        if g.mark_at(b, a) != ARROW:  # collider requirement on the (a, b) edge
            continue
        yield from extend([b, a])


def _rule_r4(g: MixedGraph, sepsets: SepsetMap) -> bool:
    changed = False
    for b, c in itertools.permutations(g.nodes, 2):
        if not g.is_adjacent(b, c) or g.mark_at(c, b) != CIRCLE:
            continue
        for d, a in _discriminating_paths(g, b, c):
            sepset = sepsets.get(d, c)
            if sepset is not None and b in sepset:
                changed |= _orient_endpoint(g, c, b, TAIL)
                changed |= _orient_endpoint(g, b, c, ARROW)
            else:
                changed |= _orient_endpoint(g, b, a, ARROW)
                changed |= _orient_endpoint(g, a, b, ARROW)
                changed |= _orient_endpoint(g, c, b, ARROW)
                changed |= _orient_endpoint(g, b, c, ARROW)
            break
    return changed


def _uncovered_pd_paths(g: MixedGraph, start: str, goal: str):
    """Yield uncovered potentially-directed paths from start to goal (length >= 1)."""

    def extend(path):
        head = path[-1]
        if head == goal:
            yield list(path)
            return
        for nxt in g.adjacent_to(head):
            if nxt in path:
                continue
            if not _pd_step(g, head, nxt):
                continue
            if len(path) >= 2 and g.is_adjacent(path[-2], nxt):
                continue  # covered triple
            yield from extend(path + [nxt])

    yield from extend([start])


def _rule_r8(g: MixedGraph) -> bool:
    changed = False
    for a, c in itertools.permutations(g.nodes, 2):
        if not g.is_adjacent(a, c):
            continue
        if g.mark_at(c, a) != CIRCLE or g.mark_at(a, c) != ARROW:
            continue  # needs a o-> c
        for b in g.nodes:
            if b in (a, c) or not (g.is_adjacent(a, b) and g.is_adjacent(b, c)):
                continue
            first_leg = _directed(g, a, b) or (
                g.mark_at(b, a) == TAIL and g.mark_at(a, b) == CIRCLE
            )
            if first_leg and _directed(g, b, c):
                changed |= _orient_endpoint(g, c, a, TAIL)
                break
    return changed


def _rule_r9(g: MixedGraph) -> bool:
    changed = False
    for a, c in itertools.permutations(g.nodes, 2):
        if not g.is_adjacent(a, c):
            continue
        if g.mark_at(c, a) != CIRCLE or g.mark_at(a, c) != ARROW:
            continue
        found = any(
            len(path) >= 3 and not g.is_adjacent(path[1], c)
            for path in _uncovered_pd_paths(g, a, c)
        )
        if found:
            changed |= _orient_endpoint(g, c, a, TAIL)
    return changed


def _rule_r10(g: MixedGraph) -> bool:
    changed = False
    for a, c in itertools.permutations(g.nodes, 2):
        if not g.is_adjacent(a, c):
            continue
        if g.mark_at(c, a) != CIRCLE or g.mark_at(a, c) != ARROW:
            continue
        into_c = [b for b in g.adjacent_to(c) if b != a and _directed(g, b, c)]
        done = False
        for b, d in itertools.permutations(into_c, 2):
            firsts_b = {p[1] for p in _uncovered_pd_paths(g, a, b)}
            firsts_d = {p[1] for p in _uncovered_pd_paths(g, a, d)}
            for mu in sorted(firsts_b):
                for omega in sorted(firsts_d):
                    if mu != omega and not g.is_adjacent(mu, omega):
                        changed |= _orient_endpoint(g, c, a, TAIL)
                        done = True
                        break
                if done:
                    break
            if done:
                break
    return changed


def orient(g: MixedGraph, sepsets: SepsetMap, complete_rules: bool = False) -> MixedGraph:
    """Collider orientation plus Zhang's R1-R4 to a fixpoint (R8-R10 optional).

    Only CIRCLE endpoints are ever rewritten, which makes the operator
    idempotent and conflict-free on already-oriented input.  R5-R7 are
    omitted: selection bias is assumed absent.
    """
    out = g.copy()
    _orient_colliders(out, sepsets)
    while True:
        changed = _rule_r1(out)
        changed |= _rule_r2(out)
        changed |= _rule_r3(out)
        changed |= _rule_r4(out, sepsets)
        if complete_rules:
            changed |= _rule_r8(out)
            changed |= _rule_r9(out)
            changed |= _rule_r10(out)
        if not changed:
            break
    return out


# -- PC backend: Meek rules on CPDAG convention ---------------------------------------


def _undirected(g: MixedGraph, a: str, b: str) -> bool:
    return g.is_adjacent(a, b) and g.mark_at(a, b) == CIRCLE and g.mark_at(b, a) == CIRCLE


def _orient_directed(g: MixedGraph, a: str, b: str) -> bool:
    changed = _orient_endpoint(g, b, a, TAIL)
    changed |= _orient_endpoint(g, a, b, ARROW)
    return changed


def orient_pc(g: MixedGraph, sepsets: SepsetMap) -> MixedGraph:
    """Collider orientation plus Meek's rules 1-3; R4 never fires without
    background knowledge, so it is omitted."""
    out = g.copy()
    _orient_colliders(out, sepsets, tails=True)
    while True:
        changed = False
        # Meek 1: a -> b - c with a, c nonadjacent
        for a, b in itertools.permutations(out.nodes, 2):
            if not _directed(out, a, b):
                continue
            for c in out.adjacent_to(b):
                if c != a and _undirected(out, b, c) and not out.is_adjacent(a, c):
                    changed |= _orient_directed(out, b, c)
        # Meek 2: a -> b -> c with a - c
        for a, c in itertools.permutations(out.nodes, 2):
            if not _undirected(out, a, c):
                continue
            if any(_directed(out, a, b) and _directed(out, b, c) for b in out.nodes
                   if b not in (a, c)):
                changed |= _orient_directed(out, a, c)
        # Meek 3: a - b with two nonadjacent c, d where a - c -> b and a - d -> b
        for a, b in itertools.permutations(out.nodes, 2):
            if not _undirected(out, a, b):
                continue
            spokes = [
                c for c in out.nodes
                if c not in (a, b) and _undirected(out, a, c) and _directed(out, c, b)
            ]
            if any(
                not out.is_adjacent(c, d)
                for c, d in itertools.combinations(spokes, 2)
            ):
                changed |= _orient_directed(out, a, b)
        if not changed:
            break
    return out


# -- entry point ------------------------------------------------------------------------


def run_fci(data_or_oracle, nodes, config: PipelineConfig | None = None) -> MixedGraph:
    """Full search: skeleton, Possible-D-SEP pruning, orientation.

    `data_or_oracle` is either a StructuredDataset (tested with G² at
    config.alpha) or a callable oracle (x, y, S) -> bool for exact
    independence.  With cd_backend="pc" the pruning phase is skipped and
    marks follow CPDAG convention.
    """
    config = config or PipelineConfig()
    if isinstance(data_or_oracle, StructuredDataset):
        ci = make_gsquared_oracle(data_or_oracle, config.alpha)
    elif callable(data_or_oracle):
        ci = data_or_oracle
    else:
        raise TypeError("expected a StructuredDataset or an oracle callable")
    skeleton, sepsets = skeleton_search(ci, nodes, config.max_cond)
    if config.cd_backend == "pc":
        return orient_pc(skeleton, sepsets)
    pruned, sepsets = possible_dsep_prune(skeleton, sepsets, ci, config.max_cond)
    return orient(pruned, sepsets, complete_rules=config.complete_rules)
