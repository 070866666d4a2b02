"""Factor-identification and structure metrics.

Discovered factors are aligned to ground truth by normalized name plus an
alias map (mechanizing what would otherwise be a manual alignment step),
then node precision/recall, adjacency precision/recall, and an extended
structural Hamming distance are computed over the aligned graphs.  True
DAGs are compared through their faithful PAG, the best any conditional
independence method can recover.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .fci import run_fci
from .graph import MixedGraph
from .synth import d_separated
from .types import FactorSet, FactorSpec, PipelineConfig


def _match_key(name: str) -> str:
    """Casefold and collapse whitespace and punctuation for name alignment."""
    return re.sub(r"[^0-9a-z]+", " ", name.casefold()).strip()


def _harmonic(a: float, b: float) -> float:
    return 2.0 * a * b / (a + b) if a + b > 0 else 0.0


@dataclass(frozen=True)
class FactorMatch:
    """Injective alignment of discovered factor names onto truth names."""

    mapping: dict
    unmatched_discovered: frozenset
    unmatched_truth: frozenset

    def __post_init__(self):
        object.__setattr__(self, "mapping", dict(self.mapping))
        object.__setattr__(self, "unmatched_discovered", frozenset(self.unmatched_discovered))
        object.__setattr__(self, "unmatched_truth", frozenset(self.unmatched_truth))
        targets = list(self.mapping.values())
        if len(set(targets)) != len(targets):
            raise ValueError("match mapping must be injective")
        if set(self.mapping) & self.unmatched_discovered:
            raise ValueError("a discovered name is both matched and unmatched")
        if set(targets) & self.unmatched_truth:
            raise ValueError("a truth name is both matched and unmatched")


def match_factors(discovered: FactorSet, truth: FactorSet, aliases=None) -> FactorMatch:
    """Align discovered factors to truth by normalized name or alias.

    `aliases` maps a truth factor name to alternative spellings.  Matching is
    case-insensitive with whitespace and punctuation collapsed; the first
    unused discovered factor wins, scanning truth factors in truth order.
    """
    aliases = aliases or {}
    truth_keys = {_match_key(t.name) for t in truth}
    for name in aliases:
        if _match_key(name) not in truth_keys:
            raise ValueError(f"alias entry for unknown truth factor {name!r}")
    accepted = {}
    for t in truth:
        keys = {_match_key(t.name)}
        for alias_owner, names in aliases.items():
            if _match_key(alias_owner) == _match_key(t.name):
                keys.update(_match_key(a) for a in names)
        accepted[t.name] = keys
    mapping = {}
    used = set()
    for t in truth:
        for d in discovered:
            if d.name not in used and _match_key(d.name) in accepted[t.name]:
                mapping[d.name] = t.name
                used.add(d.name)
                break
    return FactorMatch(
        mapping,
        frozenset(d.name for d in discovered if d.name not in mapping),
        frozenset(t.name for t in truth if t.name not in set(mapping.values())),
    )


def node_metrics(match: FactorMatch, n_discovered: int, n_truth: int):
    """(precision, recall, F1) of factor identification, target excluded."""
    m = len(match.mapping)
    precision = m / n_discovered if n_discovered else 0.0
    recall = m / n_truth if n_truth else 0.0
    return precision, recall, _harmonic(precision, recall)


def _lone_extra(nodes, known: set) -> str:
    extra = [n for n in nodes if n not in known]
    if len(extra) != 1:
        raise ValueError(f"expected exactly one target node, found {extra}")
    return extra[0]


def adjacency_metrics(g: MixedGraph, g_true: MixedGraph, match: FactorMatch):
    """(precision, recall, F1) of skeleton edges over matched nodes plus target.

    Orientation errors are deliberately ignored here; they show up in the
    extended structural distance instead.
    """
    y_d = _lone_extra(g.nodes, set(match.mapping) | set(match.unmatched_discovered))
    y_t = _lone_extra(g_true.nodes, set(match.mapping.values()) | set(match.unmatched_truth))
    rename = dict(match.mapping)
    rename[y_d] = y_t
    keep_d = set(rename)
    edges = {frozenset((rename[a], rename[b]))
             for a, b in g.edges() if a in keep_d and b in keep_d}
    keep_t = set(match.mapping.values()) | {y_t}
    edges_true = {frozenset((a, b))
                  for a, b in g_true.edges() if a in keep_t and b in keep_t}
    hits = len(edges & edges_true)
    precision = hits / len(edges) if edges else 0.0
    recall = hits / len(edges_true) if edges_true else 0.0
    return precision, recall, _harmonic(precision, recall)


def shd(g: MixedGraph, g_true: MixedGraph, match: FactorMatch) -> int:
    """Structural distance over matched nodes plus target.

    One point per adjacency present in exactly one graph, one point per
    shared adjacency whose endpoint marks are not both equal.
    """
    y_d = _lone_extra(g.nodes, set(match.mapping) | set(match.unmatched_discovered))
    y_t = _lone_extra(g_true.nodes, set(match.mapping.values()) | set(match.unmatched_truth))
    rename = dict(match.mapping)
    rename[y_d] = y_t
    kept = [n for n in g.nodes if n in rename]
    total = 0
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            du, dv = kept[i], kept[j]
            tu, tv = rename[du], rename[dv]
            adj_d = g.is_adjacent(du, dv)
            adj_t = g_true.is_adjacent(tu, tv)
            if adj_d != adj_t:
                total += 1
            elif adj_d and (g.mark_at(du, dv) != g_true.mark_at(tu, tv)
                            or g.mark_at(dv, du) != g_true.mark_at(tv, tu)):
                total += 1
    return total


def eshd(g: MixedGraph, nodes_discovered, g_true: MixedGraph, nodes_truth,
         match: FactorMatch) -> int:
    """Extended structural distance: shd plus node and edge penalties.

    Every unmatched node on either side costs 1 plus its incident edges in
    its own graph, with each edge counted once even when both of its
    endpoints are unmatched.
    """
    missing = set(match.unmatched_truth)
    if missing - set(nodes_truth):
        raise ValueError("match references truth nodes outside nodes_truth")
    spurious = set(match.unmatched_discovered)
    if spurious - set(nodes_discovered):
        raise ValueError("match references discovered nodes outside nodes_discovered")
    structural = shd(g, g_true, match)
    miss_term = len(missing) + sum(
        1 for a, b in g_true.edges() if a in missing or b in missing)
    spur_term = len(spurious) + sum(
        1 for a, b in g.edges() if a in spurious or b in spurious)
    return structural + miss_term + spur_term


@dataclass(frozen=True)
class MetricsBundle:
    """Node, adjacency, and structural scores for one discovered graph."""

    np: float
    nr: float
    nf: float
    ap: float
    ar: float
    af: float
    shd: int
    eshd: int

    FIELDS = ("np", "nr", "nf", "ap", "ar", "af", "shd", "eshd")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


def faithful_pag(dag: MixedGraph, complete_rules: bool = False) -> MixedGraph:
    """The PAG an exact independence oracle would recover from this DAG.

    Defaults to the same orientation rule set as the discovery pipeline so
    mark comparisons are apples to apples.
    """
    dag.validate_dag()
    config = PipelineConfig(max_cond=max(len(dag.nodes) - 2, 0),
                            complete_rules=complete_rules)
    oracle = lambda x, y, S: d_separated(dag, x, y, S)
    return run_fci(oracle, list(dag.nodes), config)


@dataclass
class GroundTruth:
    """True factors, their aliases, and the true DAG over factors plus target."""

    factor_set: FactorSet
    graph: MixedGraph
    aliases: dict = field(default_factory=dict)
    _pag_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        expected = set(self.factor_set.names) | {self.factor_set.target_name}
        if set(self.graph.nodes) != expected:
            raise ValueError("truth graph nodes must be the factors plus the target")

    def faithful_pag(self, complete_rules: bool = False) -> MixedGraph:
        if complete_rules not in self._pag_cache:
            self._pag_cache[complete_rules] = faithful_pag(self.graph, complete_rules)
        return self._pag_cache[complete_rules]

    @classmethod
    def from_scm(cls, scm, aliases=None) -> "GroundTruth":
        return cls(scm.factor_set, scm.full_graph(), aliases or {})

    def to_dict(self) -> dict:
        return {
            "factors": [
                {"name": f.name, "description": f.description,
                 "criterion_pos": f.criterion_pos, "criterion_neu": f.criterion_neu,
                 "criterion_neg": f.criterion_neg}
                for f in self.factor_set
            ],
            "target": self.factor_set.target_name,
            "aliases": {k: list(v) for k, v in sorted(self.aliases.items())},
            "graph": {"nodes": list(self.graph.nodes), "marks": self.graph.marks.tolist()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        factors = tuple(
            FactorSpec(f["name"], f.get("description", ""),
                       f["criterion_pos"], f["criterion_neu"], f["criterion_neg"])
            for f in data["factors"]
        )
        graph = MixedGraph(data["graph"]["nodes"], data["graph"]["marks"])
        return cls(FactorSet(factors, data["target"]), graph,
                   {k: list(v) for k, v in data.get("aliases", {}).items()})

    @classmethod
    def from_file(cls, path) -> "GroundTruth":
        import json

        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def evaluate_run(factors: FactorSet, graph: MixedGraph, truth: GroundTruth,
                 complete_rules: bool = False) -> MetricsBundle:
    """All metrics for one discovered (factors, graph) pair against truth."""
    match = match_factors(factors, truth.factor_set, truth.aliases)
    precision, recall, f1 = node_metrics(match, len(factors), len(truth.factor_set))
    truth_pag = truth.faithful_pag(complete_rules)
    ap, ar, af = adjacency_metrics(graph, truth_pag, match)
    s = shd(graph, truth_pag, match)
    e = eshd(graph, list(factors.names), truth_pag, list(truth.factor_set.names), match)
    return MetricsBundle(np=precision, nr=recall, nf=f1, ap=ap, ar=ar, af=af,
                         shd=s, eshd=e)
