"""Synthetic ternary structural causal models with stored exogenous noise.

Every sample keeps the exact noise draws that produced it, so counterfactuals
follow the abduction / action / prediction recipe exactly: re-run the
mechanisms with the stored draws while holding the intervened factor fixed.
Non-descendants of the intervention are then bitwise unchanged.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, field

import numpy as np

from .embed import mock_embed
from .graph import ARROW, TAIL, MixedGraph
from .types import CHANNEL_OF, VERBAL, VISUAL, FactorSet, FactorSpec, Provenance, Sample, StructuredDataset

DEFAULT_THRESHOLDS = (-0.5, 0.5)


def quantize(z: float, lo: float = DEFAULT_THRESHOLDS[0], hi: float = DEFAULT_THRESHOLDS[1]) -> int:
    """Collapse a real activation to {-1, 0, +1} using a dead band [lo, hi]."""
    if z < lo:
        return -1
    if z > hi:
        return 1
    return 0


@dataclass(frozen=True)
class ExogenousRecord:
    """Noise draws behind one sample: (u_value, u_flip) per node plus target noise."""

    sample_id: str
    draws: dict  # node -> (u_value, u_flip)
    target_noise: float

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "draws": {k: [float(a), float(b)] for k, (a, b) in self.draws.items()},
            "target_noise": float(self.target_noise),
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "ExogenousRecord":
        draws = {k: (float(a), float(b)) for k, (a, b) in rec["draws"].items()}
        return cls(rec["sample_id"], draws, float(rec["target_noise"]))


@dataclass
class SCMSpec:
    """A ternary SCM over tagged factors plus a real-valued target."""

    factor_set: FactorSet
    modalities: dict  # factor name -> VERBAL | VISUAL
    dag: MixedGraph  # over factor names only
    weights: dict  # (parent, child) -> float
    noise_probs: dict = field(default_factory=dict)  # node -> flip probability
    thresholds: dict = field(default_factory=dict)  # node -> (lo, hi)
    target_weights: dict = field(default_factory=dict)  # node -> float
    target_noise_sd: float = 0.0
    # Optional quantization of the raw weighted sum onto a discrete scale, so
    # the target column stays categorical for contingency-based CI tests
    # (ratings and diagnoses are discrete; the raw combination is not).
    target_thresholds: tuple | None = None
    text_template: str = "{phrases}"

    def __post_init__(self):
        names = set(self.factor_set.names)
        if set(self.dag.nodes) != names:
            raise ValueError("dag nodes must equal factor names")
        self.dag.validate_dag()
        if set(self.modalities) != names:
            raise ValueError("every factor needs a modality tag")
        bad = set(self.modalities.values()) - {VERBAL, VISUAL}
        if bad:
            raise ValueError(f"unknown modality tags: {sorted(bad)}")
        for (parent, child), w in self.weights.items():
            if child not in set(self.dag.children(parent)):
                raise ValueError(f"weight {parent}->{child} has no matching dag edge")
        for parent, child in ((a, b) for a in self.dag.nodes for b in self.dag.children(a)):
            if (parent, child) not in self.weights:
                raise ValueError(f"dag edge {parent}->{child} missing a weight")
        for node, p in self.noise_probs.items():
            if node not in names or not (0.0 <= p < 1.0):
                raise ValueError(f"bad noise prob for {node!r}")
        for node, (lo, hi) in self.thresholds.items():
            if node not in names or not lo < hi:
                raise ValueError(f"bad thresholds for {node!r}")
        for node in self.target_weights:
            if node not in names:
                raise ValueError(f"target weight for unknown factor {node!r}")
        if self.target_noise_sd < 0:
            raise ValueError("target_noise_sd must be >= 0")
        if self.target_thresholds is not None:
            lo, hi = self.target_thresholds
            if lo > hi:
                raise ValueError("target_thresholds must satisfy lo <= hi")

    # -- convenience -------------------------------------------------------

    def noise_prob(self, node: str) -> float:
        return self.noise_probs.get(node, 0.0)

    def thresholds_of(self, node: str) -> tuple[float, float]:
        return tuple(self.thresholds.get(node, DEFAULT_THRESHOLDS))

    def factors_of(self, modality: str) -> list[FactorSpec]:
        return [f for f in self.factor_set if self.modalities[f.name] == modality]

    def modality_values(self, values: dict, modality: str) -> list[int]:
        return [int(values[f.name]) for f in self.factors_of(modality)]

    def full_graph(self) -> MixedGraph:
        """DAG over factors plus the target, with an edge per nonzero target weight."""
        target = self.factor_set.target_name
        g = MixedGraph(list(self.dag.nodes) + [target])
        for a, b in self.dag.edges():
            g.add_edge(a, b, self.dag.mark_at(b, a), self.dag.mark_at(a, b))
        for node, w in self.target_weights.items():
            if w != 0.0:
                g.add_edge(node, target, TAIL, ARROW)
        return g

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "factors": [
                {
                    "name": f.name,
                    "description": f.description,
                    "criterion_pos": f.criterion_pos,
                    "criterion_neu": f.criterion_neu,
                    "criterion_neg": f.criterion_neg,
                    "modality": self.modalities[f.name],
                }
                for f in self.factor_set
            ],
            "target_name": self.factor_set.target_name,
            "edges": [[a, b] for a in self.dag.nodes for b in self.dag.children(a)],
            "weights": {f"{a}->{b}": w for (a, b), w in sorted(self.weights.items())},
            "noise_probs": dict(sorted(self.noise_probs.items())),
            "thresholds": {k: list(v) for k, v in sorted(self.thresholds.items())},
            "target_weights": dict(sorted(self.target_weights.items())),
            "target_noise_sd": self.target_noise_sd,
            "target_thresholds": list(self.target_thresholds) if self.target_thresholds else None,
            "text_template": self.text_template,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SCMSpec":
        factors = tuple(
            FactorSpec(
                f["name"], f["description"], f["criterion_pos"], f["criterion_neu"], f["criterion_neg"]
            )
            for f in data["factors"]
        )
        factor_set = FactorSet(factors, data["target_name"])
        modalities = {f["name"]: f["modality"] for f in data["factors"]}
        dag = MixedGraph.from_dag_edges([f.name for f in factors], data["edges"])
        weights = {}
        for key, w in data["weights"].items():
            parent, child = key.split("->")
            weights[(parent, child)] = float(w)
        return cls(
            factor_set=factor_set,
            modalities=modalities,
            dag=dag,
            weights=weights,
            noise_probs={k: float(v) for k, v in data.get("noise_probs", {}).items()},
            thresholds={k: (float(v[0]), float(v[1])) for k, v in data.get("thresholds", {}).items()},
            target_weights={k: float(v) for k, v in data.get("target_weights", {}).items()},
            target_noise_sd=float(data.get("target_noise_sd", 0.0)),
            target_thresholds=tuple(data["target_thresholds"]) if data.get("target_thresholds") else None,
            text_template=data.get("text_template", "{phrases}"),
        )


# -- mechanisms ----------------------------------------------------------------


def _node_value(scm: SCMSpec, node: str, parent_values: dict, u_value: float, u_flip: float) -> int:
    parents = scm.dag.parents(node)
    if not parents:
        value = int(u_value * 3) - 1  # uniform over {-1, 0, +1}
    else:
        total = sum(scm.weights[(p, node)] * parent_values[p] for p in parents)
        total += u_value - 0.5  # small exogenous dither, uniform on (-0.5, 0.5)
        value = quantize(total, *scm.thresholds_of(node))
    p = scm.noise_prob(node)
    if p > 0.0 and u_flip < p:
        others = sorted(set((-1, 0, 1)) - {value})
        value = others[int((u_flip / p) * 2) % 2]
    return value


def _evaluate(scm: SCMSpec, record: ExogenousRecord, do: dict | None = None) -> tuple[dict, float]:
    """Run all mechanisms with stored draws, forcing any do() assignments."""
    do = do or {}
    values: dict = {}
    for node in scm.dag.topological_order():
        if node in do:
            values[node] = int(do[node])
            continue
        u_value, u_flip = record.draws[node]
        values[node] = _node_value(scm, node, values, u_value, u_flip)
    y = sum(scm.target_weights.get(n, 0.0) * values[n] for n in scm.dag.nodes)
    y += scm.target_noise_sd * record.target_noise
    if scm.target_thresholds is not None:
        y = quantize(y, *scm.target_thresholds)
    return values, float(y)


def draw_record(scm: SCMSpec, sample_id: str, seed: int, index: int) -> ExogenousRecord:
    """Noise draws for one sample, derived only from (seed, index)."""
    rng = np.random.default_rng([seed, index])
    draws = {}
    for node in scm.dag.topological_order():
        draws[node] = (float(rng.random()), float(rng.random()))
    return ExogenousRecord(sample_id, draws, float(rng.standard_normal()))


def generate_row(scm: SCMSpec, seed: int, index: int, sample_id: str | None = None):
    """One structured row: (record, values dict, target)."""
    sid = sample_id if sample_id is not None else f"s{index:04d}"
    record = draw_record(scm, sid, seed, index)
    values, y = _evaluate(scm, record)
    return record, values, y


def scm_counterfactual(scm: SCMSpec, record: ExogenousRecord, factor: str, value: int):
    """Abduction / action / prediction: replay stored noise under do(factor := value)."""
    if factor not in scm.dag:
        raise KeyError(factor)
    if value not in (-1, 0, 1):
        raise ValueError(f"do() value must be ternary, got {value}")
    return _evaluate(scm, record, do={factor: value})


# -- rendering and packaging -----------------------------------------------------


def render_text_payload(values, factors, template: str = "{phrases}") -> str:
    """Compose a text payload from criterion phrases of nonzero factors.

    `values` aligns with `factors`.  The template may reference `{phrases}`
    (all nonzero phrases, declared order) or individual `{factor name}`
    slots; unknown placeholders raise.
    """
    import re as _re

    by_name = {}
    phrases = []
    for f, v in zip(factors, values):
        phrase = f.criterion_for(v) if v != 0 else ""
        by_name[f.name] = phrase
        if phrase:
            phrases.append(phrase)
    joined = "; ".join(phrases) if phrases else "nothing notable mentioned"

    def repl(match):
        token = match.group(1)
        if token == "phrases":
            return joined
        for name, phrase in by_name.items():
            if name.casefold() == token.casefold():
                return phrase
        raise ValueError(f"template placeholder {{{token}}} names no factor")

    return _re.sub(r"\{([^{}]+)\}", repl, template)


def build_sample(scm: SCMSpec, sample_id: str, values: dict, target: float,
                 embedding_dim: int, provenance: Provenance | None = None) -> Sample:
    verbal = scm.factors_of(VERBAL)
    visual = scm.factors_of(VISUAL)
    payloads, embeddings = {}, {}
    if verbal:
        vvals = scm.modality_values(values, VERBAL)
        payloads[CHANNEL_OF[VERBAL]] = render_text_payload(vvals, verbal, scm.text_template)
        embeddings[CHANNEL_OF[VERBAL]] = mock_embed(vvals, CHANNEL_OF[VERBAL], embedding_dim)
    if visual:
        ivals = scm.modality_values(values, VISUAL)
        payloads[CHANNEL_OF[VISUAL]] = f"image:{sample_id}"
        embeddings[CHANNEL_OF[VISUAL]] = mock_embed(ivals, CHANNEL_OF[VISUAL], embedding_dim)
    return Sample(sample_id, payloads, embeddings, target, provenance or Provenance.observational())


def sample_dataset(scm: SCMSpec, n: int, seed: int, embedding_dim: int = 8):
    """Generate n samples; returns (structured, samples, noise_records).

    Byte-identical across runs for fixed (scm, n, seed): every draw derives
    from a fresh numpy generator keyed by (seed, index), so rows depend only
    on their own index and disjoint index ranges may be filled in parallel.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    samples: list[Sample] = []
    structured = StructuredDataset(scm.factor_set)
    noise: dict[str, ExogenousRecord] = {}
    for index in range(n):
        record, values, y = generate_row(scm, seed, index)
        sid = record.sample_id
        samples.append(build_sample(scm, sid, values, y, embedding_dim))
        structured.add_row(sid, [values[f] for f in scm.factor_set.names], y)
        noise[sid] = record
    return structured, samples, noise


# -- d-separation -----------------------------------------------------------------


def d_separated(dag: MixedGraph, x: str, y: str, given=()) -> bool:
    """Exact d-separation on a DAG via reachability (Bayes-ball style).

    Preconditions: dag is tail/arrow oriented and acyclic; x != y and
    neither lies in the conditioning set.
    """
    dag.validate_dag()
    z = set(given)
    if x == y or x in z or y in z:
        raise ValueError("x, y must be distinct and disjoint from the conditioning set")
    for node in (x, y, *z):
        if node not in dag:
            raise KeyError(node)

    # ancestors of the conditioning set (inclusive), for collider opening
    anz = set(z)
    stack = list(z)
    while stack:
        v = stack.pop()
        for p in dag.parents(v):
            if p not in anz:
                anz.add(p)
                stack.append(p)

    # states: (node, "up") reached while moving to parents, (node, "down") to children
    visited = set()
    stack = [(x, "up")]
    while stack:
        node, direction = stack.pop()
        if (node, direction) in visited:
            continue
        visited.add((node, direction))
        if node == y:
            return False
        if direction == "up" and node not in z:
            for p in dag.parents(node):
                stack.append((p, "up"))
            for c in dag.children(node):
                stack.append((c, "down"))
        elif direction == "down":
            if node not in z:
                for c in dag.children(node):
                    stack.append((c, "down"))
            if node in anz:
                for p in dag.parents(node):
                    stack.append((p, "up"))
    return True


# -- bundled scenarios -------------------------------------------------------------


def _load_topology(resource: str) -> dict:
    ref = importlib.resources.files("mmcausal.templates").joinpath(resource)
    return json.loads(ref.read_text(encoding="utf-8"))


def _scenario(factors, target_name, topology, text_template) -> SCMSpec:
    factor_set = FactorSet(tuple(f for f, _ in factors), target_name)
    modalities = {f.name: m for f, m in factors}
    dag = MixedGraph.from_dag_edges([f.name for f, _ in factors], topology["edges"])
    weights = {}
    for key, w in topology["weights"].items():
        a, b = key.split("->")
        weights[(a, b)] = float(w)
    return SCMSpec(
        factor_set=factor_set,
        modalities=modalities,
        dag=dag,
        weights=weights,
        noise_probs={k: float(v) for k, v in topology.get("noise_probs", {}).items()},
        thresholds={k: tuple(v) for k, v in topology.get("thresholds", {}).items()},
        target_weights={k: float(v) for k, v in topology["target_weights"].items()},
        target_noise_sd=float(topology.get("target_noise_sd", 0.0)),
        target_thresholds=tuple(topology["target_thresholds"]) if topology.get("target_thresholds") else None,
        text_template=text_template,
    )


def mag_default_spec() -> SCMSpec:
    """Apple-review scenario: 3 visual and 5 verbal factors scoring an apple.

    The edge set comes from templates/mag_topology.json, a documented
    placeholder structure chosen to exercise discovery, not a claim about
    any real-world system.
    """
    neu = "Otherwise; or not mentioned"
    factors = [
        (FactorSpec("color", "surface color of the apple",
                    "bright red (positive)", neu, "greenish"), VISUAL),
        (FactorSpec("size", "apparent size of the apple",
                    "large", neu, "small"), VISUAL),
        (FactorSpec("defects", "skin blemishes or damage",
                    "free of defects", neu, "with noticeable defects"), VISUAL),
        (FactorSpec("aroma", "smell described in the review",
                    "strong", neu, "musty or rotten"), VERBAL),
        (FactorSpec("taste", "flavor described in the review",
                    "sweet", neu, "sour"), VERBAL),
        (FactorSpec("juiciness", "moisture content described in the review",
                    "abundant and refreshing moisture", neu, "dry and lacking moisture"), VERBAL),
        (FactorSpec("nutrition", "nutritional value described in the review",
                    "highly nutritious with essential nutrients", neu,
                    "relatively low in nutritional value"), VERBAL),
        (FactorSpec("recmd", "reviewer recommendation and market outlook",
                    "has significant market potential and deserves wider recognition", neu,
                    "might not bring the expected returns and could even lead to losses"), VERBAL),
    ]
    return _scenario(factors, "score", _load_topology("mag_topology.json"),
                     "Apple review: {phrases}.")


def lung_default_spec() -> SCMSpec:
    """Clinical-note scenario: three verbal factors plus one visual finding."""
    neu = "Otherwise; or not mentioned"
    factors = [
        (FactorSpec("gender", "patient gender as recorded",
                    "male", neu, "female"), VERBAL),
        (FactorSpec("age", "patient age bracket",
                    "over sixty years old", neu, "under forty years old"), VERBAL),
        (FactorSpec("smoking", "smoking history in the note",
                    "long-term smoker", neu, "never smoked"), VERBAL),
        (FactorSpec("lesion", "lesion visible in the scan",
                    "a clearly visible lesion", neu, "no visible lesion"), VISUAL),
    ]
    return _scenario(factors, "diagnosis", _load_topology("lung_topology.json"),
                     "Clinical note: {phrases}.")
