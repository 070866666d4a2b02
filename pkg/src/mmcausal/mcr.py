"""Counterfactual reasoning loop: validation gates, dataset augmentation,
and the iterative discovery driver.

Each iteration proposes and consolidates factors from contrastive pairs,
annotates the current dataset, runs constraint-based structure discovery,
and asks the oracle for counterfactuals of factors still touching an
ambiguous (circle-marked) edge.  Counterfactuals that pass both a semantic
similarity gate and a causal consistency gate are appended to the dataset
for the next round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .embed import safe_similarity, select_inter_pairs, select_intra_pairs
from .fci import run_fci
from .graph import MixedGraph, possible_descendants
from .oracle import RecordingImageProvider, counterfactual_id
from .storage import canonical_json, write_json, write_structured_csv
from .types import (
    CHANNEL_OF,
    FactorSet,
    PipelineConfig,
    Provenance,
    Sample,
    StructuredDataset,
    normalize_name,
)


def semantic_gate(orig: Sample, cf: Sample, tau_sem: float) -> tuple[float, bool]:
    """Mean per-channel cosine similarity between a counterfactual and its parent.

    Passes when the mean is >= tau_sem (boundary inclusive).  Raises when the
    two samples do not carry the same embedding channels.
    """
    if set(orig.embeddings) != set(cf.embeddings):
        raise ValueError(
            f"modality mismatch: {sorted(orig.embeddings)} vs {sorted(cf.embeddings)}")
    if not orig.embeddings:
        raise ValueError("samples carry no embeddings")
    sims = [safe_similarity(orig.embeddings[m], cf.embeddings[m])
            for m in sorted(orig.embeddings)]
    mean = float(np.mean(sims))
    return mean, mean >= tau_sem


def causal_gate(factual, cf, intervened: str, g: MixedGraph, epsilon: float,
                tau_causal: float, names=None) -> tuple[float, bool]:
    """Fraction of non-descendant factors that moved under the intervention.

    `names` aligns the two value vectors with graph nodes and defaults to
    g.nodes.  The target variable never appears among factor names, which is
    what excludes it from the check.  Non-descendants are the complement of
    possible_descendants(g, intervened) in the current (partially oriented)
    graph.  An empty non-descendant set yields ratio 0, a vacuous pass.
    Passes when ratio <= tau_causal (boundary inclusive).

    With ternary values any change is >= 1, far above the default epsilon;
    the threshold is kept for future continuous factors rather than dropped.
    """
    if intervened not in g:
        raise KeyError(f"factor {intervened!r} not in graph")
    names = list(names) if names is not None else list(g.nodes)
    missing = [n for n in names if n not in g]
    if missing:
        raise KeyError(f"factor names not in graph: {missing}")
    a = np.asarray(factual, dtype=float)
    b = np.asarray(cf, dtype=float)
    if a.shape != b.shape or a.shape != (len(names),):
        raise ValueError(f"value vectors must both have length {len(names)}")
    desc = possible_descendants(g, intervened)
    idx = [i for i, n in enumerate(names) if n not in desc]
    if not idx:
        return 0.0, True
    changed = int(np.sum(np.abs(a[idx] - b[idx]) >= epsilon))
    ratio = changed / len(idx)
    return ratio, ratio <= tau_causal


def select_intervention_targets(g: MixedGraph, target: str) -> list[str]:
    """Factors incident to a circle-marked edge, in node order; the target
    variable itself is never selected for intervention."""
    if target not in g:
        raise KeyError(f"target {target!r} not in graph")
    touched = set()
    for a, b in g.ambiguous_edges():
        touched.add(a)
        touched.add(b)
    return [n for n in g.nodes if n in touched and n != target]


@dataclass(frozen=True)
class ValidationReport:
    """Gate outcomes for one counterfactual candidate."""

    candidate: object
    mean_similarity: float
    sem_pass: bool
    indep_ratio: float
    causal_pass: bool
    error: str | None = None

    @property
    def accepted(self) -> bool:
        return self.sem_pass and self.causal_pass


class SliceEmbedder:
    """Embeds counterfactual values channel-wise via per-factor channel tags.

    A channel's vector is the candidate's values restricted to that channel's
    factors, kept in factor order.  This mirrors how observational samples
    were embedded from per-modality value slices, so parent and counterfactual
    embeddings stay directly comparable.  Factors absent from the map
    contribute to no channel.
    """

    def __init__(self, provider, channel_of: dict[str, str]):
        self.provider = provider
        self.channel_of = {normalize_name(k): v for k, v in channel_of.items()}

    @classmethod
    def for_scm(cls, scm, provider) -> "SliceEmbedder":
        return cls(provider, {name: CHANNEL_OF[m] for name, m in scm.modalities.items()})

    def embed_candidate(self, parent: Sample, values, names) -> dict[str, np.ndarray]:
        out = {}
        for channel in parent.modalities:
            sliced = [v for v, n in zip(values, names)
                      if self.channel_of.get(normalize_name(n)) == channel]
            out[channel] = self.provider.embed_values(sliced, channel)
        return out


def validate_and_augment(samples, structured: StructuredDataset, candidates,
                         g: MixedGraph, config: PipelineConfig, embedder,
                         image_provider=None):
    """Gate candidates and append the accepted ones as counterfactual samples.

    Returns (samples, structured, reports) as fresh objects; the inputs are
    never mutated.  Accepted candidates become counterfactual-provenance
    samples whose ids encode parent, factor, and flip direction; a candidate
    whose id is already present (same intervention proposed again in a later
    round) is skipped silently.  An embedding failure rejects the candidate
    and records the error on its report.
    """
    image_provider = image_provider if image_provider is not None else RecordingImageProvider()
    lookup = {s.id: s for s in samples}
    names = list(structured.factor_set.names)
    out_samples = list(samples)
    out_structured = structured.copy()
    reports = []
    for cand in candidates:
        parent = lookup.get(cand.parent_id)
        if parent is None:
            raise KeyError(f"candidate parent {cand.parent_id!r} not in dataset")
        if len(cand.values) != len(names):
            raise ValueError(
                f"candidate for {cand.parent_id!r}: expected {len(names)} values")
        cid = counterfactual_id(cand.parent_id, cand.intervened_factor, cand.intervened_value)
        if cid in out_structured:
            continue
        try:
            embeddings = embedder.embed_candidate(parent, cand.values, names)
        except Exception as err:  # any encoder failure rejects this candidate only
            reports.append(ValidationReport(cand, 0.0, False, 1.0, False, error=str(err)))
            continue
        payloads = {}
        for channel in parent.modalities:
            if channel in cand.text_payloads:
                payloads[channel] = cand.text_payloads[channel]
            elif channel in cand.image_instructions:
                payloads[channel] = image_provider.apply_instruction(
                    parent.payloads[channel], cand.image_instructions[channel])
            else:
                payloads[channel] = parent.payloads[channel]
        target = cand.target if cand.target is not None else parent.target
        cf = Sample(cid, payloads, embeddings, target,
                    Provenance.counterfactual(cand.parent_id, cand.intervened_factor))
        mean_sim, sem_ok = semantic_gate(parent, cf, config.tau_sem)
        ratio, causal_ok = causal_gate(
            out_structured.rows[cand.parent_id], cand.values, cand.intervened_factor,
            g, config.epsilon, config.tau_causal, names=names)
        reports.append(ValidationReport(cand, mean_sim, sem_ok, ratio, causal_ok))
        if sem_ok and causal_ok:
            out_samples.append(cf)
            out_structured.add_row(cid, cand.values, target)
    return out_samples, out_structured, reports


def _gate_stats(reports) -> dict:
    # rejected candidates are bucketed by the first gate that failed them
    return {
        "proposed": len(reports),
        "accepted": sum(r.accepted for r in reports),
        "rejected_semantic": sum(not r.sem_pass and r.error is None for r in reports),
        "rejected_causal": sum(r.sem_pass and not r.causal_pass for r in reports),
        "embed_failures": sum(r.error is not None for r in reports),
    }


@dataclass
class IterationRecord:
    """Everything one pipeline iteration leaves behind for the audit trail."""

    index: int
    factor_names: list
    n_observational: int
    n_counterfactual: int
    graph: MixedGraph
    intervention_targets: list
    gate: dict
    metrics: dict | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "factors": list(self.factor_names),
            "sizes": {"observational": self.n_observational,
                      "counterfactual": self.n_counterfactual},
            "graph": {"nodes": list(self.graph.nodes), "marks": self.graph.marks.tolist()},
            "circle_count": self.graph.circle_count(),
            "ambiguous_edges": [list(e) for e in self.graph.ambiguous_edges()],
            "intervention_targets": list(self.intervention_targets),
            "gate": dict(self.gate),
            "metrics": self.metrics,
        }


@dataclass
class RunReport:
    """Audit trail of a discovery run.

    The canonical serialization is timestamp-free so reruns with the same
    configuration and seed produce byte-identical files; wall-clock metadata
    goes into a sidecar next to the report instead.
    """

    config: dict
    seed: int
    iterations: list = field(default_factory=list)
    status: str = "completed"
    stop_reason: str | None = None
    error: str | None = None

    @property
    def final_graph(self) -> MixedGraph | None:
        return self.iterations[-1].graph if self.iterations else None

    def to_dict(self) -> dict:
        return {
            "config": dict(self.config),
            "seed": self.seed,
            "status": self.status,
            "stop_reason": self.stop_reason,
            "error": self.error,
            "iterations": [it.to_dict() for it in self.iterations],
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def save(self, path) -> None:
        """Write the canonical report plus a `.meta.json` timestamp sidecar."""
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        meta = {"written_at": datetime.now(timezone.utc).isoformat(),
                "format": "run-report/1"}
        write_json(path.with_suffix(".meta.json"), meta)


def _write_iteration(run_path: Path, t: int, graph: MixedGraph,
                     structured: StructuredDataset) -> None:
    d = run_path / f"iter-{t:02d}"
    d.mkdir(exist_ok=True)
    graph.save(d / "graph.json")
    write_structured_csv(d / "structured.csv", structured)


def _metrics_dict(factors: FactorSet, graph: MixedGraph, ground_truth):
    if ground_truth is None:
        return None
    from .eval import evaluate_run

    return evaluate_run(factors, graph, ground_truth).to_dict()


def run_pipeline(samples, config: PipelineConfig, oracle, embedder,
                 target_name: str = "score", ground_truth=None,
                 run_dir=None) -> RunReport:
    """Iterative multimodal discovery over at most config.iterations rounds.

    Per round: select intra- and inter-modal contrastive pairs, propose and
    consolidate factors (keeping the previous round's set), annotate every
    sample, run structure discovery, then generate and gate counterfactuals
    for factors still on ambiguous edges.  Stops early when (a) the graph has
    no ambiguous edges left, or (b) both the factor set and the mark matrix
    are unchanged from the previous round.

    `embedder` must expose embed_candidate(parent, values, names); see
    SliceEmbedder.  Any stage error aborts the run and the partial report
    comes back with status "failed" and the error message recorded.  With
    run_dir set, per-iteration graph/data snapshots and the final report are
    persisted there.
    """
    if not samples:
        raise ValueError("dataset must be nonempty")
    report = RunReport(config=config.to_dict(), seed=config.seed)
    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
    data = list(samples)
    previous: FactorSet | None = None
    prev_graph: MixedGraph | None = None
    try:
        for t in range(1, config.iterations + 1):
            channels = sorted({c for s in data for c in s.modalities})
            lookup = {s.id: s for s in data}
            intra = []
            for channel in channels:
                intra.extend(select_intra_pairs(data, channel, config.k_pairs))
            inter = []
            for i in range(len(channels)):
                for j in range(i + 1, len(channels)):
                    # one call per channel pair: both (a,b) and (b,a) sample
                    # orders are enumerated inside, covering both assignments
                    inter.extend(select_inter_pairs(
                        data, channels[i], channels[j], config.k_pairs))
            prev_factors = previous.factors if previous is not None else ()
            candidates = list(oracle.propose_factors_intra(
                intra, lookup, previous=prev_factors))
            if inter:
                candidates += list(oracle.propose_factors_inter(
                    inter, lookup, previous=prev_factors))
            base = previous if previous is not None else FactorSet((), target_name)
            factors = oracle.consolidate(candidates, base)
            if not factors:
                raise RuntimeError("oracle proposed no factors")
            structured = oracle.annotate(data, factors)
            nodes = list(factors.names) + [target_name]
            graph = run_fci(structured, nodes, config)
            targets = select_intervention_targets(graph, target_name)
            pool_ids = sorted({p.sample_a for p in intra + inter}
                              | {p.sample_b for p in intra + inter})
            pool = [lookup[sid] for sid in pool_ids]
            cf_candidates = []
            for factor in targets:
                cf_candidates.extend(
                    oracle.counterfactuals(pool, structured, factor, graph=graph))
            data, structured, gate_reports = validate_and_augment(
                data, structured, cf_candidates, graph, config, embedder)
            n_cf = sum(s.provenance.kind == "counterfactual" for s in data)
            report.iterations.append(IterationRecord(
                index=t,
                factor_names=list(factors.names),
                n_observational=len(data) - n_cf,
                n_counterfactual=n_cf,
                graph=graph,
                intervention_targets=targets,
                gate=_gate_stats(gate_reports),
                metrics=_metrics_dict(factors, graph, ground_truth),
            ))
            if run_path is not None:
                _write_iteration(run_path, t, graph, structured)
            if not graph.ambiguous_edges():
                report.stop_reason = "oriented"
                break
            if (previous is not None and prev_graph is not None
                    and factors.names == previous.names and graph == prev_graph):
                report.stop_reason = "converged"
                break
            previous, prev_graph = factors, graph
        else:
            report.stop_reason = "max_iterations"
    except Exception as err:  # abort with a partial, flagged report
        report.status = "failed"
        report.error = f"{type(err).__name__}: {err}"
    if run_path is not None:
        report.save(run_path / "run-report.json")
    return report
