"""Counterfactual loop tests: gate boundary semantics, intervention-target
selection, augmentation bookkeeping, and full pipeline runs with the scripted
oracle (early stops, failure flagging, determinism, run-directory layout)."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcausal.embed import MockEmbeddingProvider
from mmcausal.graph import ARROW, CIRCLE, TAIL, MixedGraph
from mmcausal.mcr import (
    IterationRecord,
    RunReport,
    SliceEmbedder,
    ValidationReport,
    causal_gate,
    run_pipeline,
    select_intervention_targets,
    semantic_gate,
    validate_and_augment,
)
from mmcausal.oracle import CounterfactualCandidate, ScriptedOracle, counterfactual_id
from mmcausal.synth import SCMSpec, mag_default_spec, sample_dataset
from mmcausal.types import (
    VERBAL,
    FactorSet,
    FactorSpec,
    PipelineConfig,
    Provenance,
    Sample,
    StructuredDataset,
)


def sample_with(sample_id, embeddings, target=0.0, provenance=None):
    payloads = {m: f"payload {m}" for m in embeddings}
    prov = provenance if provenance is not None else Provenance.observational()
    return Sample(sample_id, payloads, embeddings, target, prov)


# -- semantic gate -----------------------------------------------------------


def test_semantic_gate_identical_embeddings_pass():
    v = np.array([1.0, 2.0, 3.0])
    a = sample_with("a", {"text": v, "image": v.copy()})
    b = sample_with("b", {"text": v.copy(), "image": v.copy()})
    mean, ok = semantic_gate(a, b, 0.7)
    assert mean == 1.0 and ok


def test_semantic_gate_boundary_inclusive_exact():
    # 7 identical channels (cosine 1.0) and 3 orthogonal ones (cosine 0.0):
    # the mean is the exact double 7/10, landing precisely on tau.
    emb_a, emb_b = {}, {}
    for i in range(7):
        emb_a[f"m{i}"] = np.array([1.0, 0.0])
        emb_b[f"m{i}"] = np.array([1.0, 0.0])
    for i in range(7, 10):
        emb_a[f"m{i}"] = np.array([1.0, 0.0])
        emb_b[f"m{i}"] = np.array([0.0, 1.0])
    mean, ok = semantic_gate(sample_with("a", emb_a), sample_with("b", emb_b), 0.7)
    assert mean == 0.7
    assert ok


def test_semantic_gate_just_below_boundary_fails():
    emb_a = {f"m{i}": np.array([1.0, 0.0]) for i in range(100)}
    emb_b = {f"m{i}": np.array([1.0, 0.0]) for i in range(69)}
    emb_b.update({f"m{i}": np.array([0.0, 1.0]) for i in range(69, 100)})
    mean, ok = semantic_gate(sample_with("a", emb_a), sample_with("b", emb_b), 0.7)
    assert mean == pytest.approx(0.69)
    assert not ok


def test_semantic_gate_two_channel_example():
    # cosines 3/5 and 4/5 against integer-norm vectors: mean 0.7, a pass
    a = sample_with("a", {"text": np.array([1.0, 0.0]), "image": np.array([1.0, 0.0])})
    b = sample_with("b", {"text": np.array([3.0, 4.0]), "image": np.array([4.0, 3.0])})
    mean, ok = semantic_gate(a, b, 0.7)
    assert mean == pytest.approx(0.7)
    assert ok


def test_semantic_gate_modality_mismatch():
    a = sample_with("a", {"text": np.ones(3)})
    b = sample_with("b", {"image": np.ones(3)})
    with pytest.raises(ValueError, match="modality mismatch"):
        semantic_gate(a, b, 0.7)


def test_semantic_gate_requires_embeddings():
    a = sample_with("a", {})
    b = sample_with("b", {})
    with pytest.raises(ValueError, match="no embeddings"):
        semantic_gate(a, b, 0.7)


# -- causal gate -------------------------------------------------------------


def chain_graph(names):
    return MixedGraph.from_dag_edges(names, list(zip(names, names[1:])))


def test_causal_gate_boundary_pass_at_two_fifths():
    g = chain_graph(["a", "b", "c", "d", "e", "f"])
    factual = [0, 0, 0, 0, 0, 1]
    cf = [1, 1, 0, 0, 0, -1]  # two of five non-descendants of f moved
    ratio, ok = causal_gate(factual, cf, "f", g, 1e-6, 0.4)
    assert ratio == pytest.approx(0.4)
    assert ok


def test_causal_gate_half_fails_default_tau():
    g = chain_graph(["a", "b", "c", "d", "e"])
    factual = [0, 0, 0, 0, 1]
    cf = [1, 1, 0, 0, -1]  # two of four non-descendants of e moved
    ratio, ok = causal_gate(factual, cf, "e", g, 1e-6, 0.4)
    assert ratio == 0.5
    assert not ok


def test_causal_gate_no_changes_pass():
    g = chain_graph(["a", "b", "c", "d", "e"])
    ratio, ok = causal_gate([1, 0, -1, 0, 1], [1, 0, -1, 0, 1], "e", g, 1e-6, 0.4)
    assert ratio == 0.0 and ok


def test_causal_gate_empty_nondesc_vacuous_pass():
    # intervening the root of a chain reaches every node: 0/0 := 0
    g = chain_graph(["a", "b", "c"])
    ratio, ok = causal_gate([1, 1, 1], [-1, -1, -1], "a", g, 1e-6, 0.4)
    assert ratio == 0.0 and ok


def test_causal_gate_circle_paths_count_as_descendants():
    # a o-o b is potentially directed either way, so b is a possible
    # descendant of a and only c remains to check
    g = MixedGraph(["a", "b", "c"])
    g.add_edge("a", "b", CIRCLE, CIRCLE)
    ratio, ok = causal_gate([0, 0, 0], [1, 1, 1], "a", g, 1e-6, 0.4)
    assert ratio == 1.0 and not ok


def test_causal_gate_unknown_factor():
    g = chain_graph(["a", "b"])
    with pytest.raises(KeyError, match="zz"):
        causal_gate([0, 0], [0, 0], "zz", g, 1e-6, 0.4)
    with pytest.raises(KeyError, match="not in graph"):
        causal_gate([0, 0], [0, 0], "a", g, 1e-6, 0.4, names=["a", "zz"])


def test_causal_gate_length_mismatch():
    g = chain_graph(["a", "b", "c"])
    with pytest.raises(ValueError, match="length"):
        causal_gate([0, 0], [0, 0, 0], "a", g, 1e-6, 0.4)


@settings(max_examples=200, deadline=None)
@given(
    changed=st.integers(min_value=0, max_value=5),
    tau_lo=st.floats(min_value=0.0, max_value=1.0),
    tau_hi=st.floats(min_value=0.0, max_value=1.0),
)
def test_causal_gate_monotone_in_tau(changed, tau_lo, tau_hi):
    # lowering tau_causal never accepts a previously rejected candidate
    lo, hi = sorted([tau_lo, tau_hi])
    g = chain_graph(["a", "b", "c", "d", "e", "f"])
    factual = np.zeros(6)
    cf = np.zeros(6)
    cf[:changed] = 1
    _, pass_lo = causal_gate(factual, cf, "f", g, 1e-6, lo)
    _, pass_hi = causal_gate(factual, cf, "f", g, 1e-6, hi)
    if pass_lo:
        assert pass_hi


@settings(max_examples=200, deadline=None)
@given(
    sim=st.floats(min_value=-1.0, max_value=1.0),
    tau_lo=st.floats(min_value=-1.0, max_value=1.0),
    tau_hi=st.floats(min_value=-1.0, max_value=1.0),
)
def test_semantic_gate_monotone_in_tau(sim, tau_lo, tau_hi):
    # raising tau_sem never accepts a previously rejected candidate
    lo, hi = sorted([tau_lo, tau_hi])
    a = sample_with("a", {"text": np.array([1.0, 0.0])})
    b = sample_with("b", {"text": np.array([sim, np.sqrt(max(0.0, 1 - sim * sim))])})
    _, pass_hi = semantic_gate(a, b, hi)
    _, pass_lo = semantic_gate(a, b, lo)
    if pass_hi:
        assert pass_lo


# -- intervention target selection -------------------------------------------


def test_targets_fully_oriented_graph_empty():
    g = chain_graph(["a", "b", "y"])
    assert select_intervention_targets(g, "y") == []


def test_targets_circle_edge_endpoints():
    g = MixedGraph(["a", "b", "c", "d"])
    g.add_edge("a", "b", CIRCLE, CIRCLE)
    g.add_edge("c", "d", TAIL, ARROW)
    assert select_intervention_targets(g, "d") == ["a", "b"]


def test_targets_exclude_target_node():
    g = MixedGraph(["y", "a"])
    g.add_edge("y", "a", CIRCLE, CIRCLE)
    assert select_intervention_targets(g, "y") == ["a"]


def test_targets_single_circle_endpoint_counts():
    # one circle end is enough to make the edge ambiguous
    g = MixedGraph(["a", "b"])
    g.add_edge("a", "b", CIRCLE, ARROW)
    assert select_intervention_targets(g, "b") == ["a"]


def test_targets_missing_target_raises():
    g = chain_graph(["a", "b"])
    with pytest.raises(KeyError):
        select_intervention_targets(g, "zz")


# -- slice embedder ----------------------------------------------------------


def test_slice_embedder_matches_generator_slices():
    scm = mag_default_spec()
    provider = MockEmbeddingProvider(8)
    emb = SliceEmbedder.for_scm(scm, provider)
    structured, samples, _ = sample_dataset(scm, 5, seed=9)
    names = list(scm.factor_set.names)
    s = samples[0]
    vals = structured.rows[s.id]
    out = emb.embed_candidate(s, vals, names)
    assert set(out) == set(s.modalities)
    for channel, vec in out.items():
        np.testing.assert_allclose(vec, s.embeddings[channel])


def test_slice_embedder_unknown_factor_contributes_nowhere():
    provider = MockEmbeddingProvider(4)
    emb = SliceEmbedder(provider, {"a": "text"})
    parent = sample_with("p", {"text": provider.embed_values([1], "text")})
    out = emb.embed_candidate(parent, [1, -1], ["a", "mystery"])
    np.testing.assert_allclose(out["text"], provider.embed_values([1], "text"))


# -- validate_and_augment ----------------------------------------------------


def two_factor_setup():
    """Tiny hand-built world: factors a -> b -> score, two samples."""
    fs = FactorSet(
        (FactorSpec("a", "a", "hi", "mid", "lo"), FactorSpec("b", "b", "hi", "mid", "lo")),
        "score",
    )
    provider = MockEmbeddingProvider(4)
    emb = SliceEmbedder(provider, {"a": "text", "b": "text"})
    structured = StructuredDataset(fs)
    samples = []
    for sid, vals, tgt in [("s1", (1, 1), 2.0), ("s2", (-1, 0), -1.0)]:
        payloads = {"text": f"sample {sid}"}
        embeddings = {"text": provider.embed_values(list(vals), "text")}
        samples.append(Sample(sid, payloads, embeddings, tgt))
        structured.add_row(sid, vals, tgt)
    g = MixedGraph.from_dag_edges(["a", "b", "score"], [("a", "b"), ("b", "score")])
    return fs, samples, structured, g, emb


def cand(parent_id, factor, value, values, target=None):
    return CounterfactualCandidate(parent_id, factor, value, tuple(values), target, {}, {})


def test_identity_candidate_accepted_and_appended():
    fs, samples, structured, g, emb = two_factor_setup()
    c = cand("s1", "b", 1, (1, 1))
    out_samples, out_structured, reports = validate_and_augment(
        samples, structured, [c], g, PipelineConfig(), emb)
    assert len(reports) == 1 and reports[0].accepted
    assert reports[0].mean_similarity == pytest.approx(1.0)
    assert reports[0].indep_ratio == 0.0
    assert len(out_samples) == len(samples) + 1
    cf = out_samples[-1]
    assert cf.id == counterfactual_id("s1", "b", 1)
    assert cf.provenance.kind == "counterfactual"
    assert cf.provenance.parent_id == "s1"
    assert cf.id in out_structured
    assert out_structured.targets[cf.id] == 2.0  # parent target carries over


def test_adversarial_flip_rejected_by_causal_gate():
    # chain with >= 3 non-descendants of the intervened node; a candidate
    # flipping everything upstream must fail the causal gate
    fs = FactorSet(
        tuple(FactorSpec(n, n, "hi", "mid", "lo") for n in ["a", "b", "c", "d"]), "score")
    g = chain_graph(["a", "b", "c", "d", "score"])
    structured = StructuredDataset(fs)
    structured.add_row("s1", (1, 1, 1, 1), 1.0)
    provider = MockEmbeddingProvider(4)
    parent = Sample("s1", {"text": "t"}, {"text": provider.embed_values([1, 1, 1, 1], "text")}, 1.0)

    class ParrotEmbedder:
        # returns the parent's own embeddings so the semantic gate passes
        # and the causal gate is isolated
        def embed_candidate(self, p, values, names):
            return dict(p.embeddings)

    c = cand("s1", "d", -1, (-1, -1, -1, -1))
    _, _, reports = validate_and_augment(
        [parent], structured, [c], g, PipelineConfig(), ParrotEmbedder())
    r = reports[0]
    assert r.sem_pass and not r.causal_pass and not r.accepted
    assert r.indep_ratio == 1.0


def test_embed_failure_recorded_and_rejected():
    fs, samples, structured, g, emb = two_factor_setup()

    class BrokenEmbedder:
        def embed_candidate(self, p, values, names):
            raise RuntimeError("encoder offline")

    c = cand("s1", "b", 1, (1, 1))
    out_samples, out_structured, reports = validate_and_augment(
        samples, structured, [c], g, PipelineConfig(), BrokenEmbedder())
    assert len(out_samples) == len(samples)
    assert reports[0].error == "encoder offline"
    assert not reports[0].accepted
    assert counterfactual_id("s1", "b", 1) not in out_structured


def test_observational_rows_never_mutated():
    fs, samples, structured, g, emb = two_factor_setup()
    before = {sid: structured.rows[sid].copy() for sid in structured.rows}
    cands = [cand("s1", "b", 1, (1, 1)), cand("s2", "a", 1, (1, 0))]
    out_samples, out_structured, reports = validate_and_augment(
        samples, structured, cands, g, PipelineConfig(), emb)
    for sid, row in before.items():
        np.testing.assert_array_equal(structured.rows[sid], row)
        np.testing.assert_array_equal(out_structured.rows[sid], row)
    accepted = sum(r.accepted for r in reports)
    assert len(out_samples) == len(samples) + accepted
    assert len(out_structured) == len(structured) + accepted


def test_duplicate_candidate_skipped_silently():
    fs, samples, structured, g, emb = two_factor_setup()
    c = cand("s1", "b", 1, (1, 1))
    out_samples, out_structured, reports = validate_and_augment(
        samples, structured, [c, c], g, PipelineConfig(), emb)
    assert len(reports) == 1
    assert len(out_samples) == len(samples) + 1


def test_unknown_parent_raises():
    fs, samples, structured, g, emb = two_factor_setup()
    with pytest.raises(KeyError, match="ghost"):
        validate_and_augment(samples, structured, [cand("ghost", "b", 1, (1, 1))],
                             g, PipelineConfig(), emb)


def test_wrong_value_count_raises():
    fs, samples, structured, g, emb = two_factor_setup()
    with pytest.raises(ValueError, match="expected 2 values"):
        validate_and_augment(samples, structured, [cand("s1", "b", 1, (1, 1, 1))],
                             g, PipelineConfig(), emb)


def test_candidate_target_overrides_parent():
    fs, samples, structured, g, emb = two_factor_setup()
    c = cand("s1", "b", 1, (1, 1), target=4.5)
    _, out_structured, reports = validate_and_augment(
        samples, structured, [c], g, PipelineConfig(), emb)
    assert reports[0].accepted
    assert out_structured.targets[counterfactual_id("s1", "b", 1)] == 4.5


def test_validation_report_accepted_property():
    c = cand("s1", "a", 1, (1, 1))
    assert ValidationReport(c, 1.0, True, 0.0, True).accepted
    assert not ValidationReport(c, 1.0, True, 1.0, False).accepted
    assert not ValidationReport(c, 0.0, False, 0.0, True).accepted


# -- full pipeline -----------------------------------------------------------


def mag_run(n=200, seed=42, ground_truth=None, run_dir=None, **overrides):
    scm = mag_default_spec()
    structured, samples, noise = sample_dataset(scm, n, seed=seed)
    config = PipelineConfig(seed=seed, **overrides)
    oracle = ScriptedOracle(scm, noise)
    embedder = SliceEmbedder.for_scm(scm, MockEmbeddingProvider(8))
    return run_pipeline(samples, config, oracle, embedder,
                        ground_truth=ground_truth, run_dir=run_dir)


def test_pipeline_empty_dataset_rejected():
    scm = mag_default_spec()
    oracle = ScriptedOracle(scm, {})
    emb = SliceEmbedder.for_scm(scm, MockEmbeddingProvider(8))
    with pytest.raises(ValueError, match="nonempty"):
        run_pipeline([], PipelineConfig(), oracle, emb)


def test_pipeline_single_iteration_budget():
    report = mag_run(n=80, seed=5, iterations=1)
    assert report.status == "completed"
    assert len(report.iterations) == 1
    assert report.stop_reason in ("max_iterations", "oriented")
    it = report.iterations[0]
    assert it.index == 1
    g = it.gate
    assert g["proposed"] == g["accepted"] + g["rejected_semantic"] + \
        g["rejected_causal"] + g["embed_failures"]


def test_pipeline_iteration_count_within_budget():
    report = mag_run(n=120, seed=3)
    assert report.status == "completed"
    assert 1 <= len(report.iterations) <= PipelineConfig().iterations


def test_pipeline_early_stop_when_fully_oriented():
    # two independent root factors, target pure noise: the skeleton is empty,
    # so iteration 1 ends with no ambiguous edges and stop rule (a) fires
    fs = FactorSet(
        (FactorSpec("alpha", "a", "hi", "mid", "lo"),
         FactorSpec("beta", "b", "hi", "mid", "lo")), "score")
    scm = SCMSpec(
        factor_set=fs,
        modalities={"alpha": VERBAL, "beta": VERBAL},
        dag=MixedGraph(["alpha", "beta"]),
        weights={},
        target_noise_sd=1.0,
    )
    structured, samples, noise = sample_dataset(scm, 150, seed=8)
    report = run_pipeline(samples, PipelineConfig(seed=8), ScriptedOracle(scm, noise),
                          SliceEmbedder.for_scm(scm, MockEmbeddingProvider(8)))
    assert report.status == "completed"
    assert report.stop_reason == "oriented"
    assert len(report.iterations) == 1
    assert report.final_graph.ambiguous_edges() == []


def test_pipeline_convergence_stop():
    report = mag_run()
    assert report.status == "completed"
    assert report.stop_reason == "converged"
    last, prev = report.iterations[-1], report.iterations[-2]
    assert last.graph == prev.graph
    assert last.factor_names == prev.factor_names


def test_pipeline_failure_flagged():
    scm = mag_default_spec()
    structured, samples, noise = sample_dataset(scm, 30, seed=1)

    class FaultyOracle(ScriptedOracle):
        def annotate(self, data, factors):
            raise RuntimeError("annotation backend down")

    report = run_pipeline(samples, PipelineConfig(seed=1), FaultyOracle(scm, noise),
                          SliceEmbedder.for_scm(scm, MockEmbeddingProvider(8)))
    assert report.status == "failed"
    assert "RuntimeError: annotation backend down" in report.error
    assert report.iterations == []
    assert report.final_graph is None


def test_pipeline_no_factors_flagged():
    scm = mag_default_spec()
    structured, samples, noise = sample_dataset(scm, 10, seed=1)

    class MuteOracle(ScriptedOracle):
        def propose_factors_intra(self, pairs, lookup, previous=()):
            return []

        def propose_factors_inter(self, pairs, lookup, previous=()):
            return []

    report = run_pipeline(samples, PipelineConfig(seed=1), MuteOracle(scm, noise),
                          SliceEmbedder.for_scm(scm, MockEmbeddingProvider(8)))
    assert report.status == "failed"
    assert "no factors" in report.error


def test_pipeline_deterministic_bytes():
    a = mag_run(n=100, seed=7)
    b = mag_run(n=100, seed=7)
    assert a.to_json() == b.to_json()


def test_pipeline_seed_changes_report():
    a = mag_run(n=100, seed=7)
    b = mag_run(n=100, seed=8)
    assert a.to_json() != b.to_json()


def test_pipeline_counterfactual_rows_tracked():
    report = mag_run()
    for it in report.iterations:
        assert it.n_observational == 200
        assert it.n_counterfactual >= 0
    # augmentation feeds the next round, so counts never shrink
    counts = [it.n_counterfactual for it in report.iterations]
    assert counts == sorted(counts)


def test_pipeline_run_directory_layout(tmp_path):
    run_dir = tmp_path / "run"
    report = mag_run(n=80, seed=5, iterations=2, run_dir=run_dir)
    assert (run_dir / "run-report.json").exists()
    assert (run_dir / "run-report.meta.json").exists()
    meta = json.loads((run_dir / "run-report.meta.json").read_text())
    assert meta["format"] == "run-report/1" and "written_at" in meta
    on_disk = json.loads((run_dir / "run-report.json").read_text())
    assert on_disk == report.to_dict()
    for it in report.iterations:
        d = run_dir / f"iter-{it.index:02d}"
        assert (d / "graph.json").exists() and (d / "structured.csv").exists()
        assert MixedGraph.load(d / "graph.json") == it.graph


def test_run_report_roundtrip_and_canonical():
    report = mag_run(n=60, seed=2, iterations=1)
    text = report.to_json()
    assert text == report.to_json()
    parsed = json.loads(text)
    assert parsed["seed"] == 2
    assert parsed["status"] == "completed"
    assert len(parsed["iterations"]) == len(report.iterations)
    it = parsed["iterations"][0]
    assert set(it) >= {"index", "factors", "sizes", "graph", "circle_count",
                       "ambiguous_edges", "intervention_targets", "gate", "metrics"}
    assert "written_at" not in text  # timestamps live in the sidecar only


def test_iteration_record_to_dict_counts():
    g = MixedGraph(["a", "score"])
    g.add_edge("a", "score", CIRCLE, CIRCLE)
    rec = IterationRecord(1, ["a"], 10, 2, g, ["a"], {"proposed": 0})
    d = rec.to_dict()
    assert d["circle_count"] == 2
    assert d["ambiguous_edges"] == [["a", "score"]]
    assert d["sizes"] == {"observational": 10, "counterfactual": 2}
