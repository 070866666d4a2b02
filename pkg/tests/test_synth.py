import json
import random

import numpy as np
import pytest

from mmcausal.graph import ARROW, MixedGraph
from mmcausal.storage import sample_to_dict
from mmcausal.types import VERBAL, VISUAL, FactorSet, FactorSpec
from mmcausal.synth import (
    ExogenousRecord,
    SCMSpec,
    d_separated,
    draw_record,
    generate_row,
    lung_default_spec,
    mag_default_spec,
    quantize,
    render_text_payload,
    sample_dataset,
    scm_counterfactual,
)


def tiny_factor(name, modality=VERBAL):
    return (
        FactorSpec(name, f"{name} description", f"{name} high", "Otherwise; or not mentioned",
                   f"{name} low"),
        modality,
    )


def make_scm(names, edges, weights=None, noise=None, target_weights=None, sd=0.0,
             target_thresholds=None):
    pairs = [tiny_factor(n) for n in names]
    factor_set = FactorSet(tuple(f for f, _ in pairs), "y")
    modalities = {f.name: m for f, m in pairs}
    dag = MixedGraph.from_dag_edges(names, edges)
    w = weights if weights is not None else {(a, b): 1.0 for a, b in edges}
    return SCMSpec(
        factor_set=factor_set,
        modalities=modalities,
        dag=dag,
        weights=w,
        noise_probs=noise or {},
        target_weights=target_weights or {},
        target_noise_sd=sd,
        target_thresholds=target_thresholds,
    )


def test_quantize_dead_band():
    assert quantize(-0.51) == -1
    assert quantize(-0.5) == 0
    assert quantize(0.0) == 0
    assert quantize(0.5) == 0
    assert quantize(0.51) == 1
    assert quantize(2.0, 1.0, 3.0) == 0


def test_scm_validation():
    with pytest.raises(ValueError):
        make_scm(["a", "b"], [("a", "b")], weights={("b", "a"): 1.0})
    with pytest.raises(ValueError):
        make_scm(["a", "b"], [("a", "b")], weights={})
    with pytest.raises(ValueError):
        make_scm(["a"], [], noise={"a": 1.5})
    scm = make_scm(["a", "b"], [("a", "b")])
    scm.thresholds = {"a": (0.5, -0.5)}
    with pytest.raises(ValueError):
        scm.__post_init__()


def test_sample_dataset_shapes_and_determinism():
    scm = make_scm(["a", "b", "c"], [("a", "b")], target_weights={"b": 1.0}, sd=0.1)
    structured, samples, noise = sample_dataset(scm, 20, seed=3)
    assert len(structured) == 20 and len(samples) == 20 and len(noise) == 20
    again_structured, again_samples, again_noise = sample_dataset(scm, 20, seed=3)
    assert [sample_to_dict(s) for s in samples] == [sample_to_dict(s) for s in again_samples]
    assert {k: v.to_dict() for k, v in noise.items()} == {
        k: v.to_dict() for k, v in again_noise.items()
    }
    ids, mat = structured.matrix()
    again_ids, again_mat = again_structured.matrix()
    assert ids == again_ids and np.array_equal(mat, again_mat)
    # a different seed actually changes the data
    other, _, _ = sample_dataset(scm, 20, seed=4)
    assert not np.array_equal(mat, other.matrix()[1])


def test_rows_depend_only_on_index():
    scm = make_scm(["a", "b"], [("a", "b")])
    structured, _, _ = sample_dataset(scm, 10, seed=7)
    # regenerating row 7 in isolation reproduces the same values
    record, values, y = generate_row(scm, seed=7, index=7)
    assert structured.rows["s0007"].tolist() == [values[n] for n in ("a", "b")]
    assert structured.targets["s0007"] == y


def test_empty_dataset():
    scm = make_scm(["a"], [])
    structured, samples, noise = sample_dataset(scm, 0, seed=0)
    assert len(structured) == 0 and samples == [] and noise == {}
    with pytest.raises(ValueError):
        sample_dataset(scm, -1, seed=0)


def test_root_marginals_uniform():
    scm = make_scm(["r"], [])
    structured, _, _ = sample_dataset(scm, 3000, seed=7)
    _, mat = structured.matrix()
    for value in (-1, 0, 1):
        share = float(np.mean(mat[:, 0] == value))
        assert 0.30 <= share <= 0.37, (value, share)


def test_flip_noise_changes_values():
    calm = make_scm(["r"], [])
    noisy = make_scm(["r"], [], noise={"r": 0.5})
    a, _, _ = sample_dataset(calm, 500, seed=1)
    b, _, _ = sample_dataset(noisy, 500, seed=1)
    diff = np.mean(a.matrix()[1] != b.matrix()[1])
    assert 0.3 < diff < 0.7  # roughly half the rows flipped


def hand_record(scm, draws, target_noise=0.0):
    return ExogenousRecord("manual", {n: draws.get(n, (0.5, 0.99)) for n in scm.dag.nodes},
                           target_noise)


def test_counterfactual_chain_hand_example():
    scm = make_scm(["A", "B"], [("A", "B")], weights={("A", "B"): 1.0})
    # u_value 0.9 puts the root at +1; B follows A through the unit weight
    record = hand_record(scm, {"A": (0.9, 0.99), "B": (0.25, 0.99)})
    values, _ = scm_counterfactual(scm, record, "A", 1)
    assert values == {"A": 1, "B": 1}
    cf, _ = scm_counterfactual(scm, record, "A", -1)
    assert cf == {"A": -1, "B": -1}


def test_counterfactual_null_intervention():
    scm = make_scm(["a", "b", "c"], [("a", "b"), ("b", "c")], target_weights={"c": 1.0})
    for index in range(25):
        record, values, y = generate_row(scm, seed=11, index=index)
        cf_values, cf_y = scm_counterfactual(scm, record, "a", values["a"])
        assert cf_values == values
        assert cf_y == y


def test_counterfactual_sink_touches_only_sink_and_target():
    scm = make_scm(["a", "b"], [("a", "b")], target_weights={"b": 2.0})
    record, values, y = generate_row(scm, seed=5, index=0)
    flipped = -values["b"] if values["b"] != 0 else 1
    cf_values, cf_y = scm_counterfactual(scm, record, "b", flipped)
    assert cf_values["a"] == values["a"]
    assert cf_values["b"] == flipped
    assert cf_y != y


def test_counterfactual_nondescendants_bitwise_unchanged():
    scm = make_scm(
        ["a", "b", "c", "d"],
        [("a", "b"), ("b", "c")],
        noise={"b": 0.1, "c": 0.2},
        target_weights={"c": 1.0, "d": 0.5},
        sd=0.2,
    )
    rng = random.Random(0)
    for index in range(60):
        record, values, _ = generate_row(scm, seed=2, index=index)
        factor = rng.choice(scm.dag.nodes)
        new_value = rng.choice([-1, 0, 1])
        cf_values, _ = scm_counterfactual(scm, record, factor, new_value)
        desc = {factor}
        stack = [factor]
        while stack:
            for child in scm.dag.children(stack.pop()):
                if child not in desc:
                    desc.add(child)
                    stack.append(child)
        for node in scm.dag.nodes:
            if node not in desc:
                assert cf_values[node] == values[node], (factor, node)


def test_counterfactual_unknown_factor():
    scm = make_scm(["a"], [])
    record = draw_record(scm, "sX", 0, 0)
    with pytest.raises(KeyError):
        scm_counterfactual(scm, record, "ghost", 1)
    with pytest.raises(ValueError):
        scm_counterfactual(scm, record, "a", 2)


def test_target_quantization():
    scm = make_scm(["a"], [], target_weights={"a": 1.0}, target_thresholds=(-0.5, 0.5))
    structured, _, _ = sample_dataset(scm, 100, seed=9)
    values = set(structured.targets.values())
    assert values <= {-1.0, 0.0, 1.0}
    # without quantization the target is just the weighted sum
    raw = make_scm(["a"], [], target_weights={"a": 1.0})
    structured_raw, _, _ = sample_dataset(raw, 100, seed=9)
    for sid, row in structured_raw.rows.items():
        assert structured_raw.targets[sid] == float(row[0])


def test_render_text_payload():
    taste = FactorSpec("Taste", "flavor", "sweet", "Otherwise; or not mentioned", "sour")
    aroma = FactorSpec("Aroma", "smell", "strong", "Otherwise; or not mentioned", "musty or rotten")
    text = render_text_payload([1, -1], [aroma, taste])
    assert "strong" in text and "sour" in text
    assert text.index("strong") < text.index("sour")  # factor order preserved
    silent = render_text_payload([0, 0], [aroma, taste])
    assert "strong" not in silent and "sweet" not in silent and "sour" not in silent
    named = render_text_payload([0, 1], [aroma, taste], "It tastes {taste}.")
    assert named == "It tastes sweet."
    with pytest.raises(ValueError):
        render_text_payload([1, 1], [aroma, taste], "{shininess}")


def test_exogenous_record_round_trip():
    rec = ExogenousRecord("s1", {"a": (0.25, 0.75)}, -0.5)
    back = ExogenousRecord.from_dict(json.loads(json.dumps(rec.to_dict())))
    assert back == rec


def test_scm_json_round_trip():
    scm = mag_default_spec()
    clone = SCMSpec.from_dict(json.loads(json.dumps(scm.to_dict())))
    assert clone.to_dict() == scm.to_dict()
    a, _, _ = sample_dataset(scm, 15, seed=1)
    b, _, _ = sample_dataset(clone, 15, seed=1)
    assert np.array_equal(a.matrix()[1], b.matrix()[1])


def test_mag_default_spec_shape():
    scm = mag_default_spec()
    assert scm.factor_set.names == (
        "color", "size", "defects", "aroma", "taste", "juiciness", "nutrition", "recmd",
    )
    assert scm.factor_set.target_name == "score"
    assert [f.name for f in scm.factors_of(VISUAL)] == ["color", "size", "defects"]
    assert [f.name for f in scm.factors_of(VERBAL)] == [
        "aroma", "taste", "juiciness", "nutrition", "recmd",
    ]
    assert scm.factor_set.get("taste").criterion_pos == "sweet"
    assert scm.factor_set.get("juiciness").criterion_neg == "dry and lacking moisture"
    full = scm.full_graph()
    assert "score" in full
    assert full.mark_at("taste", "score") == ARROW
    full.validate_dag()


def test_mag_samples_have_both_channels():
    scm = mag_default_spec()
    structured, samples, _ = sample_dataset(scm, 5, seed=0, embedding_dim=8)
    s = samples[0]
    assert set(s.payloads) == {"text", "image"}
    assert s.payloads["image"].startswith("image:")
    vvals = structured.rows[s.id][3:]  # verbal factors come after the 3 visual ones
    assert s.embeddings["text"].tolist()[:5] == [float(v) for v in vvals]
    assert s.embeddings["text"].tolist()[5:] == [0.0, 0.0, 0.0]
    ivals = structured.rows[s.id][:3]
    assert s.embeddings["image"].tolist()[:3] == [float(v) for v in ivals]


def test_lung_default_spec_shape():
    scm = lung_default_spec()
    assert scm.factor_set.target_name == "diagnosis"
    assert [f.name for f in scm.factors_of(VISUAL)] == ["lesion"]
    structured, _, _ = sample_dataset(scm, 200, seed=0)
    assert set(structured.targets.values()) <= {-1.0, 0.0, 1.0}


# -- d-separation ---------------------------------------------------------------


def test_d_separated_chain_and_collider():
    chain = MixedGraph.from_dag_edges(["A", "B", "C"], [("A", "B"), ("B", "C")])
    assert not d_separated(chain, "A", "C")
    assert d_separated(chain, "A", "C", {"B"})
    collider = MixedGraph.from_dag_edges(["A", "B", "C"], [("A", "C"), ("B", "C")])
    assert d_separated(collider, "A", "B")
    assert not d_separated(collider, "A", "B", {"C"})


def test_d_separated_collider_descendant_opens():
    g = MixedGraph.from_dag_edges(
        ["A", "B", "C", "D"], [("A", "C"), ("B", "C"), ("C", "D")]
    )
    assert d_separated(g, "A", "B")
    assert not d_separated(g, "A", "B", {"D"})  # descendant of the collider


def test_d_separated_preconditions():
    g = MixedGraph.from_dag_edges(["A", "B"], [("A", "B")])
    with pytest.raises(ValueError):
        d_separated(g, "A", "A")
    with pytest.raises(ValueError):
        d_separated(g, "A", "B", {"B"})
    with pytest.raises(KeyError):
        d_separated(g, "A", "Z")
    undirected = MixedGraph(["A", "B"])
    undirected.add_edge("A", "B", 1, 1)
    with pytest.raises(ValueError):
        d_separated(undirected, "A", "B")


def brute_d_separated(dag: MixedGraph, x: str, y: str, given=()) -> bool:
    """Oracle: enumerate every simple path and apply the blocking rules."""
    z = set(given)

    def descendants(v):
        out = {v}
        stack = [v]
        while stack:
            for c in dag.children(stack.pop()):
                if c not in out:
                    out.add(c)
                    stack.append(c)
        return out

    def active(path):
        for i in range(1, len(path) - 1):
            prev, mid, nxt = path[i - 1], path[i], path[i + 1]
            collider = dag.mark_at(prev, mid) == ARROW and dag.mark_at(nxt, mid) == ARROW
            if collider:
                if not (descendants(mid) & z):
                    return False
            elif mid in z:
                return False
        return True

    def walk(path):
        tip = path[-1]
        if tip == y:
            return active(path)
        for nxt in dag.adjacent_to(tip):
            if nxt not in path and walk(path + [nxt]):
                return True
        return False

    return not walk([x])


def random_dag(rng: random.Random, n: int, p: float = 0.5) -> MixedGraph:
    names = [f"v{i}" for i in range(n)]
    order = names[:]
    rng.shuffle(order)
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.append((order[i], order[j]))
    return MixedGraph.from_dag_edges(names, edges)


def test_d_separated_matches_path_enumeration():
    rng = random.Random(99)
    for _ in range(40):
        g = random_dag(rng, rng.randint(3, 5))
        nodes = g.nodes
        for x in nodes:
            for y in nodes:
                if x >= y:
                    continue
                rest = [v for v in nodes if v not in (x, y)]
                for mask in range(2 ** len(rest)):
                    z = {rest[i] for i in range(len(rest)) if mask >> i & 1}
                    assert d_separated(g, x, y, z) == brute_d_separated(g, x, y, z)
