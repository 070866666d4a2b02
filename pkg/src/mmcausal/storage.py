"""File formats: canonical JSON, JSONL records, samples and structured CSV."""

from __future__ import annotations

import csv
import json

import numpy as np

from .types import FactorSet, Provenance, Sample, StructuredDataset


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj))


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


# -- samples ------------------------------------------------------------------


def sample_to_dict(sample: Sample) -> dict:
    prov = {"kind": sample.provenance.kind}
    if sample.provenance.kind == "counterfactual":
        prov["parent_id"] = sample.provenance.parent_id
        prov["intervened_factor"] = sample.provenance.intervened_factor
    return {
        "id": sample.id,
        "payloads": dict(sample.payloads),
        "embeddings": {m: [float(x) for x in v] for m, v in sample.embeddings.items()},
        "target": float(sample.target),
        "provenance": prov,
    }


def sample_from_dict(rec: dict) -> Sample:
    prov_rec = rec.get("provenance", {"kind": "observational"})
    if prov_rec["kind"] == "counterfactual":
        prov = Provenance.counterfactual(prov_rec["parent_id"], prov_rec["intervened_factor"])
    else:
        prov = Provenance.observational()
    embeddings = {m: np.asarray(v, dtype=float) for m, v in rec["embeddings"].items()}
    return Sample(rec["id"], dict(rec["payloads"]), embeddings, float(rec["target"]), prov)


def write_samples(path, samples) -> None:
    write_jsonl(path, [sample_to_dict(s) for s in samples])


def read_samples(path) -> list[Sample]:
    return [sample_from_dict(rec) for rec in read_jsonl(path)]


# -- structured data ----------------------------------------------------------


def write_structured_csv(path, dataset: StructuredDataset) -> None:
    """Columns: id, one per factor (declared order), then the target name."""
    names = dataset.factor_set.names
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *names, dataset.factor_set.target_name])
        for sid in dataset.ids:
            row = dataset.rows[sid]
            writer.writerow([sid, *(int(v) for v in row), repr(dataset.targets[sid])])


def read_structured_csv(path, factor_set: FactorSet) -> StructuredDataset:
    dataset = StructuredDataset(factor_set)
    expected = ["id", *factor_set.names, factor_set.target_name]
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != expected:
            raise ValueError(f"structured csv header mismatch: {header} != {expected}")
        for row in reader:
            sid, *values, target = row
            dataset.add_row(sid, [int(v) for v in values], float(target))
    return dataset
