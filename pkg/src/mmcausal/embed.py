"""Embeddings and contrastive pair selection.

Pair mining ranks sample pairs by embedding disagreement: within one
modality by cosine distance, across modalities by cosine mismatch plus the
normalized target gap.  Both rankings are exact (full enumeration), which
keeps them deterministic and easy to test against brute force.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


def cosine_similarity(u, v) -> float:
    """Plain cosine similarity. Raises on dimension mismatch or zero-norm input."""
    a = np.asarray(u, dtype=float)
    b = np.asarray(v, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"vectors must share one dimension, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return float(np.dot(a, b) / (na * nb))


def safe_similarity(u, v) -> float:
    """Cosine extended to zero-norm vectors: identical arrays score 1, else 0.

    Ternary factor slices can legitimately be all zero, so ranking and
    gating code must tolerate zero-norm embeddings instead of raising.
    """
    a = np.asarray(u, dtype=float)
    b = np.asarray(v, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"vectors must share one dimension, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.dot(a, b) / (na * nb))


def mock_embed(values, modality: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic stand-in encoder: factor values padded with zeros.

    The first len(values) components equal the ternary factor values of the
    given modality, the rest are zero, so samples that agree on all factors
    get identical embeddings.  `modality` and `seed` are accepted for
    signature stability; the mock ignores them.
    """
    vec = np.asarray(values, dtype=float)
    if vec.ndim != 1:
        raise ValueError("values must be a flat sequence")
    if dim < len(vec):
        raise ValueError(f"dim={dim} smaller than {len(vec)} factor values")
    out = np.zeros(dim, dtype=float)
    out[: len(vec)] = vec
    return out


class MockEmbeddingProvider:
    """Maps per-modality factor values to mock embeddings of a fixed dimension."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim

    def embed_values(self, values, modality: str) -> np.ndarray:
        return mock_embed(values, modality, self.dim)

    def embed(self, payload, modality: str) -> np.ndarray:
        # Raw payloads (prose, image references) need a real encoder; the
        # mock only understands explicit factor-value sequences.
        if isinstance(payload, (list, tuple, np.ndarray)):
            return self.embed_values(payload, modality)
        raise NotImplementedError("mock provider embeds factor values, not raw payloads")


@dataclass(frozen=True)
class ContrastivePair:
    """Two sample ids with the modalities compared and the contrast score."""

    sample_a: str
    sample_b: str
    modality_a: str
    modality_b: str
    score: float

    @property
    def kind(self) -> str:
        return "intra" if self.modality_a == self.modality_b else "inter"


def _embedding(sample, modality: str) -> np.ndarray:
    try:
        return sample.embeddings[modality]
    except KeyError:
        raise KeyError(f"sample {sample.id}: no embedding for modality {modality!r}") from None


def select_intra_pairs(samples, modality: str, k: int) -> list[ContrastivePair]:
    """Top-k unordered pairs by cosine distance within one modality.

    Ties break lexicographically on (id_a, id_b) with id_a < id_b.  Returns
    all pairs when fewer than k exist.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ordered = sorted(samples, key=lambda s: s.id)
    scored = []
    for i in range(len(ordered)):
        for j in range(i + 1, len(ordered)):
            a, b = ordered[i], ordered[j]
            d = 1.0 - safe_similarity(_embedding(a, modality), _embedding(b, modality))
            scored.append(ContrastivePair(a.id, b.id, modality, modality, d))
    scored.sort(key=lambda p: (-p.score, p.sample_a, p.sample_b))
    return scored[:k]


def select_inter_pairs(samples, modality_a: str, modality_b: str, k: int) -> list[ContrastivePair]:
    """Top-k ordered pairs by cross-modal mismatch plus normalized target gap.

    Score is (1 - cos(e_a[modality_a], e_b[modality_b])) + |y_a - y_b| / range,
    with the target term dropped to 0 when all targets coincide so it always
    lies in [0, 1].
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if modality_a == modality_b:
        raise ValueError("inter-modal selection needs two distinct modalities")
    ordered = sorted(samples, key=lambda s: s.id)
    targets = np.array([s.target for s in ordered], dtype=float)
    span = float(targets.max() - targets.min()) if len(ordered) else 0.0
    scored = []
    for a in ordered:
        for b in ordered:
            if a.id == b.id:
                continue
            mismatch = 1.0 - safe_similarity(_embedding(a, modality_a), _embedding(b, modality_b))
            gap = abs(a.target - b.target) / span if span > 0 else 0.0
            scored.append(ContrastivePair(a.id, b.id, modality_a, modality_b, mismatch + gap))
    scored.sort(key=lambda p: (-p.score, p.sample_a, p.sample_b))
    return scored[:k]


# -- embeddings.jsonl ---------------------------------------------------------


def write_embeddings(path, samples, sidecar: bool = False) -> None:
    """One record per (sample, modality) with float32 values.

    With sidecar=True, also writes `<path>.f32`: the same vectors as raw
    little-endian float32, row-major in record order (requires equal dims).
    """
    records = []
    for s in samples:
        for modality in sorted(s.embeddings):
            vec = np.asarray(s.embeddings[modality], dtype=np.float32)
            records.append((s.id, modality, vec))
    if sidecar:
        dims = {len(vec) for _, _, vec in records}
        if len(dims) > 1:
            raise ValueError(f"sidecar needs uniform dimensions, got {sorted(dims)}")
    with open(path, "w", encoding="utf-8") as fh:
        for sid, modality, vec in records:
            rec = {"sample_id": sid, "modality": modality, "values": [float(x) for x in vec]}
            fh.write(json.dumps(rec) + "\n")
    if sidecar:
        flat = np.concatenate([vec for _, _, vec in records]) if records else np.zeros(0, np.float32)
        flat.astype("<f4").tofile(str(path) + ".f32")


def read_embeddings(path) -> dict:
    """Inverse of write_embeddings: {(sample_id, modality): float32 vector}."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            key = (rec["sample_id"], rec["modality"])
            if key in out:
                raise ValueError(f"duplicate embedding record {key}")
            out[key] = np.asarray(rec["values"], dtype=np.float32)
    return out
