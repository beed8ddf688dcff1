"""Text-side prototype embeddings.

Class prototypes are mean-pooled over a set of phrased sentence embeddings
describing one class; negative prototypes average descriptions of irrelevant
content (fat, connective tissue, ...). Prototypes accumulate across tasks in
an append-only buffer whose class order mirrors the classification head's
column order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, DimensionError

# Phrasing variants per class and base templates per description set.
CLASS_VARIANTS = 4
BASE_TEMPLATES = 22
NEGATIVES_PER_TASK = 3


@dataclass(frozen=True)
class SentenceEmbedding:
    """One encoded description sentence.

    kind is "class" for class descriptions and "negative" for irrelevant
    content; owner names the class or concept the sentence describes.
    """

    vector: np.ndarray
    kind: str
    owner: str
    template_id: int = 0


def _mean_embedding(embeddings, kind: str) -> np.ndarray:
    if not embeddings:
        raise ConsistencyError(f"cannot build a {kind} prototype from an empty list")
    owners = {e.owner for e in embeddings}
    if len(owners) != 1:
        raise ConsistencyError(f"mixed owners in one prototype: {sorted(owners)}")
    kinds = {e.kind for e in embeddings}
    if kinds != {kind}:
        raise ConsistencyError(f"expected kind={kind!r}, got {sorted(kinds)}")
    vecs = [np.asarray(e.vector, dtype=np.float64) for e in embeddings]
    widths = {v.shape for v in vecs}
    if len(widths) != 1 or vecs[0].ndim != 1:
        raise DimensionError(f"inconsistent embedding shapes: {sorted(widths)}")
    acc = np.zeros_like(vecs[0])
    for v in vecs:
        acc += v
    return acc / len(vecs)


def build_class_prototype(embeddings) -> np.ndarray:
    """Arithmetic mean over the class's sentence embeddings."""
    return _mean_embedding(embeddings, "class")


def build_negative_prototype(embeddings) -> np.ndarray:
    """Arithmetic mean over one negative concept's sentence embeddings."""
    return _mean_embedding(embeddings, "negative")


def _frozen(vec: np.ndarray) -> np.ndarray:
    out = np.array(vec, copy=True)
    out.flags.writeable = False
    return out


@dataclass
class PrototypeBuffer:
    """Append-only store of class and negative prototype embeddings.

    ``cls`` holds (global_class, vector) in head-column order; the global
    class ids are always exactly 0..len(cls)-1. ``neg`` holds
    (concept_id, vector) with ids 0..len(neg)-1. Vectors are never mutated
    after insertion.
    """

    cls: list = field(default_factory=list)
    neg: list = field(default_factory=list)

    def __post_init__(self):
        self._validate()

    def _validate(self):
        for i, (gc, _) in enumerate(self.cls):
            if gc != i:
                raise ConsistencyError(f"class prototype slot {i} holds global id {gc}")
        for i, (cid, _) in enumerate(self.neg):
            if cid != i:
                raise ConsistencyError(f"negative prototype slot {i} holds id {cid}")
        widths = {np.asarray(v).shape[-1] for _, v in self.cls + self.neg}
        if len(widths) > 1:
            raise DimensionError(f"prototype widths differ: {sorted(widths)}")

    @property
    def width(self) -> int:
        if not self.cls and not self.neg:
            raise ConsistencyError("empty prototype buffer has no width")
        pool = self.cls or self.neg
        return int(np.asarray(pool[0][1]).shape[-1])

    def class_matrix(self) -> np.ndarray:
        """[n_cls, C_text] class prototypes in global-class order."""
        if not self.cls:
            return np.zeros((0, 0))
        return np.stack([np.asarray(v, dtype=np.float64) for _, v in self.cls])

    def negative_matrix(self) -> np.ndarray:
        if not self.neg:
            return np.zeros((0, self.width if self.cls else 0))
        return np.stack([np.asarray(v, dtype=np.float64) for _, v in self.neg])

    def normalized(self) -> "PrototypeBuffer":
        """Copy of the buffer with every vector scaled to unit L2 norm."""

        def unit(v):
            v = np.asarray(v, dtype=np.float64)
            n = float(np.linalg.norm(v))
            if n == 0.0:
                raise ConsistencyError("cannot normalize a zero prototype vector")
            return v / n

        return PrototypeBuffer(
            cls=[(i, _frozen(unit(v))) for i, v in self.cls],
            neg=[(i, _frozen(unit(v))) for i, v in self.neg],
        )


def accumulate_task(buffer: PrototypeBuffer, cls_protos, neg_protos) -> PrototypeBuffer:
    """Append one task's prototypes, returning a new buffer.

    cls_protos / neg_protos are lists of (global_index, vector) pairs whose
    indices must continue the existing buffer without gap or overlap.
    Existing entries are shared, never copied or mutated.
    """
    new_cls = list(buffer.cls)
    for offset, (gc, vec) in enumerate(cls_protos):
        expect = len(buffer.cls) + offset
        if gc != expect:
            raise ConsistencyError(
                f"class prototype index {gc} breaks contiguity (expected {expect})"
            )
        new_cls.append((gc, _frozen(vec)))
    new_neg = list(buffer.neg)
    for offset, (cid, vec) in enumerate(neg_protos):
        expect = len(buffer.neg) + offset
        if cid != expect:
            raise ConsistencyError(
                f"negative prototype index {cid} breaks contiguity (expected {expect})"
            )
        new_neg.append((cid, _frozen(vec)))
    return PrototypeBuffer(cls=new_cls, neg=new_neg)
