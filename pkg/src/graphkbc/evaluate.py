"""Triplet classification and out-of-KB evaluation over a frozen model.

Classification binarizes implausibility scores against per-relation
thresholds tuned on validation data (predict positive iff score is strictly
below the threshold). Entities absent from the trained embedding table are
resolved at query time by running the trained propagation step over their
auxiliary neighborhood; a simpler baseline instead pools the translation-
implied positions of the neighbors (head + relation, or tail - relation).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .kg import KnowledgeGraph, LabeledTriplet, Triplet
from .model import (
    GraphModel,
    InferenceError,
    NeighborSampler,
    NeighborTable,
    pool,
    score_vectors,
)

_DIR_HEAD = 0
_DIR_TAIL = 1


@dataclass
class ThresholdTable:
    """Per-relation score cutoffs plus a fallback for unseen relations."""

    per_relation: dict[int, float]
    global_threshold: float

    def threshold_of(self, relation: int) -> float:
        return self.per_relation.get(relation, self.global_threshold)

    def digest(self) -> str:
        payload = repr(sorted(self.per_relation.items())) + repr(self.global_threshold)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def _best_threshold(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Smallest threshold maximizing accuracy of ``score < threshold``.

    Candidates are the minimum score (predict nothing positive), midpoints
    between consecutive distinct scores, and +inf (predict everything
    positive); scanned in ascending order so the first maximum wins.
    """
    distinct = np.unique(scores)
    candidates = np.concatenate(
        [[distinct[0]], (distinct[:-1] + distinct[1:]) / 2.0, [np.inf]]
    )
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    y = labels[order].astype(np.int64)
    pos_below = np.concatenate([[0], np.cumsum(y)])
    total_neg = int((1 - y).sum())
    idx = np.searchsorted(sorted_scores, candidates, side="left")
    neg_below = idx - pos_below[idx]
    correct = pos_below[idx] + (total_neg - neg_below)
    best = int(np.argmax(correct))
    return float(candidates[best]), float(correct[best] / len(scores))


def tune_thresholds(
    validation: Sequence[LabeledTriplet],
    scorer: Callable[[Sequence[Triplet]], np.ndarray],
) -> ThresholdTable:
    """Per-relation thresholds maximizing validation accuracy.

    Relations absent from the validation set fall back to the single
    threshold that is optimal over the pooled validation scores.
    """
    if not validation:
        raise ValueError("cannot tune thresholds on an empty validation set")
    triplets = [lt.triplet for lt in validation]
    scores = np.asarray(scorer(triplets), dtype=float)
    labels = np.array([lt.label for lt in validation], dtype=bool)
    global_thr, _ = _best_threshold(scores, labels)
    relations = np.array([t.relation for t in triplets])
    per: dict[int, float] = {}
    for r in sorted(set(relations.tolist())):
        mask = relations == r
        per[r], _ = _best_threshold(scores[mask], labels[mask])
    return ThresholdTable(per, global_thr)


def classify(triplet: Triplet, thresholds: ThresholdTable, score: float) -> bool:
    """Positive iff the score is strictly below the relation's threshold."""
    return score < thresholds.threshold_of(triplet.relation)


def accuracy(
    test_set: Sequence[LabeledTriplet], classifier: Callable[[Triplet], bool]
) -> float:
    if not test_set:
        raise ValueError("cannot compute accuracy of an empty test set")
    correct = sum(1 for lt in test_set if classifier(lt.triplet) == lt.label)
    return correct / len(test_set)


# ---------------------------------------------------------------------------
# vector resolution

@dataclass
class OokbContext:
    """Everything needed to resolve vectors when auxiliary triplets exist.

    The combined neighbor table spans training plus auxiliary triplets, with
    embedding-less entities (the OOKB set and anything beyond the trained
    vocabulary) excluded from neighbor lists so that intermediate propagation
    steps only ever touch entities that have base vectors.
    """

    train: KnowledgeGraph
    aux: list[Triplet]
    ookb_entities: frozenset[int]
    model: GraphModel
    sampler_seed: int = 0
    table: NeighborTable = field(init=False)
    sampler: NeighborSampler = field(init=False)

    def __post_init__(self):
        self.ookb_entities = frozenset(self.ookb_entities)
        for t in self.aux:
            n = (t.head in self.ookb_entities) + (t.tail in self.ookb_entities)
            if n != 1:
                raise ValueError(f"auxiliary triplet must bridge exactly one OOKB entity, got {n}: {t}")
        rowless = {
            e
            for t in self.aux
            for e in (t.head, t.tail)
            if e >= self.model.n_entities
        }
        exclude = set(self.ookb_entities) | rowless
        self.table = NeighborTable(
            self.model.n_entities, self.train.triplets, extra=self.aux, exclude=exclude
        )
        self.sampler = NeighborSampler(
            self.table, self.model.cfg.neighbor_cap, seed=[self.sampler_seed]
        )


def ookb_vector(u: int, ctx: OokbContext) -> np.ndarray:
    """Vector of an OOKB entity from its auxiliary neighborhood, no retraining.

    Runs the trained propagation step over the combined graph; the entity's
    own base row (which does not exist) is never touched.
    """
    if u not in ctx.ookb_entities:
        raise InferenceError(f"entity {u} is not in the OOKB set")
    if ctx.table.degree(u) == 0:
        raise InferenceError(f"OOKB entity {u} has no auxiliary triplet")
    if ctx.model.cfg.depth == 0:
        raise InferenceError(
            "the trained model has no propagation step; use the pooled baseline"
        )
    return ctx.model.propagate(u, ctx.table, training=False, sampler=ctx.sampler)


def baseline_ookb_vector(
    u: int,
    ctx: OokbContext,
    pooling: str,
    raw_neighbors: bool = False,
) -> np.ndarray:
    """Pooled translation-implied position of an OOKB entity.

    A neighbor arriving as the head of (h, r, u) contributes v_h + v_r (the
    position the translation geometry implies for u); a neighbor arriving as
    the tail of (u, r, t) contributes v_t - v_r. ``raw_neighbors`` pools the
    neighbors' own vectors instead.
    """
    if ctx.table.degree(u) == 0:
        raise InferenceError(f"OOKB entity {u} has no auxiliary triplet")
    nbr, rel, dirs = ctx.table.records[u]
    cap = ctx.model.cfg.neighbor_cap
    if len(nbr) > cap:
        picked = ctx.sampler.indices(u)
        nbr, rel, dirs = nbr[picked], rel[picked], dirs[picked]
    ent = ctx.model.entities.data
    relv = ctx.model.relations.data
    if raw_neighbors:
        contributions = ent[nbr]
    else:
        signs = np.where(dirs == _DIR_HEAD, 1.0, -1.0)[:, None]
        contributions = ent[nbr] + signs * relv[rel]
    return pool(list(contributions), pooling)


def propagated_vectors(
    model: GraphModel,
    table: NeighborTable | None,
    ids: Iterable[int],
    sampler: NeighborSampler | None = None,
    batch_size: int = 1024,
) -> dict[int, np.ndarray]:
    """Inference-mode vectors for many entities, computed in batches."""
    ids = np.unique(np.fromiter(ids, dtype=np.intp))
    out: dict[int, np.ndarray] = {}
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        vecs = model.propagate_batch(chunk, table, training=False, sampler=sampler)
        for e, v in zip(chunk, vecs.data):
            out[int(e)] = v
    return out


def make_scorer(
    model: GraphModel,
    vectors: dict[int, np.ndarray],
) -> Callable[[Sequence[Triplet]], np.ndarray]:
    """Score triplets from a resolved vector dictionary."""

    def scorer(triplets: Sequence[Triplet]) -> np.ndarray:
        out = np.empty(len(triplets))
        relv = model.relations.data
        p = model.cfg.norm_p
        for i, t in enumerate(triplets):
            out[i] = score_vectors(vectors[t.head], relv[t.relation], vectors[t.tail], p)
        return out

    return scorer


def _entities_in(labeled: Iterable[LabeledTriplet]) -> set[int]:
    out: set[int] = set()
    for lt in labeled:
        out.add(lt.triplet.head)
        out.add(lt.triplet.tail)
    return out


# ---------------------------------------------------------------------------
# evaluation protocols

def evaluate_standard(
    train_graph: KnowledgeGraph,
    validation: Sequence[LabeledTriplet],
    test: Sequence[LabeledTriplet],
    model: GraphModel,
    *,
    per_relation: bool = True,
    sampler_seed: int = 0,
    dataset_name: str = "standard",
    thresholds: ThresholdTable | None = None,
) -> dict:
    """Threshold tuning on validation followed by test accuracy."""
    table = None
    sampler = None
    if model.cfg.depth > 0:
        table = NeighborTable(model.n_entities, train_graph.triplets)
        sampler = NeighborSampler(table, model.cfg.neighbor_cap, seed=[sampler_seed])
    if not test:
        raise ValueError("empty test set")
    needed = _entities_in(validation) | _entities_in(test)
    vectors = propagated_vectors(model, table, needed, sampler)
    scorer = make_scorer(model, vectors)
    if thresholds is None:
        thresholds = tune_thresholds(validation, scorer)
        if not per_relation:
            thresholds = ThresholdTable({}, thresholds.global_threshold)
    test_triplets = [lt.triplet for lt in test]
    scores = scorer(test_triplets)
    correct = sum(
        1
        for lt, s in zip(test, scores)
        if classify(lt.triplet, thresholds, s) == lt.label
    )
    report = {
        "dataset": dataset_name,
        "method": "standard",
        "pooling": model.cfg.pooling if model.cfg.depth > 0 else "-",
        "accuracy": correct / len(test),
        "n_test": len(test),
        "threshold_digest": thresholds.digest(),
    }
    return report, thresholds


def evaluate_ookb(
    split,
    model: GraphModel,
    *,
    method: str = "proposed",
    pooling: str | None = None,
    raw_neighbors: bool = False,
    per_relation: bool = True,
    sampler_seed: int = 0,
    dataset_name: str = "ookb",
    thresholds: ThresholdTable | None = None,
) -> dict:
    """Classify the OOKB test triplets of a split.

    ``method="proposed"`` resolves OOKB entities with the trained propagation
    step (the model's own pooling); ``method="baseline"`` pools translation-
    implied neighbor positions with the given ``pooling``. Thresholds are
    tuned on the split's validation set (which contains no OOKB entities)
    unless supplied.
    """
    if method not in ("proposed", "baseline"):
        raise ValueError(f"unknown method {method!r}")
    if not split.test:
        raise ValueError("OOKB split has an empty test set")
    ctx = OokbContext(split.train, list(split.aux), frozenset(split.ookb_entities),
                      model, sampler_seed=sampler_seed)

    known_needed = _entities_in(split.validation) | {
        e
        for lt in split.test
        for e in (lt.triplet.head, lt.triplet.tail)
        if e not in ctx.ookb_entities and e < model.n_entities
    }
    table = ctx.table if model.cfg.depth > 0 else None
    vectors = propagated_vectors(model, table, known_needed, ctx.sampler)

    ookb_needed = {
        e
        for lt in split.test
        for e in (lt.triplet.head, lt.triplet.tail)
        if e in ctx.ookb_entities or e >= model.n_entities
    }
    for u in sorted(ookb_needed):
        if u not in ctx.ookb_entities:
            raise InferenceError(f"entity {u} has no embedding and is not in the OOKB set")
        if method == "proposed":
            vectors[u] = ookb_vector(u, ctx)
        else:
            if pooling is None:
                raise ValueError("baseline evaluation needs an explicit pooling")
            vectors[u] = baseline_ookb_vector(u, ctx, pooling, raw_neighbors)

    scorer = make_scorer(model, vectors)
    if thresholds is None:
        thresholds = tune_thresholds(split.validation, scorer)
        if not per_relation:
            thresholds = ThresholdTable({}, thresholds.global_threshold)
    test_triplets = [lt.triplet for lt in split.test]
    scores = scorer(test_triplets)
    correct = sum(
        1
        for lt, s in zip(split.test, scores)
        if classify(lt.triplet, thresholds, s) == lt.label
    )
    report = {
        "dataset": dataset_name,
        "method": method,
        "pooling": model.cfg.pooling if method == "proposed" else pooling,
        "accuracy": correct / len(split.test),
        "n_test": len(split.test),
        "threshold_digest": thresholds.digest(),
    }
    return report, thresholds
