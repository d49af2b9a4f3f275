"""Exact bidirectional retrieval metrics: R@k and mAP@10."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import gradcore as gc
from .dataio import PairedFeatures
from .errors import DataError
from .losses import Modality
from .model import ClapModel, TeacherSnapshot

DEFAULT_KS = (1, 5, 10)
UNIT_NORM_TOL = 1e-9

RelevanceMap = Mapping[str, set]
Rankings = Mapping[str, Sequence[str]]


class Direction(str, Enum):
    AUDIO_TO_TEXT = "audio_to_text"
    TEXT_TO_AUDIO = "text_to_audio"


@dataclass
class EmbeddingSet:
    ids: list[str]
    matrix: np.ndarray
    modality: Modality

    def __post_init__(self):
        self.ids = list(self.ids)
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if len(set(self.ids)) != len(self.ids):
            raise DataError("embedding ids must be unique")
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise DataError(f"matrix shape {self.matrix.shape} does not match {len(self.ids)} ids")
        if self.ids:
            norms = gc.row_norms(self.matrix)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise DataError("embedding rows must be unit norm")
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, id_: str) -> np.ndarray:
        return self.matrix[self.ids.index(id_)]


def score_candidates(query: np.ndarray, candidates: EmbeddingSet) -> list[tuple[str, float]]:
    """(id, cosine) pairs sorted by descending similarity, ties by ascending id."""
    if len(candidates) == 0:
        raise DataError("candidate set is empty")
    query = np.asarray(query, dtype=np.float64).reshape(-1, 1)
    sims = gc.matmul(candidates.matrix, query)[:, 0]
    order = np.lexsort((candidates._id_rank, -sims))
    return [(candidates.ids[j], float(sims[j])) for j in order]


def rank_candidates(query: np.ndarray, candidates: EmbeddingSet) -> list[str]:
    return [cid for cid, _ in score_candidates(query, candidates)]


def recall_at_k(rankings: Rankings, relevance: RelevanceMap, k: int) -> float:
    """Fraction of queries with at least one relevant id in the top ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not rankings:
        raise DataError("no queries")
    hits = sum(1 for q in sorted(rankings) if relevance[q].intersection(rankings[q][:k]))
    return hits / len(rankings)


def average_precision_at_10(ranking: Sequence[str], relevant: set) -> float:
    hits = 0
    total = 0.0
    for position, cid in enumerate(ranking[:10], start=1):
        if cid in relevant:
            hits += 1
            total += hits / position
    return total / min(len(relevant), 10)


def map_at_10(rankings: Rankings, relevance: RelevanceMap) -> float:
    if not rankings:
        raise DataError("no queries")
    total = 0.0
    for q in sorted(rankings):
        total += average_precision_at_10(rankings[q], relevance[q])
    return total / len(rankings)


@dataclass
class MetricsReport:
    direction: Direction
    r_at: dict[int, float]
    map_at_10: float
    num_queries: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"direction": Direction(self.direction).value}
        for k in sorted(self.r_at):
            out[f"r_at_{k}"] = self.r_at[k]
        out["map_at_10"] = self.map_at_10
        out["num_queries"] = self.num_queries
        return out

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            lines.append(f"{key}={value:.4f}" if isinstance(value, float) else f"{key}={value}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def percent_line(self) -> str:
        parts = [f"R@{k} {100 * self.r_at[k]:.1f}" for k in sorted(self.r_at)]
        parts.append(f"mAP@10 {100 * self.map_at_10:.1f}")
        return f"{Direction(self.direction).value}: " + "  ".join(parts)


def caption_relevance(ids: Sequence[str], captions: Sequence[str]) -> dict[str, set]:
    """Each item is relevant to every item sharing its exact caption (itself included)."""
    by_caption: dict[str, set] = {}
    for i, c in zip(ids, captions):
        by_caption.setdefault(c, set()).add(i)
    return {i: by_caption[c] for i, c in zip(ids, captions)}


def retrieve_all(queries: EmbeddingSet, candidates: EmbeddingSet) -> dict[str, list[str]]:
    return {q: rank_candidates(queries.matrix[i], candidates) for i, q in enumerate(queries.ids)}


def metrics_from_rankings(direction: Direction, rankings: Rankings, relevance: RelevanceMap,
                          ks: Iterable[int] = DEFAULT_KS) -> MetricsReport:
    for q in rankings:
        if not relevance.get(q):
            raise DataError(f"query {q!r} has no relevant candidate")
    r_at = {k: recall_at_k(rankings, relevance, k) for k in ks}
    return MetricsReport(Direction(direction), r_at, map_at_10(rankings, relevance), len(rankings))


def evaluate_embeddings(speech: EmbeddingSet, text: EmbeddingSet, relevance: RelevanceMap,
                        ks: Iterable[int] = DEFAULT_KS,
                        directions: Iterable[Direction] = tuple(Direction)) -> dict:
    """Relevance maps a speech id to its relevant text ids and vice versa (ids are shared)."""
    ks = tuple(ks)
    reports = {}
    for d in directions:
        d = Direction(d)
        queries, candidates = (speech, text) if d is Direction.AUDIO_TO_TEXT else (text, speech)
        reports[d] = metrics_from_rankings(d, retrieve_all(queries, candidates), relevance, ks)
    return reports


def embed_dataset(model: ClapModel | TeacherSnapshot,
                  data: PairedFeatures) -> tuple[EmbeddingSet, EmbeddingSet]:
    return (EmbeddingSet(data.ids, model.embed_speech(data.speech), Modality.SPEECH),
            EmbeddingSet(data.ids, model.embed_text(data.text), Modality.TEXT))


def evaluate(model: ClapModel | TeacherSnapshot, data: PairedFeatures,
             ks: Iterable[int] = DEFAULT_KS,
             directions: Iterable[Direction] = tuple(Direction)) -> dict:
    """Encode every pair and score retrieval in the requested directions."""
    if len(data) == 0:
        raise DataError("evaluation set is empty")
    speech, text = embed_dataset(model, data)
    return evaluate_embeddings(speech, text, caption_relevance(data.ids, data.captions),
                               ks, directions)
