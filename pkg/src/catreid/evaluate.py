"""Leave-one-out retrieval evaluation: ranking, AP, mAP, CMC, reports.

Every test image serves once as query against all remaining images.
Distances are Euclidean on L2-normalized embeddings (order-equivalent to
cosine).  Queries whose entity has no other image are skipped and counted,
not scored as zero.  Ties are broken by a storage-order-independent key
(record id when available, gallery index otherwise) so metric values do
not depend on how the gallery happens to be laid out.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .data import Dataset

DEFAULT_MAX_RANK = 20


@dataclass(frozen=True)
class EvalProtocol:
    metric: str = "euclidean-on-normalized"
    gallery: str = "leave-one-out"
    max_rank: int = DEFAULT_MAX_RANK

    def __post_init__(self):
        if self.metric != "euclidean-on-normalized":
            raise ValueError(f"unsupported metric {self.metric!r}")
        if self.gallery != "leave-one-out":
            raise ValueError(f"unsupported gallery protocol {self.gallery!r}")
        if self.max_rank < 1:
            raise ValueError("max_rank must be at least 1")


@dataclass
class QueryResult:
    query_index: int
    query_id: str
    query_entity: str
    ranking: list[int]          # gallery indices into the full record list
    distances: list[float]
    is_match: list[bool]
    average_precision: float


@dataclass
class EvalReport:
    map_score: float
    cmc: list[float]            # cmc[0] is Rank-1
    per_query: list[QueryResult]
    protocol: EvalProtocol
    model_id: str
    num_queries: int
    num_skipped: int
    skipped_ids: list[str] = field(default_factory=list)

    @property
    def rank1(self) -> float:
        return self.cmc[0] if self.cmc else float("nan")

    def to_json(self, path: str | Path) -> None:
        payload = {
            "mAP": self.map_score,
            "cmc": self.cmc,
            "rank1": self.rank1,
            "num_queries": self.num_queries,
            "num_skipped": self.num_skipped,
            "skipped_ids": self.skipped_ids,
            "protocol": asdict(self.protocol),
            "model_id": self.model_id,
            "per_query": [asdict(q) for q in self.per_query],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)

    def write_rankings_csv(self, path: str | Path,
                           ids: Optional[Sequence[str]] = None) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query_id", "rank", "gallery_id", "distance",
                             "is_match"])
            for q in self.per_query:
                for rank, (g, dist, match) in enumerate(
                        zip(q.ranking, q.distances, q.is_match), start=1):
                    gallery_id = ids[g] if ids is not None else str(g)
                    writer.writerow([q.query_id, rank, gallery_id,
                                     f"{dist:.9e}", int(match)])


def l2_normalize(embeddings: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding cannot be normalized")
    return embeddings / norms


def rank_gallery(query_emb: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending distance; ties by ascending index."""
    if gallery.shape[0] < 1:
        raise ValueError("gallery must hold at least one embedding")
    if np.linalg.norm(query_emb) == 0 or np.any(
            np.linalg.norm(gallery, axis=1) == 0):
        raise ValueError("zero-norm embedding cannot be ranked")
    dist = np.linalg.norm(gallery - query_emb[None, :], axis=1)
    return np.argsort(dist, kind="stable")


def average_precision(ranking: Sequence[int], positive_set) -> float:
    """AP = mean over positive hits of (hits so far / position)."""
    positives = set(positive_set)
    if not positives:
        raise ValueError("positive set is empty; query should be skipped")
    if not positives.issubset(set(ranking)):
        raise ValueError("positive set contains indices outside the gallery")
    hits = 0
    precision_sum = 0.0
    for pos, idx in enumerate(ranking, start=1):
        if idx in positives:
            hits += 1
            precision_sum += hits / pos
    return precision_sum / len(positives)


def evaluate_embeddings(embeddings: np.ndarray, entities: Sequence[str],
                        protocol: EvalProtocol = EvalProtocol(),
                        ids: Optional[Sequence[str]] = None,
                        model_id: str = "") -> EvalReport:
    """Score a leave-one-out retrieval pass over pre-computed embeddings."""
    n = embeddings.shape[0]
    if n == 0:
        raise ValueError("cannot evaluate an empty embedding set")
    if len(entities) != n:
        raise ValueError("one entity label per embedding required")
    if ids is None:
        ids = [str(i) for i in range(n)]
    normalized = l2_normalize(np.asarray(embeddings, dtype=np.float64))

    # Row-wise distance computation keeps every d(q, g) a function of the
    # two vectors alone, so metric values are bitwise-stable under gallery
    # storage permutations (a blocked matmul would not be).
    dist = np.empty((n, n), dtype=np.float64)
    for q in range(n):
        diff = normalized - normalized[q]
        dist[q] = np.sqrt(np.sum(diff * diff, axis=1))

    entities = list(entities)
    labels = np.asarray(entities)
    max_rank = min(protocol.max_rank, n - 1) if n > 1 else 1

    per_query: list[QueryResult] = []
    skipped: list[str] = []
    cmc_hits = np.zeros(max_rank, dtype=np.int64)
    for q in range(n):
        gallery = np.array([g for g in range(n) if g != q])
        if gallery.size == 0:
            skipped.append(ids[q])
            continue
        positives = gallery[labels[gallery] == labels[q]]
        if positives.size == 0:
            skipped.append(ids[q])
            continue
        # storage-order-independent tie break: distance first, then id
        gallery_ids = [ids[g] for g in gallery]
        order = sorted(range(len(gallery)),
                       key=lambda j: (dist[q, gallery[j]], gallery_ids[j]))
        ranking = [int(gallery[j]) for j in order]
        matches = [labels[g] == labels[q] for g in ranking]
        ap = average_precision(ranking, set(int(p) for p in positives))
        first_hit = matches.index(True)
        if first_hit < max_rank:
            cmc_hits[first_hit:] += 1
        per_query.append(QueryResult(
            query_index=q,
            query_id=ids[q],
            query_entity=str(labels[q]),
            ranking=ranking,
            distances=[float(dist[q, g]) for g in ranking],
            is_match=matches,
            average_precision=ap,
        ))

    if not per_query:
        raise ValueError("no valid queries: every entity has a single image")
    num_queries = len(per_query)
    cmc = (cmc_hits / num_queries).tolist()
    # canonical accumulation order so the mean is permutation-stable
    aps = np.sort(np.array([q.average_precision for q in per_query]))
    map_score = float(np.mean(aps))
    return EvalReport(
        map_score=map_score,
        cmc=cmc,
        per_query=per_query,
        protocol=protocol,
        model_id=model_id,
        num_queries=num_queries,
        num_skipped=len(skipped),
        skipped_ids=skipped,
    )


def evaluate(checkpoint_path: str | Path, dataset: Dataset,
             protocol: EvalProtocol = EvalProtocol(),
             image_root: str | Path = ".",
             batch_size: int = 32) -> EvalReport:
    """Embed a test dataset with the F-Stream and score it leave-one-out."""
    from .inputs import embed_records
    from .network import StreamConfig, load_inference_model

    if len(dataset) == 0:
        raise ValueError("test dataset is empty")
    if not dataset.entity_of:
        raise ValueError("dataset has no entity labels; derive entities first")
    model, payload = load_inference_model(checkpoint_path)
    stream = StreamConfig(**payload["stream_config"])
    embeddings = embed_records(dataset.records, model, stream,
                               Path(image_root), batch_size=batch_size)
    entities = [dataset.entity_of[i] for i in range(len(dataset))]
    ids = [rec.image_path for rec in dataset.records]
    return evaluate_embeddings(embeddings, entities, protocol, ids=ids,
                               model_id=str(checkpoint_path))


def render_ranking_sheet(report: EvalReport, dataset: Dataset,
                         query_index: int, k: int, out_path: str | Path,
                         image_root: str | Path = ".",
                         tile_size: int = 160) -> None:
    """Contact sheet: query leftmost, then top-k gallery tiles.

    Matching tiles get a green border, mismatches a red one with an X mark.
    """
    from .inputs import crop_bbox, load_rgb

    result = next((q for q in report.per_query if q.query_index == query_index),
                  None)
    if result is None:
        raise ValueError(f"query index {query_index} not in report "
                         "(it may have been skipped)")
    if k > len(result.ranking):
        raise ValueError(f"k={k} exceeds gallery size {len(result.ranking)}")

    needed = [query_index] + result.ranking[:k]
    missing = [str(Path(image_root) / dataset.records[i].image_path)
               for i in needed
               if not (Path(image_root) / dataset.records[i].image_path).is_file()]
    if missing:
        raise FileNotFoundError("missing image files: " + ", ".join(missing))

    def tile(idx: int, border, label: str, mark_mismatch: bool = False):
        rec = dataset.records[idx]
        img = load_rgb(Path(image_root) / rec.image_path)
        crop, _ = crop_bbox(img, rec.bbox)
        t = cv2.resize(crop, (tile_size, tile_size),
                       interpolation=cv2.INTER_AREA)
        cv2.rectangle(t, (0, 0), (tile_size - 1, tile_size - 1), border, 6)
        if mark_mismatch:
            cv2.line(t, (8, 8), (40, 40), border, 4)
            cv2.line(t, (40, 8), (8, 40), border, 4)
        cv2.putText(t, label, (6, tile_size - 8), cv2.FONT_HERSHEY_SIMPLEX,
                    0.45, (255, 255, 255), 1, cv2.LINE_AA)
        return t

    tiles = [tile(query_index, (255, 255, 0), "Q " + result.query_entity)]
    for rank, g in enumerate(result.ranking[:k], start=1):
        match = result.is_match[rank - 1]
        color = (0, 200, 0) if match else (220, 0, 0)
        entity = dataset.entity_of.get(g, "?")
        tiles.append(tile(g, color, f"R{rank} {entity}",
                          mark_mismatch=not match))
    sheet = np.concatenate(tiles, axis=1)
    cv2.imwrite(str(out_path), cv2.cvtColor(sheet, cv2.COLOR_RGB2BGR))
