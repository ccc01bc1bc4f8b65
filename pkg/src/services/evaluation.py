"""
Open-set retrieval evaluation (mAP and CMC) and cosine-distance margin analysis.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.models.sample import RetrievalSplit, stack_samples
from src.utils.numerics import cosine_matrix

logger = logging.getLogger(__name__)

CMC_RANKS = (1, 5, 10)


@dataclass
class RetrievalResult:
    """Per-query AP, the averaged CMC curve and its summary numbers"""
    average_precisions: np.ndarray
    cmc: np.ndarray
    mAP: float
    rank1: float
    num_valid_queries: int
    num_excluded_queries: int = 0

    def rank(self, k: int) -> float:
        """CMC at rank k (1-based); ranks past the curve end repeat its last value"""
        if k < 1:
            raise ValueError(f"rank must be >= 1, got {k}")
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_dict(self) -> Dict[str, float]:
        summary = {'mAP': self.mAP, 'num_valid_queries': self.num_valid_queries}
        for k in CMC_RANKS:
            summary[f'rank{k}'] = self.rank(k)
        return summary


def average_precision(relevance: Sequence[int]) -> float:
    """AP of a ranked relevance list: mean precision at each relevant hit"""
    relevance = np.asarray(relevance, dtype=np.float64)
    num_relevant = relevance.sum()
    if num_relevant == 0:
        raise ValueError("no relevant items in ranking")
    hits = np.cumsum(relevance)
    precision = hits / np.arange(1, relevance.size + 1)
    return float(np.sum(precision * relevance) / num_relevant)


def evaluate_retrieval(query_embeddings: np.ndarray, query_ids: Sequence[int], query_cams: Sequence[int],
                       gallery_embeddings: np.ndarray, gallery_ids: Sequence[int], gallery_cams: Sequence[int],
                       max_rank: int = 10) -> RetrievalResult:
    """Rank the gallery for each query by descending cosine similarity.

    Gallery items sharing both identity and camera with the query are removed
    from that query's ranking. Ties keep gallery order.
    """
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    similarities = cosine_matrix(query_embeddings, gallery_embeddings)
    num_q, num_g = similarities.shape
    if num_g < max_rank:
        logger.debug(f"Gallery has {num_g} items; CMC curve padded to rank {max_rank}")

    all_ap: List[float] = []
    all_cmc: List[np.ndarray] = []
    excluded = 0
    for q in range(num_q):
        order = np.argsort(-similarities[q], kind='stable')
        junk = (gallery_ids[order] == query_ids[q]) & (gallery_cams[order] == query_cams[q])
        matches = (gallery_ids[order] == query_ids[q])[~junk].astype(np.int64)
        if not matches.any():
            excluded += 1
            continue
        cmc = np.minimum(np.cumsum(matches), 1).astype(np.float64)
        if cmc.size < max_rank:
            cmc = np.concatenate([cmc, np.full(max_rank - cmc.size, cmc[-1])])
        all_cmc.append(cmc[:max_rank])
        all_ap.append(average_precision(matches))

    if excluded:
        logger.warning(f"Excluded {excluded}/{num_q} queries without a valid cross-camera match")
    if not all_ap:
        raise ValueError("all queries excluded: no query identity appears in the gallery under another camera")

    cmc = np.mean(np.stack(all_cmc), axis=0)
    ap = np.asarray(all_ap)
    return RetrievalResult(average_precisions=ap, cmc=cmc, mAP=float(ap.mean()), rank1=float(cmc[0]),
                           num_valid_queries=len(all_ap), num_excluded_queries=excluded)


@dataclass
class MarginReport:
    """Cosine-distance statistics of same-identity cross-camera vs different-identity pairs"""
    same_identity_mean: float
    different_identity_mean: float
    same_identity_counts: np.ndarray
    different_identity_counts: np.ndarray
    bin_edges: np.ndarray = field(repr=False)

    def to_dict(self) -> Dict[str, float]:
        return {
            'same_identity_mean': self.same_identity_mean,
            'different_identity_mean': self.different_identity_mean,
        }

    def histogram_frame(self) -> pd.DataFrame:
        """One row per bin, for external plotting"""
        return pd.DataFrame({
            'bin_low': self.bin_edges[:-1],
            'bin_high': self.bin_edges[1:],
            'same_identity': self.same_identity_counts,
            'different_identity': self.different_identity_counts,
        })


def margin_report(embeddings: np.ndarray, identities: Sequence[int], cameras: Sequence[int],
                  bins: int = 20) -> MarginReport:
    """Cosine distance (1 - cosine similarity) over all qualifying unordered pairs"""
    identities = np.asarray(identities)
    cameras = np.asarray(cameras)
    distances = 1.0 - cosine_matrix(embeddings, embeddings)
    upper = np.triu(np.ones_like(distances, dtype=bool), k=1)
    same_id = identities[:, None] == identities[None, :]
    cross_cam = cameras[:, None] != cameras[None, :]

    same = distances[upper & same_id & cross_cam]
    different = distances[upper & ~same_id]
    if same.size == 0 or different.size == 0:
        raise ValueError("no qualifying pairs: need a same-identity cross-camera pair and a different-identity pair")

    edges = np.linspace(0.0, 2.0, bins + 1)
    same_counts, _ = np.histogram(same, bins=edges)
    diff_counts, _ = np.histogram(different, bins=edges)
    return MarginReport(same_identity_mean=float(same.mean()), different_identity_mean=float(different.mean()),
                        same_identity_counts=same_counts, different_identity_counts=diff_counts, bin_edges=edges)


def summarize_splits(results: Dict[str, RetrievalResult]) -> Dict[str, float]:
    """Mean of each summary metric across evaluation splits"""
    if not results:
        return {}
    frame = pd.DataFrame([r.to_dict() for r in results.values()])
    return {column: float(value) for column, value in frame.mean().items()}


def evaluate_split(embed: Callable[[np.ndarray], np.ndarray], split: RetrievalSplit, max_rank: int = 10, bins: Optional[int] = None):
    """Evaluate a RetrievalSplit with an embedding function over [N,C,H,W] stacks.

    Returns (RetrievalResult, MarginReport or None).
    """
    q_images, q_ids, q_cams = stack_samples(split.query)
    g_images, g_ids, g_cams = stack_samples(split.gallery)
    q_emb = embed(q_images)
    g_emb = embed(g_images)
    result = evaluate_retrieval(q_emb, q_ids, q_cams, g_emb, g_ids, g_cams, max_rank=max_rank)
    margins = None
    if bins is not None:
        margins = margin_report(np.concatenate([q_emb, g_emb]), np.concatenate([q_ids, g_ids]),
                                np.concatenate([q_cams, g_cams]), bins=bins)
    return result, margins
