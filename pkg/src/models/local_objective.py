"""
Client-side objective: identity, batch-hard triplet and semantic alignment
losses over the original and stylized views, each with a closed-form backward
pass, plus the PK batch sampler and the momentum SGD optimizer.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from src.models.encoders import (
    ClassifierHead,
    EncoderParams,
    encode_images,
    encoder_backward,
    head_backward,
    head_forward,
    prototype_matrix,
    TextPrototype,
)
from src.models.experiment import LocalObjectiveConfig
from src.utils.numerics import batch_cross_entropy, cosine_matrix, cosine_matrix_backward

logger = logging.getLogger(__name__)

VIEW_NAMES = ('orig', 'style')


class PKSampler:
    """Batches of P identities x K instances"""

    def __init__(self, identities: Sequence[int], num_identities: int, num_instances: int):
        self.identities = np.asarray(identities, dtype=np.int64)
        self.num_identities = num_identities
        self.num_instances = num_instances
        self.index = {}
        for i, y in enumerate(self.identities):
            self.index.setdefault(int(y), []).append(i)
        self.labels = sorted(self.index)
        if len(self.labels) < 2 and num_identities >= 2:
            logger.warning("Fewer than 2 identities available; triplets will have no negatives")

    @property
    def batch_size(self) -> int:
        return self.num_identities * self.num_instances

    def batches_per_epoch(self) -> int:
        return max(1, len(self.identities) // self.batch_size)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Indices of one batch"""
        p = min(self.num_identities, len(self.labels))
        chosen = rng.choice(len(self.labels), size=p, replace=False)
        batch = []
        for slot in chosen:
            pool = self.index[self.labels[slot]]
            picks = rng.choice(len(pool), size=self.num_instances, replace=len(pool) < self.num_instances)
            batch.extend(pool[j] for j in picks)
        return np.array(batch, dtype=np.int64)

    def epoch(self, rng: np.random.Generator) -> Iterator[np.ndarray]:
        for _ in range(self.batches_per_epoch()):
            yield self.sample(rng)


def loss_id(logits: np.ndarray, targets: Sequence[int],
            return_grad: bool = False):
    """Mean identity cross-entropy; targets are head column indices"""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets >= logits.shape[1]):
        raise ValueError("target outside the client's identity set")
    loss, grad = batch_cross_entropy(logits, targets)
    return (loss, grad) if return_grad else loss


def _pairwise_distances(embeddings: np.ndarray) -> np.ndarray:
    return cdist(embeddings, embeddings, metric='euclidean')


def _distance_backward(embeddings: np.ndarray, distances: np.ndarray, grad_dist: np.ndarray) -> np.ndarray:
    """dL/d(embeddings) given dL/d(D) for D_ij = ||v_i - v_j||"""
    safe = np.where(distances > 0, distances, 1.0)
    coef = np.where(distances > 0, grad_dist / safe, 0.0)
    sym = coef + coef.T
    return sym.sum(axis=1, keepdims=True) * embeddings - sym @ embeddings


def loss_tri(embeddings: np.ndarray, identities: Sequence[int], margin: float,
             mining: str = 'batch_hard', return_grad: bool = False):
    """Triplet loss with batch-hard (default) or batch-all mining"""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    identities = np.asarray(identities, dtype=np.int64)
    n = embeddings.shape[0]
    distances = _pairwise_distances(embeddings)
    same = identities[:, None] == identities[None, :]
    positive = same & ~np.eye(n, dtype=bool)
    negative = ~same

    valid = positive.any(axis=1) & negative.any(axis=1)
    excluded = int(n - valid.sum())
    if excluded:
        logger.warning(f"Excluded {excluded} anchors without a positive or a negative")
    if not valid.any():
        raise ValueError("no valid triplet anchors in batch")

    grad_dist = np.zeros_like(distances)
    if mining == 'batch_hard':
        anchors = np.flatnonzero(valid)
        d_pos = np.where(positive, distances, -np.inf)
        d_neg = np.where(negative, distances, np.inf)
        hard_pos = np.argmax(d_pos[anchors], axis=1)
        hard_neg = np.argmin(d_neg[anchors], axis=1)
        terms = distances[anchors, hard_pos] - distances[anchors, hard_neg] + margin
        active = terms > 0
        loss = float(np.sum(np.maximum(terms, 0.0)) / anchors.size)
        scale = active / anchors.size
        np.add.at(grad_dist, (anchors, hard_pos), scale)
        np.add.at(grad_dist, (anchors, hard_neg), -scale)
    elif mining == 'batch_all':
        mask = positive[:, :, None] & negative[:, None, :]
        terms = distances[:, :, None] - distances[:, None, :] + margin
        count = int(mask.sum())
        active = mask & (terms > 0)
        loss = float(np.sum(np.where(active, terms, 0.0)) / count)
        grad_dist += active.sum(axis=2) / count
        grad_dist -= active.sum(axis=1) / count
    else:
        raise ValueError(f"unknown triplet mining mode: {mining}")

    if not return_grad:
        return loss
    return loss, _distance_backward(embeddings, distances, grad_dist)


def loss_align(embeddings: np.ndarray, prototypes: np.ndarray, targets: Sequence[int],
               temperature: float, return_grad: bool = False):
    """Cross-entropy over cosine similarities to every client prototype.

    prototypes: frozen unit-norm [|Y_k|, D] matrix; targets: row of each sample's own prototype.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets >= prototypes.shape[0]):
        raise ValueError("missing prototype for target identity")
    sims = cosine_matrix(embeddings, prototypes)
    loss, grad_logits = batch_cross_entropy(sims / temperature, targets)
    if not return_grad:
        return loss
    grad_sims = grad_logits / temperature
    return loss, cosine_matrix_backward(embeddings, prototypes, grad_sims)


@dataclass
class AnchorSet:
    """Frozen prototypes of one client, row-aligned with `identities`"""
    identities: List[int]
    matrix: np.ndarray

    @classmethod
    def from_prototypes(cls, prototypes: Sequence[TextPrototype]) -> 'AnchorSet':
        identities, matrix = prototype_matrix(prototypes)
        return cls(identities=identities, matrix=matrix)

    def rows(self, labels: Sequence[int]) -> np.ndarray:
        lookup = {y: i for i, y in enumerate(self.identities)}
        try:
            return np.array([lookup[int(y)] for y in labels], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"missing prototype for identity {e.args[0]}") from None


@dataclass
class ObjectiveResult:
    loss: float
    encoder_grad: EncoderParams
    head_grad: ClassifierHead
    parts: Dict[str, float]


def local_objective(params: EncoderParams, head: ClassifierHead,
                    images: np.ndarray, stylized: Optional[np.ndarray],
                    identities: Sequence[int], anchors: Optional[AnchorSet],
                    config: LocalObjectiveConfig) -> ObjectiveResult:
    """Sum over views of loss_id + loss_tri + lambda * loss_align with gradients for encoder and head"""
    identities = np.asarray(identities, dtype=np.int64)
    columns = head.target_columns(identities)
    use_align = config.use_alignment and anchors is not None
    anchor_rows = anchors.rows(identities) if use_align else None

    views = [('orig', images)]
    if config.use_stylized_view and stylized is not None:
        views.append(('style', stylized))

    total = 0.0
    parts: Dict[str, float] = {}
    encoder_grad = params.zeros_like()
    head_grad = head.zeros_like()
    for name, view in views:
        embeddings, cache = encode_images(params, view)
        logits = head_forward(head, embeddings)
        l_id, g_logits = loss_id(logits, columns, return_grad=True)
        g_head, g_emb = head_backward(head, embeddings, g_logits)
        l_tri, g_tri = loss_tri(embeddings, identities, config.margin, config.triplet_mining, return_grad=True)
        g_emb = g_emb + g_tri
        view_loss = l_id + l_tri
        parts[f'id_{name}'] = l_id
        parts[f'tri_{name}'] = l_tri
        if use_align:
            l_align, g_align = loss_align(embeddings, anchors.matrix, anchor_rows,
                                          config.temperature, return_grad=True)
            g_emb = g_emb + config.lambda_align * g_align
            view_loss += config.lambda_align * l_align
            parts[f'align_{name}'] = l_align
        total += view_loss

        g_enc = encoder_backward(params, cache, g_emb)
        for key, arr in g_enc.arrays().items():
            encoder_grad.arrays()[key][...] += arr
        head_grad.weight += g_head.weight
        head_grad.bias += g_head.bias

    return ObjectiveResult(loss=total, encoder_grad=encoder_grad, head_grad=head_grad, parts=parts)


class MomentumSGD:
    """SGD with momentum and L2 weight decay applied to the gradient"""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float):
        """In-place update of every array in params"""
        for name, value in params.items():
            grad = grads[name] + self.weight_decay * value
            if self.momentum > 0:
                buf = self.buffers.get(name)
                if buf is None:
                    buf = grad.copy()
                else:
                    buf = self.momentum * buf + grad
                self.buffers[name] = buf
                grad = buf
            value -= lr * grad
