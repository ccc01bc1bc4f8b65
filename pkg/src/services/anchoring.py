"""
Camera-invariant semantic anchoring: per-identity prompt tokens are
optimized against frozen encoders with the image-to-text and text-to-image
contrastive losses plus the cross-camera consistency term, then cached as
frozen prototypes.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from src.models.encoders import (
    EncoderParams,
    PromptTokens,
    TextEncoderSurrogate,
    TextPrototype,
    cache_prototypes,
    encode_images,
)
from src.models.experiment import CsaConfig
from src.models.local_objective import PKSampler
from src.utils.numerics import l2_normalize


@dataclass
class BatchIndex:
    """Column layout of a batch.

    columns[a] is the identity whose prototype sits in similarity column a;
    sample_columns[i] is the target column of sample i. With dedup there is
    one column per distinct identity, otherwise one per sample.
    """
    identities: List[int]
    positions: Dict[int, np.ndarray]
    cameras: np.ndarray
    columns: List[int]
    sample_columns: np.ndarray

    @classmethod
    def from_labels(cls, labels: Sequence[int], cameras: Sequence[int], dedup: bool = True) -> 'BatchIndex':
        labels = np.asarray(labels, dtype=np.int64)
        identities: List[int] = []
        for y in labels:
            if int(y) not in identities:
                identities.append(int(y))
        positions = {y: np.flatnonzero(labels == y) for y in identities}
        if dedup:
            column = {y: a for a, y in enumerate(identities)}
            columns = list(identities)
            sample_columns = np.array([column[int(y)] for y in labels], dtype=np.int64)
        else:
            columns = [int(y) for y in labels]
            sample_columns = np.arange(len(labels), dtype=np.int64)
        return cls(identities=identities, positions=positions,
                   cameras=np.asarray(cameras, dtype=np.int64),
                   columns=columns, sample_columns=sample_columns)

    @property
    def batch_size(self) -> int:
        return int(self.sample_columns.shape[0])


def _check_temperature(temperature: float):
    if temperature <= 0:
        raise ValueError("temperature must be > 0")


def loss_i2t(similarities: np.ndarray, targets: Sequence[int], temperature: float,
             return_grad: bool = False):
    """Image-to-text contrastive loss, averaged over samples.

    similarities[i][a] = s(v_i, t_a); targets[i] is the column of y_i.
    """
    _check_temperature(temperature)
    sims = np.atleast_2d(np.asarray(similarities, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64)
    batch = sims.shape[0]
    logits = sims / temperature
    rows = np.arange(batch)
    loss = float(np.mean(logsumexp(logits, axis=1) - logits[rows, targets]))
    if not return_grad:
        return max(loss, 0.0)
    grad = softmax(logits, axis=1)
    grad[rows, targets] -= 1.0
    return max(loss, 0.0), grad / (temperature * batch)


def loss_t2i(similarities: np.ndarray, batch_index: BatchIndex, temperature: float,
             return_grad: bool = False):
    """Text-to-image contrastive loss, averaged over the prototype columns.

    For the column of identity y, the softmax runs over every batch sample's
    similarity to t_y and the positives are P(y).
    """
    _check_temperature(temperature)
    sims = np.atleast_2d(np.asarray(similarities, dtype=np.float64))
    grad = np.zeros_like(sims)
    total = 0.0
    for column, y in enumerate(batch_index.columns):
        members = batch_index.positions.get(y)
        if members is None or members.size == 0:
            raise ValueError(f"identity {y} has no samples in batch")
        logits = sims[:, column] / temperature
        total += float(logsumexp(logits) - logits[members].mean())
        if return_grad:
            grad[:, column] += softmax(logits) / temperature
            grad[members, column] -= 1.0 / (members.size * temperature)
    count = len(batch_index.columns)
    loss = max(total / count, 0.0)
    if not return_grad:
        return loss
    return loss, grad / count


def loss_c3(own_similarities: Sequence[float], batch_index: BatchIndex, return_grad: bool = False):
    """Squared differences of s(v_i, t_y) over same-identity cross-camera pairs (i < j)"""
    own = np.asarray(own_similarities, dtype=np.float64)
    grad = np.zeros_like(own)
    loss = 0.0
    for y in batch_index.identities:
        members = batch_index.positions[y]
        for a, i in enumerate(members):
            for j in members[a + 1:]:
                if batch_index.cameras[i] == batch_index.cameras[j]:
                    continue
                diff = own[i] - own[j]
                loss += diff * diff
                grad[i] += 2.0 * diff
                grad[j] -= 2.0 * diff
    return (loss, grad) if return_grad else loss


@dataclass
class CsaStep:
    total: float
    i2t: float
    t2i: float
    c3: float


def csa_objective(unit_embeddings: np.ndarray, labels: Sequence[int], cameras: Sequence[int],
                  tokens: PromptTokens, surrogate: TextEncoderSurrogate,
                  config: CsaConfig) -> Tuple[CsaStep, np.ndarray]:
    """Anchoring objective on one batch and its gradient w.r.t. the prompt tokens"""
    index = BatchIndex.from_labels(labels, cameras, dedup=config.dedup_identities)
    prototypes, cache = surrogate.forward(tokens, index.columns)
    sims = unit_embeddings @ prototypes.T

    l_i2t, g_i2t = loss_i2t(sims, index.sample_columns, config.temperature, return_grad=True)
    l_t2i, g_t2i = loss_t2i(sims, index, config.temperature, return_grad=True)
    grad_sims = g_i2t + g_t2i
    l_c3 = 0.0
    if config.lambda_c3 > 0:
        rows = np.arange(sims.shape[0])
        own_cols = index.sample_columns
        l_c3, g_own = loss_c3(sims[rows, own_cols], index, return_grad=True)
        np.add.at(grad_sims, (rows, own_cols), config.lambda_c3 * g_own)

    grad_prototypes = grad_sims.T @ unit_embeddings
    grad_tokens = surrogate.backward(tokens, cache, grad_prototypes)
    total = l_i2t + l_t2i + config.lambda_c3 * l_c3
    return CsaStep(total=total, i2t=l_i2t, t2i=l_t2i, c3=l_c3), grad_tokens


@dataclass
class CsaResult:
    """Anchoring-phase output for one client"""
    client: int
    tokens: PromptTokens
    prototypes: List[TextPrototype]
    loss_history: List[float] = field(default_factory=list)
    i2t_history: List[float] = field(default_factory=list)
    camera_variance: float = 0.0


class AnchoringService:
    """Runs the anchoring phase for one client against frozen encoders"""

    def __init__(self, surrogate: TextEncoderSurrogate, config: CsaConfig):
        self.surrogate = surrogate
        self.config = config
        self.logger = logging.getLogger(__name__)

    def optimize_tokens(self, tokens: PromptTokens, unit_embeddings: np.ndarray,
                        labels: np.ndarray, cameras: np.ndarray, rng: np.random.Generator,
                        epochs: Optional[int] = None, max_steps: Optional[int] = None) -> Tuple[List[float], List[float]]:
        """Plain gradient descent on the tokens; returns per-epoch (total, i2t) loss means"""
        sampler = PKSampler(labels, self.config.batch_identities, self.config.batch_instances)
        epochs = self.config.epochs if epochs is None else epochs
        history, i2t_history = [], []
        steps = 0
        for _ in range(epochs):
            losses, i2t_losses = [], []
            for batch in sampler.epoch(rng):
                step, grad = csa_objective(unit_embeddings[batch], labels[batch], cameras[batch],
                                           tokens, self.surrogate, self.config)
                tokens.tokens -= self.config.learning_rate * grad
                losses.append(step.total)
                i2t_losses.append(step.i2t)
                steps += 1
                if max_steps is not None and steps >= max_steps:
                    break
            history.append(float(np.mean(losses)))
            i2t_history.append(float(np.mean(i2t_losses)))
            if max_steps is not None and steps >= max_steps:
                break
        return history, i2t_history

    def run_csa_phase(self, client: int, images: np.ndarray, labels: Sequence[int], cameras: Sequence[int],
                      encoder: EncoderParams, seed: int) -> CsaResult:
        """Optimize this client's identity tokens and cache their prototypes"""
        labels = np.asarray(labels, dtype=np.int64)
        cameras = np.asarray(cameras, dtype=np.int64)
        if len(np.unique(cameras)) < 2:
            self.logger.warning(f"Client {client} has fewer than 2 cameras; cross-camera term is inert")

        rng = np.random.default_rng(np.random.SeedSequence([seed, client, 0xc5a]))
        identities = sorted(int(y) for y in np.unique(labels))
        tokens = PromptTokens.initialize(identities, self.config.num_tokens, self.surrogate.template.shape[0],
                                         rng, scale=self.config.token_init_scale)

        # The image tower stays frozen for the whole phase
        embeddings, _ = encode_images(encoder, images)
        unit, _ = l2_normalize(embeddings)
        history, i2t_history = self.optimize_tokens(tokens, unit, labels, cameras, rng)

        prototypes = cache_prototypes(self.surrogate, tokens, identities)
        variance = cross_camera_similarity_variance(embeddings, labels, cameras, prototypes)
        if history:
            self.logger.info(f"CSA client {client}: loss {history[0]:.4f} -> {history[-1]:.4f}, "
                             f"camera variance {variance:.5f}")
        return CsaResult(client=client, tokens=tokens, prototypes=prototypes,
                         loss_history=history, i2t_history=i2t_history, camera_variance=variance)

    def refresh_prototypes(self, tokens: PromptTokens, encoder: EncoderParams, images: np.ndarray,
                           labels: Sequence[int], cameras: Sequence[int], rng: np.random.Generator,
                           steps: int) -> List[TextPrototype]:
        """Dynamic anchoring: continue token descent against the current encoder, then re-cache"""
        labels = np.asarray(labels, dtype=np.int64)
        cameras = np.asarray(cameras, dtype=np.int64)
        if steps > 0:
            embeddings, _ = encode_images(encoder, images)
            unit, _ = l2_normalize(embeddings)
            self.optimize_tokens(tokens, unit, labels, cameras, rng, epochs=steps, max_steps=steps)
        return cache_prototypes(self.surrogate, tokens, tokens.identities)


def cross_camera_similarity_variance(embeddings: np.ndarray, labels: Sequence[int], cameras: Sequence[int],
                                     prototypes: Sequence[TextPrototype]) -> float:
    """Mean over identities of the across-camera variance of per-camera mean s(v_i, t_y)"""
    labels = np.asarray(labels, dtype=np.int64)
    cameras = np.asarray(cameras, dtype=np.int64)
    unit, _ = l2_normalize(np.asarray(embeddings, dtype=np.float64))
    lookup = {p.identity: p.vector for p in prototypes}
    variances = []
    for y in np.unique(labels):
        members = labels == y
        own = unit[members] @ lookup[int(y)]
        cams = cameras[members]
        per_camera = [own[cams == c].mean() for c in np.unique(cams)]
        if len(per_camera) >= 2:
            variances.append(float(np.var(per_camera)))
    return float(np.mean(variances)) if variances else 0.0
