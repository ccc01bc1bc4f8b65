"""
Federated training: client-local optimization over the
original and stylized views, sample-weighted server aggregation of the image
encoder, and per-round evaluation on the held-out splits.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from src.models.encoders import (
    ClassifierHead,
    EncoderParams,
    PromptTokens,
    encode_images,
)
from src.models.experiment import ExperimentConfig, LocalObjectiveConfig
from src.models.local_objective import AnchorSet, MomentumSGD, PKSampler, local_objective
from src.models.sample import FederationDataset, Sample, stack_samples
from src.services.evaluation import MarginReport, RetrievalResult, evaluate_split, summarize_splits
from src.services.style_bank import (
    StyleBank,
    StyleBankService,
    extract_templates,
    observe_groups,
    stylize_batch,
)

logger = logging.getLogger(__name__)


@dataclass
class ClientState:
    """Everything a client keeps locally between rounds"""
    client: int
    samples: List[Sample]
    images: np.ndarray
    labels: np.ndarray
    observed_cameras: np.ndarray
    head: ClassifierHead
    anchors: Optional[AnchorSet] = None
    tokens: Optional[PromptTokens] = None

    @classmethod
    def from_samples(cls, client: int, samples: Sequence[Sample], head: ClassifierHead,
                     observed_cameras: Optional[Sequence[int]] = None) -> 'ClientState':
        images, labels, cameras = stack_samples(samples)
        if observed_cameras is not None:
            cameras = np.asarray(observed_cameras, dtype=np.int64)
        return cls(client=client, samples=list(samples), images=images, labels=labels,
                   observed_cameras=cameras, head=head)

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class ClientUpdate:
    """Parameters a client uploads after local training"""
    client: int
    encoder: EncoderParams
    head: ClassifierHead
    num_samples: int
    epoch_losses: List[float] = field(default_factory=list)
    loss_parts: Dict[str, float] = field(default_factory=dict)


@dataclass
class RoundReport:
    """Per-round client losses and server-side evaluation"""
    round_index: int
    learning_rate: float
    client_losses: Dict[int, Dict[str, float]]
    metrics: Dict[str, Dict[str, float]] = field(default_factory=dict)
    margins: Optional[Dict[str, float]] = None

    def rows(self) -> List[Dict[str, object]]:
        """Long-format records (round, client, metric, value); server metrics use client -1"""
        rows = [{'round': self.round_index, 'client': -1, 'metric': 'learning_rate', 'value': self.learning_rate}]
        for client in sorted(self.client_losses):
            for name in sorted(self.client_losses[client]):
                rows.append({'round': self.round_index, 'client': client, 'metric': name,
                             'value': self.client_losses[client][name]})
        for split in sorted(self.metrics):
            for name in sorted(self.metrics[split]):
                rows.append({'round': self.round_index, 'client': -1, 'metric': f'{split}/{name}',
                             'value': self.metrics[split][name]})
        for name in sorted(self.margins or {}):
            rows.append({'round': self.round_index, 'client': -1, 'metric': f'margin/{name}',
                         'value': self.margins[name]})
        return rows


def _weighted_sum(reference: np.ndarray, arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    out = reference.copy()
    for arr, w in zip(arrays, weights):
        out += w * (arr - reference)
    return out


def aggregate(updates: Sequence[ClientUpdate],
              include_heads: bool = False) -> Tuple[EncoderParams, Optional[ClassifierHead]]:
    """theta = sum_k (n_k / N) theta_k over the encoders (and heads when shared).

    Updates are combined in client order so the result does not depend on
    arrival order, and identical inputs come back unchanged.
    """
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    ordered = sorted(updates, key=lambda u: u.client)
    total = sum(u.num_samples for u in ordered)
    if total <= 0:
        raise ValueError("total sample count must be > 0")
    weights = [u.num_samples / total for u in ordered]

    reference = ordered[0].encoder
    for u in ordered[1:]:
        if u.encoder.shapes() != reference.shapes():
            raise ValueError(f"shape mismatch: client {u.client} encoder {u.encoder.shapes()} "
                             f"vs {reference.shapes()}")
    encoder = EncoderParams(**{
        name: _weighted_sum(arr, [u.encoder.arrays()[name] for u in ordered], weights)
        for name, arr in reference.arrays().items()
    })

    head = None
    if include_heads:
        ref_head = ordered[0].head
        for u in ordered[1:]:
            if u.head.weight.shape != ref_head.weight.shape or u.head.classes != ref_head.classes:
                raise ValueError(f"shape mismatch: client {u.client} head does not match the shared label space")
        head = ClassifierHead(
            weight=_weighted_sum(ref_head.weight, [u.head.weight for u in ordered], weights),
            bias=_weighted_sum(ref_head.bias, [u.head.bias for u in ordered], weights),
            classes=list(ref_head.classes),
        )
    return encoder, head


class LocalTrainer:
    """Runs E local epochs of the coupled objective on one client"""

    def __init__(self, config: LocalObjectiveConfig, style_service: Optional[StyleBankService] = None,
                 scope: str = 'global'):
        self.config = config
        self.style_service = style_service
        self.scope = scope
        self.logger = logging.getLogger(__name__)

    def stylized_view(self, state: ClientState, batch: np.ndarray, bank: Optional[StyleBank],
                      rng: np.random.Generator) -> Optional[np.ndarray]:
        """Each sample re-normalized to an independently sampled template"""
        if not self.config.use_stylized_view or bank is None or self.style_service is None:
            return None
        templates = [self.style_service.sample_template(bank, rng, self.scope, state.client) for _ in batch]
        return stylize_batch(state.images[batch], templates, self.style_service.epsilon)

    def train(self, state: ClientState, encoder: EncoderParams, head: ClassifierHead,
              bank: Optional[StyleBank], learning_rate: float, seed: int, round_index: int) -> ClientUpdate:
        """Local update starting from the broadcast encoder"""
        params = encoder.copy()
        head = head.copy()
        optimizer = MomentumSGD(self.config.momentum, self.config.weight_decay)
        sampler = PKSampler(state.labels, self.config.batch_identities, self.config.batch_instances)
        batch_rng = np.random.default_rng([seed, round_index, state.client])
        style_rng = np.random.default_rng([seed, round_index, state.client, 1])

        epoch_losses = []
        part_sums: Dict[str, float] = {}
        steps = 0
        for _ in range(self.config.local_epochs):
            losses = []
            for batch in sampler.epoch(batch_rng):
                stylized = self.stylized_view(state, batch, bank, style_rng)
                result = local_objective(params, head, state.images[batch], stylized, state.labels[batch],
                                         state.anchors, self.config)
                named_params = {f'encoder.{k}': v for k, v in params.arrays().items()}
                named_params.update({f'head.{k}': v for k, v in head.arrays().items()})
                named_grads = {f'encoder.{k}': v for k, v in result.encoder_grad.arrays().items()}
                named_grads.update({f'head.{k}': v for k, v in result.head_grad.arrays().items()})
                optimizer.step(named_params, named_grads, learning_rate)

                losses.append(result.loss)
                for name, value in result.parts.items():
                    part_sums[name] = part_sums.get(name, 0.0) + value
                steps += 1
            epoch_losses.append(float(np.mean(losses)))

        parts = {name: total / max(steps, 1) for name, total in part_sums.items()}
        parts['total'] = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        return ClientUpdate(client=state.client, encoder=params, head=head, num_samples=state.num_samples,
                            epoch_losses=epoch_losses, loss_parts=parts)


def _train_client(trainer: LocalTrainer, state: ClientState, encoder: EncoderParams, head: ClassifierHead,
                  bank: Optional[StyleBank], learning_rate: float, seed: int, round_index: int) -> ClientUpdate:
    return trainer.train(state, encoder, head, bank, learning_rate, seed, round_index)


@dataclass
class FederationResult:
    """Round reports plus the final global model"""
    reports: List[RoundReport]
    encoder: EncoderParams
    heads: Dict[int, ClassifierHead]
    final_metrics: Dict[str, Dict[str, float]] = field(default_factory=dict)
    final_results: Dict[str, RetrievalResult] = field(default_factory=dict)
    final_margins: Optional[MarginReport] = None


class FederationService:
    """Orchestrates broadcast, local training, aggregation and evaluation"""

    def __init__(self, config: ExperimentConfig, workers: int = 1,
                 style_service: Optional[StyleBankService] = None,
                 prototype_refresher: Optional[Callable[[ClientState, EncoderParams, int], AnchorSet]] = None):
        self.config = config
        self.workers = max(1, workers)
        self.style_service = style_service
        self.prototype_refresher = prototype_refresher
        self.logger = logging.getLogger(__name__)

    def evaluate(self, encoder: EncoderParams, dataset: FederationDataset,
                 with_margins: bool = True) -> Tuple[Dict[str, RetrievalResult], Optional[MarginReport]]:
        """Retrieval on every evaluation split; margins on the first one"""
        results = {}
        margins = None
        embed = lambda images: encode_images(encoder, images)[0]  # noqa: E731
        for i, split in enumerate(dataset.evaluation_splits()):
            bins = self.config.evaluation.histogram_bins if (with_margins and i == 0) else None
            result, split_margins = evaluate_split(embed, split, self.config.evaluation.max_rank, bins)
            results[split.name] = result
            if split_margins is not None:
                margins = split_margins
        return results, margins

    def refresh_bank(self, states: Sequence[ClientState], seed: int, round_index: int) -> StyleBank:
        """Re-derive every client's templates under freshly observed metadata"""
        gsd = self.config.gsd
        templates = []
        for state in states:
            rng = np.random.default_rng([seed, round_index, state.client, 3])
            groups = observe_groups(state.samples, gsd.metadata, rng, gsd.corruption_fraction, gsd.num_pseudo_groups)
            templates.append(extract_templates(state.samples, groups, client=state.client))
        return self.style_service.build_bank(templates)

    def run_federation(self, dataset: FederationDataset, states: List[ClientState], encoder: EncoderParams,
                       bank: Optional[StyleBank], seed: int,
                       shared_head: Optional[ClassifierHead] = None) -> FederationResult:
        """R rounds of broadcast -> local training -> aggregation -> evaluation"""
        fed = self.config.federation
        use_alignment = self.config.csa.enabled
        use_style = self.config.gsd.enabled and bank is not None
        trainer = LocalTrainer(self.config.local_objective(use_alignment, use_style), self.style_service,
                                self.config.gsd.scope)
        global_encoder = encoder.copy()
        global_head = shared_head.copy() if shared_head is not None else None

        reports = []
        for r in range(fed.rounds):
            round_number = r + 1
            lr = fed.learning_rate_at(r)
            if use_style and self.config.gsd.refresh_each_round and r > 0:
                bank = self.refresh_bank(states, seed, round_number)
            if use_alignment and self.config.csa.anchoring == 'dynamic' and self.prototype_refresher is not None:
                for state in states:
                    state.anchors = self.prototype_refresher(state, global_encoder, round_number)

            heads = [global_head if global_head is not None else state.head for state in states]
            updates = Parallel(n_jobs=self.workers)(
                delayed(_train_client)(trainer, state, global_encoder, head, bank, lr, seed, round_number)
                for state, head in zip(states, heads)
            )
            global_encoder, aggregated_head = aggregate(updates, include_heads=global_head is not None)
            if aggregated_head is not None:
                global_head = aggregated_head
            else:
                for state, update in zip(states, updates):
                    state.head = update.head

            report = RoundReport(round_index=round_number, learning_rate=lr,
                                 client_losses={u.client: u.loss_parts for u in updates})
            if round_number % fed.eval_every == 0 or round_number == fed.rounds:
                results, margins = self.evaluate(global_encoder, dataset)
                report.metrics = {name: res.to_dict() for name, res in results.items()}
                report.margins = margins.to_dict() if margins is not None else None
                summary = summarize_splits(results)
                self.logger.info(f"Round {round_number}/{fed.rounds}: lr={lr:.5f} "
                                 f"mAP={summary.get('mAP', float('nan')):.4f} "
                                 f"rank1={summary.get('rank1', float('nan')):.4f}")
            reports.append(report)

        final_results, final_margins = self.evaluate(global_encoder, dataset)
        heads = {state.client: (global_head if global_head is not None else state.head) for state in states}
        return FederationResult(
            reports=reports,
            encoder=global_encoder,
            heads=heads,
            final_metrics={name: res.to_dict() for name, res in final_results.items()},
            final_results=final_results,
            final_margins=final_margins,
        )
